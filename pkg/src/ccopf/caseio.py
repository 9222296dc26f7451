"""Reading and writing of grid case files, recipes and uncertainty descriptions."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BUS_COLS = 13
GEN_COLS = 10  # bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin (extra columns ignored)
BRANCH_COLS = 11  # fbus tbus r x b rateA rateB rateC ratio angle status (+ opt. angmin angmax)

_KNOWN_UNC_KEYS = {
    "uncertain_buses",
    "std_dev",
    "correlation",
    "power_factor",
    "epsilons",
    "alpha_rule",
    "quantile_model",
    "seed",
    "zones",
}
_EPS_KEYS = {"eps_p", "eps_q", "eps_v", "eps_i", "eps_joint"}


class CaseFormatError(ValueError):
    """Raised when a case file, recipe or uncertainty description is malformed."""


@dataclass
class RawCaseTables:
    """Verbatim numeric tables of a case file, in file units (MW, MVAr, MVA)."""

    name: str
    base_mva: float
    bus: np.ndarray
    gen: np.ndarray
    branch: np.ndarray
    gencost: list[list[float]]

    def copy(self) -> "RawCaseTables":
        return RawCaseTables(
            name=self.name,
            base_mva=self.base_mva,
            bus=self.bus.copy(),
            gen=self.gen.copy(),
            branch=self.branch.copy(),
            gencost=[row[:] for row in self.gencost],
        )


@dataclass
class Epsilons:
    """Acceptable violation probabilities per constraint category."""

    eps_p: float = 0.01
    eps_q: float = 0.01
    eps_v: float = 0.01
    eps_i: float = 0.01
    eps_joint: float = 0.1

    def smallest(self) -> float:
        return min(self.eps_p, self.eps_q, self.eps_v, self.eps_i)


@dataclass
class UncertaintySpecFile:
    """Parsed uncertainty description, not yet bound to a network."""

    uncertain_buses: list[int]
    std_dev_kind: str  # "relative" or "absolute"
    std_dev_value: float | list[float]
    correlation: float | dict | list
    power_factor: list[float]
    epsilons: Epsilons
    alpha_rule: str | dict[int, float]
    quantile_model: str
    seed: int
    zones: dict[int, int] | None = None
    source: str = field(default="", repr=False)


def _strip_comments(text: str) -> str:
    return re.sub(r"%[^\n]*", "", text)


def _parse_matrix(text: str, name: str, path: str) -> list[list[float]]:
    m = re.search(rf"mpc\.{name}\s*=\s*\[(.*?)\];", text, re.S)
    if m is None:
        raise CaseFormatError(f"{path}: missing required table 'mpc.{name}'")
    rows = []
    body = m.group(1).replace(";", "\n")
    for lineno, line in enumerate(body.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        vals = []
        for tok in line.split():
            try:
                vals.append(float(tok))
            except ValueError:
                raise CaseFormatError(
                    f"{path}: table '{name}' row {len(rows) + 1}: non-numeric entry {tok!r}"
                ) from None
        rows.append(vals)
    if not rows:
        raise CaseFormatError(f"{path}: table 'mpc.{name}' is empty")
    return rows


def _to_array(rows: list[list[float]], name: str, min_cols: int, path: str) -> np.ndarray:
    width = len(rows[0])
    for i, r in enumerate(rows, start=1):
        if len(r) != width:
            raise CaseFormatError(
                f"{path}: table '{name}' row {i} has {len(r)} columns, expected {width}"
            )
    if width < min_cols:
        raise CaseFormatError(
            f"{path}: table '{name}' has {width} columns, needs at least {min_cols}"
        )
    return np.asarray(rows, dtype=float)


def parse_case(path: str | Path) -> RawCaseTables:
    """Parse a MATPOWER-format case file into raw numeric tables.

    Performs structural validation only (table shapes, id references,
    bus types); electrical modelling happens in network construction.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CaseFormatError(f"cannot read case file {path}: {exc}") from exc
    text = _strip_comments(text)

    m = re.search(r"function\s+mpc\s*=\s*(\w+)", text)
    name = m.group(1) if m else path.stem

    m = re.search(r"mpc\.baseMVA\s*=\s*([0-9eE.+-]+)\s*;", text)
    if m is None:
        raise CaseFormatError(f"{path}: missing 'mpc.baseMVA'")
    base_mva = float(m.group(1))
    if base_mva <= 0:
        raise CaseFormatError(f"{path}: baseMVA must be positive, got {base_mva}")

    bus = _to_array(_parse_matrix(text, "bus", str(path)), "bus", BUS_COLS, str(path))
    gen = _to_array(_parse_matrix(text, "gen", str(path)), "gen", GEN_COLS, str(path))
    branch = _to_array(_parse_matrix(text, "branch", str(path)), "branch", BRANCH_COLS, str(path))
    gencost_rows = _parse_matrix(text, "gencost", str(path))

    bus_ids = bus[:, 0].astype(int)
    if len(set(bus_ids.tolist())) != len(bus_ids):
        raise CaseFormatError(f"{path}: duplicate bus ids")
    if np.any(bus[:, 0] != bus_ids):
        raise CaseFormatError(f"{path}: bus ids must be integers")
    known = set(bus_ids.tolist())

    types = bus[:, 1].astype(int)
    if not np.all(np.isin(types, (1, 2, 3))):
        raise CaseFormatError(f"{path}: bus types must be 1 (PQ), 2 (PV) or 3 (slack)")
    n_slack = int(np.sum(types == 3))
    if n_slack != 1:
        raise CaseFormatError(f"{path}: expected exactly one slack bus, found {n_slack}")
    if np.any(bus[:, 11] < bus[:, 12]):
        raise CaseFormatError(f"{path}: bus Vmax < Vmin")

    for i, b in enumerate(gen[:, 0].astype(int), start=1):
        if b not in known:
            raise CaseFormatError(f"{path}: gen row {i} references unknown bus {b}")
    for i, row in enumerate(branch, start=1):
        f, t = int(row[0]), int(row[1])
        if f not in known or t not in known:
            raise CaseFormatError(f"{path}: branch row {i} references unknown bus {f}-{t}")
        if row[3] == 0.0:
            raise CaseFormatError(f"{path}: branch row {i} has zero series reactance")
        if row[5] < 0:
            raise CaseFormatError(f"{path}: branch row {i} has negative rating")

    if len(gencost_rows) != gen.shape[0]:
        raise CaseFormatError(
            f"{path}: gencost has {len(gencost_rows)} rows for {gen.shape[0]} generators"
        )
    for i, row in enumerate(gencost_rows, start=1):
        if len(row) < 4:
            raise CaseFormatError(f"{path}: gencost row {i} too short")
        if int(row[0]) != 2:
            raise CaseFormatError(
                f"{path}: gencost row {i}: only polynomial cost model (2) is supported"
            )
        ncost = int(row[3])
        if ncost < 1 or ncost > 3:
            raise CaseFormatError(
                f"{path}: gencost row {i}: polynomial degree must be at most 2"
            )
        if len(row) != 4 + ncost:
            raise CaseFormatError(
                f"{path}: gencost row {i}: expected {4 + ncost} entries, got {len(row)}"
            )

    return RawCaseTables(
        name=name, base_mva=base_mva, bus=bus, gen=gen, branch=branch, gencost=gencost_rows
    )


def write_case(path: str | Path, raw: RawCaseTables) -> None:
    """Write raw case tables back to a MATPOWER-format file."""

    def fmt(x: float) -> str:
        if x == int(x) and abs(x) < 1e15:
            return str(int(x))
        return repr(float(x))

    def table(name: str, rows) -> str:
        lines = "\n".join("\t" + "\t".join(fmt(v) for v in row) + ";" for row in rows)
        return f"mpc.{name} = [\n{lines}\n];\n"

    out = [
        f"function mpc = {raw.name}",
        "mpc.version = '2';",
        f"mpc.baseMVA = {fmt(raw.base_mva)};",
        table("bus", raw.bus),
        table("gen", raw.gen),
        table("branch", raw.branch),
        table("gencost", raw.gencost),
    ]
    Path(path).write_text("\n".join(out))


def load_recipe(path: str | Path) -> dict:
    """Load and validate a case modification recipe."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CaseFormatError(f"cannot read recipe {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CaseFormatError(f"{path}: recipe must be a JSON object")
    known = {"gen_pmax_scale", "zero_pmin"}
    unknown = set(data) - known
    if unknown:
        raise CaseFormatError(f"{path}: unknown recipe keys {sorted(unknown)}")
    scale = data.get("gen_pmax_scale", 1.0)
    if not isinstance(scale, (int, float)) or scale <= 0:
        raise CaseFormatError(f"{path}: gen_pmax_scale must be a positive number")
    if not isinstance(data.get("zero_pmin", False), bool):
        raise CaseFormatError(f"{path}: zero_pmin must be a boolean")
    return {"gen_pmax_scale": float(scale), "zero_pmin": bool(data.get("zero_pmin", False))}


def derive_stochastic_case(raw: RawCaseTables, recipe: dict) -> RawCaseTables:
    """Apply a modification recipe to raw case tables, returning a new object."""
    out = raw.copy()
    scale = float(recipe.get("gen_pmax_scale", 1.0))
    if scale != 1.0:
        out.gen[:, 8] *= scale
    if recipe.get("zero_pmin", False):
        out.gen[:, 9] = 0.0
    if np.any(out.gen[:, 8] < out.gen[:, 9]):
        raise CaseFormatError("recipe produced gen with Pmax < Pmin")
    return out


def _validate_power_factor(pf, n_src: int, path: str) -> list[float]:
    if isinstance(pf, (int, float)):
        pf = [float(pf)] * n_src
    if not isinstance(pf, list) or len(pf) != n_src:
        raise CaseFormatError(
            f"{path}: power_factor must be a scalar or one value per uncertain bus"
        )
    for x in pf:
        if not isinstance(x, (int, float)) or not (0.0 < x <= 1.0):
            raise CaseFormatError(f"{path}: power factors must lie in (0, 1], got {x!r}")
    return [float(x) for x in pf]


def _validate_correlation(corr, n_src: int, zones, path: str):
    if isinstance(corr, (int, float)):
        if not (-1.0 <= corr <= 1.0):
            raise CaseFormatError(f"{path}: scalar correlation must lie in [-1, 1]")
        return float(corr)
    if isinstance(corr, dict):
        unknown = set(corr) - {"within_zone", "between_zone"}
        if unknown:
            raise CaseFormatError(f"{path}: unknown correlation keys {sorted(unknown)}")
        if zones is None:
            raise CaseFormatError(f"{path}: zonal correlation requires a 'zones' map")
        return {
            "within_zone": float(corr.get("within_zone", 0.0)),
            "between_zone": float(corr.get("between_zone", 0.0)),
        }
    if isinstance(corr, list):
        mat = np.asarray(corr, dtype=float)
        if mat.shape != (n_src, n_src):
            raise CaseFormatError(
                f"{path}: correlation matrix must be {n_src}x{n_src}, got {mat.shape}"
            )
        if not np.allclose(mat, mat.T, atol=1e-12):
            raise CaseFormatError(f"{path}: correlation matrix must be symmetric")
        if not np.allclose(np.diag(mat), 1.0, atol=1e-12):
            raise CaseFormatError(f"{path}: correlation matrix diagonal must be 1")
        eigmin = float(np.linalg.eigvalsh(mat).min())
        if eigmin < -1e-10:
            raise CaseFormatError(
                f"{path}: correlation matrix is not positive semidefinite "
                f"(smallest eigenvalue {eigmin:.3e})"
            )
        return mat.tolist()
    raise CaseFormatError(f"{path}: unsupported correlation specification")


def parse_uncertainty(path: str | Path) -> UncertaintySpecFile:
    """Parse and validate an uncertainty description JSON file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CaseFormatError(f"cannot read uncertainty file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CaseFormatError(f"{path}: top level must be a JSON object")
    unknown = set(data) - _KNOWN_UNC_KEYS
    if unknown:
        raise CaseFormatError(f"{path}: unknown keys {sorted(unknown)}")
    missing = (_KNOWN_UNC_KEYS - {"zones"}) - set(data)
    if missing:
        raise CaseFormatError(f"{path}: missing required keys {sorted(missing)}")

    buses = data["uncertain_buses"]
    if (
        not isinstance(buses, list)
        or not buses
        or any(not isinstance(b, int) or b <= 0 for b in buses)
    ):
        raise CaseFormatError(f"{path}: uncertain_buses must be a non-empty list of bus ids")
    if len(set(buses)) != len(buses):
        raise CaseFormatError(f"{path}: duplicate entries in uncertain_buses")
    n_src = len(buses)

    sd = data["std_dev"]
    if not isinstance(sd, dict) or set(sd) != {"kind", "value"}:
        raise CaseFormatError(f"{path}: std_dev must be an object with keys 'kind' and 'value'")
    if sd["kind"] not in ("relative", "absolute"):
        raise CaseFormatError(f"{path}: std_dev kind must be 'relative' or 'absolute'")
    sd_value = sd["value"]
    if isinstance(sd_value, list):
        if len(sd_value) != n_src:
            raise CaseFormatError(f"{path}: std_dev value list must have one entry per bus")
        vals = [float(v) for v in sd_value]
    else:
        vals = [float(sd_value)]
    if any(v < 0 for v in vals) or (sd["kind"] == "relative" and any(v > 1 for v in vals)):
        raise CaseFormatError(f"{path}: std_dev values out of range")
    sd_value = vals if isinstance(sd_value, list) else float(sd_value)

    zones = data.get("zones")
    if zones is not None:
        if not isinstance(zones, dict):
            raise CaseFormatError(f"{path}: zones must map bus id to zone id")
        try:
            zones = {int(k): int(v) for k, v in zones.items()}
        except (TypeError, ValueError):
            raise CaseFormatError(f"{path}: zones must map bus id to zone id") from None
        missing_z = [b for b in buses if b not in zones]
        if missing_z:
            raise CaseFormatError(f"{path}: zones missing uncertain buses {missing_z[:5]}")

    corr = _validate_correlation(data["correlation"], n_src, zones, str(path))
    pf = _validate_power_factor(data["power_factor"], n_src, str(path))

    eps_raw = data["epsilons"]
    if not isinstance(eps_raw, dict) or set(eps_raw) != _EPS_KEYS:
        raise CaseFormatError(f"{path}: epsilons must contain exactly {sorted(_EPS_KEYS)}")
    for k, v in eps_raw.items():
        if not isinstance(v, (int, float)) or not (0.0 < v < 0.5):
            raise CaseFormatError(f"{path}: {k} must lie in (0, 0.5), got {v!r}")
    eps = Epsilons(**{k: float(v) for k, v in eps_raw.items()})

    alpha = data["alpha_rule"]
    if isinstance(alpha, str):
        if alpha != "proportional_pmax":
            raise CaseFormatError(f"{path}: unknown alpha_rule {alpha!r}")
    elif isinstance(alpha, dict):
        if set(alpha) != {"explicit"} or not isinstance(alpha["explicit"], dict):
            raise CaseFormatError(
                f"{path}: explicit alpha_rule must be {{'explicit': {{bus: value}}}}"
            )
        try:
            explicit = {int(k): float(v) for k, v in alpha["explicit"].items()}
        except (TypeError, ValueError):
            raise CaseFormatError(f"{path}: explicit alpha entries must be numeric") from None
        if any(v < 0 for v in explicit.values()):
            raise CaseFormatError(f"{path}: explicit alpha entries must be non-negative")
        total = sum(explicit.values())
        if abs(total - 1.0) > 1e-9:
            raise CaseFormatError(f"{path}: explicit alpha must sum to 1, got {total!r}")
        alpha = explicit
    else:
        raise CaseFormatError(f"{path}: alpha_rule must be a name or an explicit map")

    qm = data["quantile_model"]
    if qm not in ("gaussian", "chebyshev"):
        raise CaseFormatError(f"{path}: quantile_model must be 'gaussian' or 'chebyshev'")

    seed = data["seed"]
    if not isinstance(seed, int):
        raise CaseFormatError(f"{path}: seed must be an integer")

    return UncertaintySpecFile(
        uncertain_buses=list(buses),
        std_dev_kind=sd["kind"],
        std_dev_value=sd_value,
        correlation=corr,
        power_factor=pf,
        epsilons=eps,
        alpha_rule=alpha,
        quantile_model=qm,
        seed=seed,
        zones=zones,
        source=str(path),
    )


class _CanonicalEncoder(json.JSONEncoder):
    def default(self, o):
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        return super().default(o)


def _round_floats(obj):
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            raise ValueError("non-finite value in report")
        return float(f"{obj:.12g}")
    if isinstance(obj, np.floating):
        return _round_floats(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _round_floats(obj.tolist())
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def canonical_json(data) -> str:
    """Serialize to deterministic JSON: sorted keys, 12-digit floats, no NaN."""
    return json.dumps(_round_floats(data), sort_keys=True, indent=1, allow_nan=False,
                      cls=_CanonicalEncoder)


def write_report(path: str | Path, report) -> None:
    """Write a result object (anything with to_dict, or a plain dict) as JSON."""
    data = report.to_dict() if hasattr(report, "to_dict") else report
    Path(path).write_text(canonical_json(data) + "\n")
