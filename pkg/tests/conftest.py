"""Shared fixtures: parsed cases and cached expensive solves."""

from pathlib import Path

import pytest

import ccopf
from ccopf import kernels

CASES = Path(__file__).parent.parent / "cases"


@pytest.fixture(scope="session")
def cases_dir() -> Path:
    return CASES


@pytest.fixture(scope="session")
def rts96_raw():
    return ccopf.parse_case(CASES / "rts96.m")


@pytest.fixture(scope="session")
def rts96_net(rts96_raw):
    """Stock reliability test system."""
    return ccopf.build_network(rts96_raw)


@pytest.fixture(scope="session")
def rts96_adm(rts96_net):
    return ccopf.build_admittance(rts96_net)


@pytest.fixture(scope="session")
def rts96m_net(rts96_raw):
    """Modified system: minimum outputs zeroed, capacities scaled 1.5x."""
    recipe = ccopf.load_recipe(CASES / "recipe_x15.json")
    return ccopf.build_network(ccopf.derive_stochastic_case(rts96_raw, recipe))


@pytest.fixture(scope="session")
def rts96m_adm(rts96m_net):
    return ccopf.build_admittance(rts96m_net)


@pytest.fixture(scope="session")
def rts96m_uspec(rts96m_net):
    usf = ccopf.parse_uncertainty(CASES / "rts96_uncertainty.json")
    return ccopf.bind_uncertainty(rts96m_net, usf)


@pytest.fixture(scope="session")
def rts96m_alpha(rts96m_net, rts96m_uspec):
    return ccopf.participation_factors(rts96m_net, rts96m_uspec)


@pytest.fixture(scope="session")
def rts96m_det_opf(rts96m_net, rts96m_adm):
    sol = ccopf.solve_acopf(rts96m_net, rts96m_adm)
    assert sol.converged, sol.status
    return sol


@pytest.fixture(scope="session")
def cc_analytical(rts96m_net, rts96m_adm, rts96m_uspec):
    return ccopf.solve_cc_acopf(rts96m_net, rts96m_adm, rts96m_uspec,
                                engine="analytical")


@pytest.fixture(scope="session")
def cc_monte_carlo(rts96m_net, rts96m_adm, rts96m_uspec):
    return ccopf.solve_cc_acopf(rts96m_net, rts96m_adm, rts96m_uspec,
                                engine="monte_carlo", n_mc=1000)


@pytest.fixture(scope="session")
def cc_scenario(rts96m_net, rts96m_adm, rts96m_uspec):
    return ccopf.solve_cc_acopf(rts96m_net, rts96m_adm, rts96m_uspec,
                                engine="scenario")


@pytest.fixture(scope="session")
def ieee118_raw():
    return ccopf.parse_case(CASES / "ieee118.m")


@pytest.fixture(scope="session")
def ieee118_net(ieee118_raw):
    return ccopf.build_network(ieee118_raw)


@pytest.fixture(scope="session")
def ieee118_adm(ieee118_net):
    return ccopf.build_admittance(ieee118_net)


@pytest.fixture(scope="session")
def ieee118m_net(ieee118_raw):
    recipe = ccopf.load_recipe(CASES / "recipe_x15.json")
    return ccopf.build_network(ccopf.derive_stochastic_case(ieee118_raw, recipe))


@pytest.fixture(scope="session")
def ieee118m_adm(ieee118m_net):
    return ccopf.build_admittance(ieee118m_net)


@pytest.fixture(scope="session")
def ieee118m_uspec(ieee118m_net):
    usf = ccopf.parse_uncertainty(CASES / "ieee118_uncertainty.json")
    return ccopf.bind_uncertainty(ieee118m_net, usf)


@pytest.fixture(scope="session")
def jit_warm(rts96_adm):
    """Compile the hot kernels once so timed tests measure steady state."""
    kernels.warmup(rts96_adm)
    return True
