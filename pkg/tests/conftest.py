import os
from pathlib import Path

import pytest

from scopf_proxy.core.config_manager import resolve_case_path
from scopf_proxy.core.contingency import build_contingency_set
from scopf_proxy.core.grid_model import Network, parse_case

FIXTURES = Path(__file__).resolve().parent / "fixtures"
PGLIB_ENV = "SCOPF_PROXY_PGLIB_DIR"


@pytest.fixture(scope="session")
def tri() -> Network:
    """3-bus triangle, gens at buses 1 and 2, unit load at bus 3."""
    return parse_case(resolve_case_path("case3_triangle"))


@pytest.fixture(scope="session")
def ramp() -> Network:
    return parse_case(resolve_case_path("case3_ramp"))


@pytest.fixture(scope="session")
def case14() -> Network:
    return parse_case(FIXTURES / "case14.m")


@pytest.fixture
def tri_outage_23(tri):
    return build_contingency_set(tri, [3])


@pytest.fixture(scope="session")
def pglib_dir() -> Path:
    raw = os.environ.get(PGLIB_ENV)
    if not raw or not Path(raw).is_dir():
        pytest.skip(f"{PGLIB_ENV} not set")
    return Path(raw)


@pytest.fixture(scope="session")
def local3() -> Network:
    """case3_ramp with unit 3 priced to run in the base case."""
    return parse_case(FIXTURES / "case3_local.m")
