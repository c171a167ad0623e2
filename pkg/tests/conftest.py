import copy
import importlib.util
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent

try:
    import mfelattice  # noqa: F401
except ImportError:
    # The package maps onto the repository root; register it under its name.
    spec = importlib.util.spec_from_file_location(
        "mfelattice", ROOT / "__init__.py", submodule_search_locations=[str(ROOT)]
    )
    module = importlib.util.module_from_spec(spec)
    sys.modules["mfelattice"] = module
    spec.loader.exec_module(module)

from mfelattice.market_model import validate_scenario  # noqa: E402

SCENARIOS = ROOT / "scenarios"

ONE_STEP = {
    "lattice": {"N": 1, "T": 1.0, "r": 0.0, "s0": 1.0, "u_tilde": 1.1, "d_tilde": 0.9},
    "y_chain": {"y0": 1.0, "sigma_y": 0.0, "p_y": 0.5},
    "populations": [
        {
            "weight": 1.0,
            "agent_grid": {"types": [{"gamma": 1.0}]},
            "z_chain": {"z0": 1.0, "sigma_z": 0.0},
            "F": {"family": "affine_product", "params": {"a": 0.0, "b": -1.0}},
        }
    ],
}

SMALL = {
    "lattice": {"N": 6, "T": 0.375, "r": 0.033, "s0": 1.0, "sigma": 0.15},
    "y_chain": {"y0": 1.0, "sigma_y": 0.12, "p_y": 0.5},
    "populations": [
        {
            "weight": 1.0,
            "mode": "exponential_terminal",
            "agent_grid": {"gamma_min": 0.5, "gamma_max": 1.5, "n_gamma": 2},
            "z_chain": {"z0": 1.0, "sigma_z": 0.12, "p_z": 0.5},
            "F": {"family": "affine_product", "params": {"a": 0.0, "b": -3.0}},
        }
    ],
    "analysis": {"report_steps": [4, 6], "seed": 7},
}

SMALL_RECURSIVE = copy.deepcopy(SMALL)
SMALL_RECURSIVE["populations"][0].update({
    "mode": "recursive",
    "agent_grid": {"gamma_min": 0.4, "gamma_max": 1.6, "n_gamma": 1, "psi_min": 0.5, "psi_max": 1.5,
                   "n_psi": 1, "a_zeta": 1.05, "rho": 0.05},
    "F": {"family": "affine_product", "params": {"a": 0.0, "b": -2.0}},
    "g": {"family": "affine_product_dt", "params": {"a": 0.0, "b": 1.5}},
})


def config_with(base, **population):
    """Deep copy of a base config with fields of the first population replaced."""
    config = copy.deepcopy(base)
    config["populations"][0].update(population)
    return config


@pytest.fixture
def one_step_config():
    return copy.deepcopy(ONE_STEP)


@pytest.fixture
def one_step():
    return validate_scenario(copy.deepcopy(ONE_STEP))


@pytest.fixture
def small_config():
    return copy.deepcopy(SMALL)


@pytest.fixture
def small():
    return validate_scenario(copy.deepcopy(SMALL))


@pytest.fixture
def small_recursive():
    return validate_scenario(copy.deepcopy(SMALL_RECURSIVE))


@pytest.fixture
def two_types():
    """One step, gamma in {0.5, 1.5}, no liability and unit supply at the root."""
    config = config_with(
        ONE_STEP,
        agent_grid={"types": [{"gamma": 0.5, "weight": 0.5}, {"gamma": 1.5, "weight": 0.5}]},
        F={"family": "zero"},
    )
    config["order_flow"] = {"family": "custom", "params": {"table": {"0,0,0": 1.0}}}
    return validate_scenario(config)
