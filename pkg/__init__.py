"""
mfelattice - mean-field market-clearing equilibrium on a recombining binomial lattice
"""

from .lattice import (
    LatticeSpec,
    FiniteMarkovChainSpec,
    PathIndex,
    risk_neutral_prob,
    node_price,
    enumerate_stock_paths,
)
from .market_model import (
    AgentType,
    AgentTypeGrid,
    PayoffField,
    OrderFlowField,
    BiasField,
    PopulationSpec,
    Scenario,
    load_scenario,
    validate_scenario,
)
from .equilibrium_solver import (
    EquilibriumSolution,
    backward_solve,
    path_dependent_solve,
    solve,
    brute_force_node_oracle,
)
from .distribution_analyzer import (
    forward_joint_law,
    risk_neutral_law,
    build_report,
    simulate_agent_paths,
)
from .finite_agent_sim import convergence_study
from .errors import MfeError


def new(path, **kwargs):
    """
    Load a scenario file and solve it.

    Args:
        path (str): scenario JSON file
        **kwargs: passed on to solve (phi_steps, keep_diagnostics)

    Returns:
        EquilibriumSolution: the solved equilibrium
    """
    return solve(load_scenario(path), **kwargs)


__version__ = '0.1.0'
__all__ = [
    'LatticeSpec',
    'FiniteMarkovChainSpec',
    'PathIndex',
    'risk_neutral_prob',
    'node_price',
    'enumerate_stock_paths',
    'AgentType',
    'AgentTypeGrid',
    'PayoffField',
    'OrderFlowField',
    'BiasField',
    'PopulationSpec',
    'Scenario',
    'load_scenario',
    'validate_scenario',
    'EquilibriumSolution',
    'backward_solve',
    'path_dependent_solve',
    'solve',
    'brute_force_node_oracle',
    'forward_joint_law',
    'risk_neutral_law',
    'build_report',
    'simulate_agent_paths',
    'convergence_study',
    'MfeError',
    'new',
]
