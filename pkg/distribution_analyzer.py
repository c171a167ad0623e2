"""
Forward propagation of the equilibrium law and the statistics reported on it.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from .equilibrium_solver import consumption_policy
from .errors import ConditioningError, DiagnosticsNotRetainedError, InputError, InternalConsistencyError
from .lattice import (
    DRIFT_GUARD,
    node_prices,
    path_up_counts,
    risk_neutral_prob,
    rng_stream,
    sample_chain_paths,
    sample_rows,
)
from .market_model import UtilityMode, allocate_counts, eval_F, sample_agents

logger = logging.getLogger(__name__)

# spawn-key namespace for simulate_agent_paths streams
SIMULATION_STREAM = 1


class PercentileConvention(str, Enum):
    NODE_INDEX = "node-index"
    PROBABILITY = "probability"


@dataclass(frozen=True, eq=False)
class ForwardLaw:
    """
    Joint law of (stock, Y) per step.

    nodes[n] is a probability table (n+1, J_n) over stock nodes and Y states.
    native[n] is the same law in the solver's layout (equal to nodes for the
    node layout, per-path tables for the path layout).
    """

    lattice: object
    y_chain: object
    nodes: tuple
    native: tuple
    layout: str = "node"
    populations: tuple = field(default=(), repr=False)

    @property
    def N(self):
        return len(self.nodes) - 1


@dataclass(frozen=True)
class PriceDistribution:
    prices: np.ndarray
    probs: np.ndarray

    @property
    def mean(self):
        return float(np.dot(self.prices, self.probs))

    @property
    def variance(self):
        return float(np.dot((self.prices - self.mean) ** 2, self.probs))

    def cdf(self):
        return np.cumsum(self.probs)

    def cdf_at(self, s):
        return float(self.probs[self.prices <= s].sum())

    def quantile(self, q):
        return float(self.prices[min(int(np.searchsorted(self.cdf(), q)), len(self.prices) - 1)])

    def tail_mass(self, lower=None, upper=None):
        """(P(S < lower), P(S > upper)); a missing threshold gives 0."""
        below = float(self.probs[self.prices < lower].sum()) if lower is not None else 0.0
        above = float(self.probs[self.prices > upper].sum()) if upper is not None else 0.0
        return below, above


def _propagate(p_tables, layout, y_chain, N):
    start = np.zeros((1, len(y_chain.states[0])))
    start[0] = y_chain.initial
    native = [start]
    for n in range(N):
        mass = native[-1]
        p = p_tables[n]
        up = (mass * p) @ y_chain.transitions[n]
        down = (mass * (1.0 - p)) @ y_chain.transitions[n]
        if layout == "node":
            nxt = np.zeros((n + 2, up.shape[1]))
            nxt[1:] += up
            nxt[:-1] += down
        else:
            nxt = np.empty((2 * up.shape[0], up.shape[1]))
            nxt[1::2] = up
            nxt[0::2] = down
        total = nxt.sum()
        if abs(total - 1.0) > DRIFT_GUARD:
            raise InternalConsistencyError(f"forward law mass drifted to {total!r}", n=n + 1)
        native.append(nxt / total)
    if layout == "node":
        nodes = native
    else:
        nodes = [_paths_to_nodes(table, n) for n, table in enumerate(native)]
    return tuple(nodes), tuple(native)


def _paths_to_nodes(table, n):
    out = np.zeros((n + 1, table.shape[1]))
    np.add.at(out, path_up_counts(n), table)
    return out


def forward_joint_law(solution, lattice=None, y_chain=None):
    """Push the delta mass at (s0, Y0) forward under the equilibrium probabilities."""
    scenario = solution.scenario
    lattice = lattice or scenario.lattice
    y_chain = y_chain or scenario.y_chain
    nodes, native = _propagate(solution.p, solution.layout, y_chain, lattice.N)
    return ForwardLaw(lattice, y_chain, nodes, native, solution.layout, scenario.populations)


def risk_neutral_law(lattice, y_chain):
    """Forward law with p = p_q at every node."""
    p_q = risk_neutral_prob(lattice)
    tables = [np.full((n + 1, len(y_chain.states[n])), p_q) for n in range(lattice.N)]
    nodes, native = _propagate(tables, "node", y_chain, lattice.N)
    return ForwardLaw(lattice, y_chain, nodes, native, "node")


def marginal_price_distribution(law, n):
    if not 0 <= n <= law.N:
        raise IndexError(f"step {n} outside 0..{law.N}")
    probs = law.nodes[n].sum(axis=1)
    return PriceDistribution(node_prices(law.lattice, n), probs / probs.sum())


def conditional_price_distribution(law, n, y_node):
    if not 0 <= n <= law.N:
        raise IndexError(f"step {n} outside 0..{law.N}")
    column = law.nodes[n][:, y_node]
    mass = column.sum()
    if not mass > 0:
        raise ConditioningError(f"Y state {y_node} has zero probability at step {n}")
    return PriceDistribution(node_prices(law.lattice, n), column / mass)


def percentile_y_node(y_chain, n, q, convention=PercentileConvention.NODE_INDEX):
    """
    Y state index standing for the q-th percentile at step n.

    NODE_INDEX takes position floor(q * n) among the ordered states (for a
    binomial chain, floor(q * n) up moves); PROBABILITY inverts the marginal CDF.
    """
    if not 0 < q < 1:
        raise InputError(f"percentile must lie in (0, 1), got {q}")
    states = y_chain.states[n]
    order = np.argsort(states, kind="stable")
    if PercentileConvention(convention) is PercentileConvention.NODE_INDEX:
        return int(order[int(math.floor(q * (len(states) - 1)))])
    cdf = np.cumsum(y_chain.marginals[n][order])
    pos = int(np.searchsorted(cdf, q, side="left"))
    return int(order[min(pos, len(states) - 1)])


def expected_price(law, n, y_node=None):
    if y_node is None:
        return marginal_price_distribution(law, n).mean
    return conditional_price_distribution(law, n, y_node).mean


def expected_price_path(law):
    return np.array([expected_price(law, n) for n in range(law.N + 1)])


def conditional_expected_path(law, q, convention=PercentileConvention.NODE_INDEX):
    """E[S_n | Y_n = percentile node at n] for every n, nearest node at each time."""
    return np.array([
        expected_price(law, n, percentile_y_node(law.y_chain, n, q, convention)) if n else law.lattice.s0
        for n in range(law.N + 1)
    ])


def annualized_excess_return(mean_price, t, lattice, convention="log"):
    """
    Annualized excess return of a mean price at time t.

    log:    log(E[S_t] / s0) / t - r
    simple: (E[S_t] / s0 - exp(r t)) / t, the arithmetic annualized gain in
            excess of the money account over the same horizon

    Both vanish on the risk-neutral expected path.
    """
    if not t > 0:
        raise InputError(f"horizon must be positive, got {t}")
    growth = mean_price / lattice.s0
    if convention == "simple":
        return (growth - math.exp(lattice.r * t)) / t
    return math.log(growth) / t - lattice.r


def excess_return_series(path, lattice, convention="log"):
    """Excess return at every step n >= 1 of an expected price path."""
    return np.array([
        annualized_excess_return(path[n], n * lattice.dt, lattice, convention) for n in range(1, len(path))
    ])


def trading_volume(solution, law, n, y_node=None):
    """Root mean square of phi* across agents and (stock, Y) states at decision step n."""
    if not 0 <= n < law.N:
        raise IndexError(f"decision step {n} outside 0..{law.N - 1}")
    mass = law.native[n]
    second = solution.phi_sq[n]
    if y_node is None:
        return math.sqrt(max(float(np.sum(mass * second)), 0.0))
    column = mass[:, y_node]
    total = column.sum()
    if not total > 0:
        raise ConditioningError(f"Y state {y_node} has zero probability at step {n}")
    return math.sqrt(max(float(np.dot(column, second[:, y_node]) / total), 0.0))


# ---------------------------------------------------------------------------
# Agent path simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AgentPaths:
    """Sampled trajectories; agent axes are (path, agent, step)."""

    prices: np.ndarray
    y_index: np.ndarray
    population: np.ndarray
    type_index: np.ndarray
    z_index: np.ndarray
    wealth: np.ndarray
    position: np.ndarray
    consumption: np.ndarray


def simulate_agent_paths(solution, scenario, n_agents, n_paths, seed, consumption=True):
    """
    Roll agent wealth forward along sampled equilibrium paths.

    X_{n+1} = beta (X_n - c_n dt) + phi_n (R_{n+1} - beta) + g_{n+1}.
    Path j uses the stream rng_stream(seed, SIMULATION_STREAM, j).
    """
    if solution.scenario_hash != scenario.content_hash:
        raise InputError("solution was computed for a different scenario")
    lat = scenario.lattice
    N, dt, beta = lat.N, lat.dt, lat.beta
    pops = scenario.populations
    counts = allocate_counts([p.weight for p in pops], n_agents)
    for i, pop in enumerate(pops):
        if consumption and pop.mode is UtilityMode.RECURSIVE and counts[i] and (
                solution.log_v_tilde is None or solution.log_v_tilde[i] is None):
            raise DiagnosticsNotRetainedError("consumption needs a solve with keep_diagnostics=True")

    prices = np.empty((n_paths, N + 1))
    y_idx = np.empty((n_paths, N + 1), dtype=np.int64)
    pop_idx = np.repeat(np.arange(len(pops)), counts)
    type_idx = np.empty((n_paths, n_agents), dtype=np.int64)
    z_idx = np.empty((n_paths, n_agents, N + 1), dtype=np.int64)
    wealth = np.empty((n_paths, n_agents, N + 1))
    position = np.zeros((n_paths, n_agents, N))
    spend = np.zeros((n_paths, n_agents, N))

    for j in range(n_paths):
        rng = rng_stream(seed, SIMULATION_STREAM, j)
        stock = 0
        y = int(rng.choice(len(scenario.y_chain.initial), p=scenario.y_chain.initial))
        offset = 0
        for i, pop in enumerate(pops):
            block = slice(offset, offset + counts[i])
            z0, t = sample_agents(pop, counts[i], rng)
            type_idx[j, block] = t
            z_idx[j, block] = sample_chain_paths(pop.z_chain, counts[i], rng, start=z0)
            wealth[j, block, 0] = pop.grid.xis[t]
            offset += counts[i]
        prices[j, 0] = lat.s0
        y_idx[j, 0] = y
        for n in range(N):
            up = rng.random() < solution.p[n][stock, y]
            y_next = int(sample_rows(rng, scenario.y_chain.transitions[n], np.array([y]))[0])
            stock_next = stock + int(up) if solution.layout == "node" else 2 * stock + int(up)
            excess = lat.u if up else lat.d
            prices[j, n + 1] = prices[j, n] * (lat.u_tilde if up else lat.d_tilde)
            y_idx[j, n + 1] = y_next
            offset = 0
            for i, pop in enumerate(pops):
                block = slice(offset, offset + counts[i])
                offset += counts[i]
                if not counts[i]:
                    continue
                t = type_idx[j, block]
                z = z_idx[j, block, n]
                phi = solution.phi_table(n, i)[stock, y, z, t]
                x = wealth[j, block, n]
                c = np.zeros(counts[i])
                if consumption and pop.mode is UtilityMode.RECURSIVE:
                    c = np.array([consumption_policy(x[a], n, stock, y, z[a], t[a], solution, i)
                                  for a in range(counts[i])])
                g_field = pop.endowment(n + 1)
                z_next = z_idx[j, block, n + 1]
                s_stat = _statistic(g_field.path_statistic, prices[j, :n + 2])
                g = np.array([
                    eval_F(g_field, s_stat, scenario.y_chain.states[n + 1][y_next],
                           pop.z_chain.states[n + 1][zn], dt=dt,
                           index=(n + 1, stock_next, y_next, zn))
                    for zn in z_next
                ], dtype=float)
                position[j, block, n] = phi
                spend[j, block, n] = c
                wealth[j, block, n + 1] = beta * (x - c * dt) + phi * excess + g
            stock, y = stock_next, y_next

    logger.debug("simulated %d paths of %d agents", n_paths, n_agents)
    return AgentPaths(prices, y_idx, pop_idx, type_idx, z_idx, wealth, position,
                      spend if consumption else None)


def _statistic(name, history):
    if name == "max":
        return float(history.max())
    if name == "mean":
        return float(history.mean())
    return float(history[-1])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReportBundle:
    distributions: pd.DataFrame
    expected_paths: pd.DataFrame
    excess_returns: pd.DataFrame
    volume: pd.DataFrame
    metadata: dict

    def to_frames(self):
        return {
            "distributions": self.distributions,
            "expected_path": self.expected_paths,
            "excess_return": self.excess_returns,
            "volume": self.volume,
        }


def default_report_steps(lattice):
    one_year = int(round(1.0 / lattice.dt))
    steps = [one_year] if 0 < one_year < lattice.N else []
    return tuple(steps + [lattice.N])


def build_report(solution, report_steps=None, percentiles=None, convention=None,
                 excess_convention=None, seed=None):
    """Distributions, expected paths, excess returns and volumes for a solution."""
    scenario = solution.scenario
    options = scenario.analysis
    lat = scenario.lattice
    report_steps = tuple(report_steps or options.report_steps or default_report_steps(lat))
    percentiles = tuple(percentiles or options.percentiles)
    convention = PercentileConvention(convention or options.percentile_convention)
    excess_convention = excess_convention or options.excess_return_convention
    q_bottom, q_top = min(percentiles), max(percentiles)

    law = forward_joint_law(solution)
    q_law = risk_neutral_law(lat, scenario.y_chain)

    rows = []
    for n in report_steps:
        bottom = percentile_y_node(scenario.y_chain, n, q_bottom, convention) if n else None
        top = percentile_y_node(scenario.y_chain, n, q_top, convention) if n else None
        measures = [
            ("P", marginal_price_distribution(law, n)),
            ("Q", marginal_price_distribution(q_law, n)),
            ("P|Ytop", conditional_price_distribution(law, n, top) if n else marginal_price_distribution(law, 0)),
            ("P|Ybottom", conditional_price_distribution(law, n, bottom) if n else marginal_price_distribution(law, 0)),
        ]
        for name, dist in measures:
            for s, prob in zip(dist.prices, dist.probs):
                rows.append((n, s, prob, name))
    distributions = pd.DataFrame(rows, columns=["n", "s", "prob", "measure"])

    paths = {
        "P": expected_price_path(law),
        "Q": expected_price_path(q_law),
        "P|Ytop": conditional_expected_path(law, q_top, convention),
        "P|Ybottom": conditional_expected_path(law, q_bottom, convention),
    }
    times = lat.times()
    expected = pd.DataFrame([
        (n, times[n], name, path[n]) for name, path in paths.items() for n in range(lat.N + 1)
    ], columns=["n", "t", "measure", "expected_price"])
    excess = pd.DataFrame([
        (n, times[n], name, annualized_excess_return(path[n], times[n], lat, excess_convention))
        for name, path in paths.items() for n in range(1, lat.N + 1)
    ], columns=["n", "t", "measure", "excess_return"])

    volume_rows = []
    for n in range(lat.N):
        volume_rows.append((n, times[n], "P", trading_volume(solution, law, n)))
        if n:
            for name, q in (("P|Ytop", q_top), ("P|Ybottom", q_bottom)):
                y_node = percentile_y_node(scenario.y_chain, n, q, convention)
                volume_rows.append((n, times[n], name, trading_volume(solution, law, n, y_node)))
    volume = pd.DataFrame(volume_rows, columns=["n", "t", "measure", "volume"])

    metadata = {
        "scenario_sha256": solution.scenario_hash,
        "seed": options.seed if seed is None else seed,
        "percentile_convention": convention.value,
        "excess_return_convention": excess_convention,
        "percentiles": list(percentiles),
        "report_steps": list(report_steps),
        "layout": solution.layout,
    }
    return ReportBundle(distributions, expected, excess, volume, metadata)
