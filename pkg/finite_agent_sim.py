"""
Finite-population checks of the mean-field clearing condition.

A finite sample of agents trading the mean-field optimal positions leaves an
excess demand at every node. Its mean square should fall like 1/N_p; this
module estimates it by Monte Carlo and fits the log-log slope.

Random streams: the sample for population size N_p and replication r is drawn
from rng_stream(seed, POPULATION_STREAM, N_p, r), agents in population order,
so every (seed, N_p, replication) triple maps to one fixed stream.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .distribution_analyzer import forward_joint_law
from .equilibrium_solver import solve
from .errors import InputError
from .lattice import rng_stream, sample_chain_paths
from .market_model import allocate_counts, sample_agents

logger = logging.getLogger(__name__)

POPULATION_STREAM = 0
SLOPE_BAND = (-1.15, -0.85)


@dataclass(frozen=True, eq=False)
class SampledPopulation:
    """N_p agents with their population, type and Z index path."""

    scenario_hash: str
    population: np.ndarray
    type_index: np.ndarray
    z_paths: np.ndarray

    def __len__(self):
        return len(self.population)

    def cell_frequencies(self, n, population, n_z, n_types):
        """Share of all agents in each (z state at n, type) cell of one population."""
        mask = self.population == population
        cells = self.z_paths[mask, n] * n_types + self.type_index[mask]
        counts = np.bincount(cells, minlength=n_z * n_types).reshape(n_z, n_types)
        return counts / len(self)


def sample_population(scenario, n_agents, seed, replication=0):
    """Draw n_agents i.i.d. agents, split across populations by largest remainder."""
    if n_agents < 1:
        raise InputError(f"need at least one agent, got {n_agents}")
    rng = rng_stream(seed, POPULATION_STREAM, n_agents, replication)
    counts = allocate_counts([p.weight for p in scenario.populations], n_agents)
    pops, types, paths = [], [], []
    for i, (pop, count) in enumerate(zip(scenario.populations, counts)):
        if not count:
            continue
        z0, t = sample_agents(pop, count, rng)
        pops.append(np.full(count, i))
        types.append(np.asarray(t))
        paths.append(sample_chain_paths(pop.z_chain, count, rng, start=z0))
    return SampledPopulation(
        scenario_hash=scenario.content_hash,
        population=np.concatenate(pops),
        type_index=np.concatenate(types),
        z_paths=np.concatenate(paths),
    )


def excess_demand(solution, agents, n):
    """
    Per (stock, Y) node excess demand of the sampled agents at step n.

    This is the sample mean of phi* minus its mean-field counterpart, which
    equals L by market clearing.
    """
    if agents.scenario_hash != solution.scenario_hash:
        raise InputError("agents were sampled for a different scenario")
    excess = np.zeros_like(solution.supply[n])
    for i, pop in enumerate(solution.scenario.populations):
        phi = solution.phi_table(n, i)
        cross = pop.cross_section(n)
        freq = agents.cell_frequencies(n, i, cross.shape[0], cross.shape[1])
        excess += np.tensordot(phi, freq - pop.weight * cross, axes=([2, 3], [0, 1]))
    return excess


def excess_demand_mse(solution, agents, n, law=None):
    """Law-weighted mean over (stock, Y) nodes of the squared excess demand at step n."""
    excess = excess_demand(solution, agents, n)
    law = law or forward_joint_law(solution)
    return float(np.sum(law.native[n] * excess ** 2))


@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    np_values: tuple
    mse: tuple
    mse_stderr: tuple
    slope: float
    intercept: float
    slope_stderr: float
    slope_ci: tuple
    replications: int
    seed: int
    degenerate: bool
    samples: pd.DataFrame = field(repr=False)

    @property
    def passed(self):
        if self.degenerate:
            return None
        return SLOPE_BAND[0] <= self.slope <= SLOPE_BAND[1]

    def summary(self):
        return {
            "np_values": list(self.np_values),
            "mse": list(self.mse),
            "mse_stderr": list(self.mse_stderr),
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_stderr": self.slope_stderr,
            "slope_ci95": list(self.slope_ci) if self.slope_ci is not None else None,
            "replications": self.replications,
            "seed": self.seed,
            "degenerate": self.degenerate,
            "passed": self.passed,
        }


def convergence_study(scenario, np_values, replications, seed, solution=None, steps=None, threads=1):
    """
    Monte Carlo mean-squared excess demand for each population size.

    Each replication averages excess_demand_mse over the decision steps in
    steps (all steps by default). The slope of log MSE against log N_p is
    fitted by least squares.
    """
    np_values = tuple(sorted(set(int(v) for v in np_values)))
    if len(np_values) < 2:
        raise InputError("convergence study needs at least two distinct population sizes")
    if replications < 1:
        raise InputError("need at least one replication")
    lat = scenario.lattice
    steps = tuple(range(lat.N)) if steps is None else tuple(steps)
    if solution is None:
        solution = solve(scenario, phi_steps=steps)
    law = forward_joint_law(solution)

    def run(task):
        n_agents, rep = task
        agents = sample_population(scenario, n_agents, seed, rep)
        return float(np.mean([excess_demand_mse(solution, agents, n, law) for n in steps]))

    tasks = [(n_agents, rep) for n_agents in np_values for rep in range(replications)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(run, tasks))
    else:
        values = [run(task) for task in tasks]
    samples = pd.DataFrame(
        [(n_agents, rep, value) for (n_agents, rep), value in zip(tasks, values)],
        columns=["N_p", "replication", "mse"],
    )

    grouped = samples.groupby("N_p")["mse"]
    means = grouped.mean().reindex(np_values).to_numpy()
    if replications > 1:
        errors = (grouped.std(ddof=1) / np.sqrt(replications)).reindex(np_values).to_numpy()
    else:
        errors = np.zeros(len(np_values))

    degenerate = bool(np.any(means <= 0))
    slope = intercept = slope_err = None
    ci = None
    if not degenerate:
        fit = stats.linregress(np.log(np_values), np.log(means))
        slope, intercept, slope_err = float(fit.slope), float(fit.intercept), float(fit.stderr)
        dof = len(np_values) - 2
        half = float(stats.t.ppf(0.975, dof)) * slope_err if dof > 0 else 0.0
        ci = (slope - half, slope + half)
    logger.info("convergence study over N_p=%s: slope=%s", list(np_values), slope)
    return ConvergenceReport(
        np_values=np_values,
        mse=tuple(float(v) for v in means),
        mse_stderr=tuple(float(v) for v in errors),
        slope=slope,
        intercept=intercept,
        slope_stderr=slope_err,
        slope_ci=ci,
        replications=replications,
        seed=seed,
        degenerate=degenerate,
        samples=samples,
    )
