"""
Backward induction for the mean-field market-clearing equilibrium.

One solver core serves the terminal-liability model, the recursive-utility
model, several populations at once and biased beliefs. Each population's
continuation value is carried in log-consistent form:

    EXPONENTIAL_TERMINAL   stored log V_n, with log V_N = gamma * F
    RECURSIVE              stored V_n (wealth units), with V_N = F

and both enter the branch expectation through

    W_n = Lambda_n - gamma * D_n * g_n

where Lambda_n is log V_n (exponential) or gamma * V_n (recursive) and the
discount weight D_n is beta^(N-n) or eta_n. Market clearing is closed form,
so no root finding is involved.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import (
    BracketError,
    CapacityError,
    DiagnosticsNotRetainedError,
    InputError,
    InternalConsistencyError,
    NumericalOverflowError,
    ScenarioInfeasibleError,
)
from .lattice import node_prices, path_price_history, path_up_counts
from .market_model import UtilityMode, bias_grid, order_flow_grid, payoff_grid

logger = logging.getLogger(__name__)

CLEARING_TOL = 1e-10
MAX_EXPONENT = 700.0
ORACLE_BOUNDS = (-50.0, 50.0)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EtaSchedule:
    """eta_0..eta_N along the last axis; leading axes index agent types."""

    values: np.ndarray

    def __getitem__(self, n):
        return self.values[..., n]

    @property
    def ratio(self):
        """eta_{n-1} / eta_n for n = 1..N."""
        return self.values[..., :-1] / self.values[..., 1:]


def eta_schedule(agent, spec):
    """
    Marginal utility weights of wealth for an AgentType or a whole AgentTypeGrid.

    eta_N = 1 and eta_{n-1} = psi*eta_n*beta / (zeta + dt*psi*eta_n*beta).
    """
    if hasattr(agent, "types"):
        psi, zeta = agent.psis, agent.zetas
    else:
        psi, zeta = np.float64(agent.psi), np.float64(agent.zeta)
    beta, dt = spec.beta, spec.dt
    values = np.empty(np.shape(psi) + (spec.N + 1,))
    values[..., spec.N] = 1.0
    for n in range(spec.N, 0, -1):
        x = psi * values[..., n] * beta
        values[..., n - 1] = x / (zeta + dt * x)
    return EtaSchedule(values)


@dataclass(frozen=True, eq=False)
class ValueSlice:
    """
    Continuation values at step n over (stock index, y, z, type).

    For EXPONENTIAL_TERMINAL the entries are log V; for RECURSIVE they are V
    in wealth units.
    """

    n: int
    values: np.ndarray
    mode: UtilityMode

    def log_weight(self, gamma):
        """Lambda_n: log V, or gamma * V in recursive mode."""
        if self.mode is UtilityMode.RECURSIVE:
            return gamma * self.values
        return self.values


@dataclass(frozen=True, eq=False)
class EquilibriumSolution:
    """
    Result of a backward solve.

    Tables are tuples indexed by the decision step n = 0..N-1. p[n] has shape
    (stock states at n, y states at n). phi[pop][n] has shape
    (stock, y, z, type) and is None for steps that were not retained.
    phi_mean and phi_sq are the population-weighted cross-sectional first and
    second moments of phi over (z, type) per (stock, y).
    """

    scenario: object
    layout: str
    p: tuple
    phi: tuple
    phi_mean: tuple
    phi_sq: tuple
    supply: tuple
    eta: tuple
    log_f: tuple = None
    log_v_tilde: tuple = None
    max_residual: float = 0.0

    @property
    def lattice(self):
        return self.scenario.lattice

    @property
    def scenario_hash(self):
        return self.scenario.content_hash

    @property
    def path_dependent(self):
        return self.layout == "path"

    @property
    def biased(self):
        return self.scenario.biased

    @property
    def multi_population(self):
        return self.scenario.multi_population

    @property
    def diagnostics_retained(self):
        return self.log_f is not None

    def phi_table(self, n, population=0):
        table = self.phi[population][n]
        if table is None:
            raise DiagnosticsNotRetainedError(f"phi at step {n} was not retained by the solve")
        return table


# ---------------------------------------------------------------------------
# One-step building blocks
# ---------------------------------------------------------------------------

def branch_expectation(values, y_matrix, z_matrix, n=None):
    """
    log E[exp(W)] over the Y and Z transitions, for every stock state.

    Args:
        values: W at step n, shape (S_n, J_n, M_n, K)
        y_matrix: Y transition from step n-1 to n, shape (J_{n-1}, J_n)
        z_matrix: Z transition from step n-1 to n, shape (M_{n-1}, M_n)

    Returns:
        np.ndarray: log A, shape (S_n, J_{n-1}, M_{n-1}, K); the stock axis is
        still the child state at n, see split_branches.
    """
    if not np.all(np.isfinite(values)):
        raise NumericalOverflowError("non-finite continuation value", n=n)
    shift_z = values.max(axis=2, keepdims=True)
    over_z = np.matmul(z_matrix, np.exp(values - shift_z))
    with np.errstate(divide="ignore"):
        over_z = np.log(over_z) + shift_z
    shift_y = over_z.max(axis=1, keepdims=True)
    s, j, m, k = over_z.shape
    scaled = np.exp(over_z - shift_y).reshape(s, j, m * k)
    over_y = np.matmul(y_matrix, scaled).reshape(s, y_matrix.shape[0], m, k)
    with np.errstate(divide="ignore"):
        log_a = np.log(over_y) + shift_y
    if not np.all(np.isfinite(log_a)):
        bad = np.argwhere(~np.isfinite(log_a))[0]
        raise NumericalOverflowError("branch expectation underflowed", n=n,
                                     stock_idx=int(bad[0]), y_idx=int(bad[1]))
    return log_a


def split_branches(table, layout="node"):
    """(up, down) views of a per-child table onto the parent stock states."""
    if layout == "node":
        return table[1:], table[:-1]
    return table[1::2], table[0::2]


def f_ratio(log_a_up, log_a_down):
    """log f = log A_up - log A_down."""
    return np.subtract(log_a_up, log_a_down)


def apply_bias(log_f, varpi):
    """log f^pi = log varpi + log f."""
    varpi = np.asarray(varpi, dtype=float)
    if np.any(varpi <= 0):
        raise InputError("bias factor must be positive")
    return (np.log(varpi) + log_f)[()]


def equilibrium_exponent(mean_log_f, mean_inv, weights, supply, lattice, kappa=1.0):
    """
    Clearing exponent G.

    G = [sum_p w_p E_p(log f^pi / (gamma D)) - (u - d) kappa L] / sum_p w_p E_p(1 / (gamma D))

    The solver passes aggregates already weighted by 1/D, with kappa = 1. For
    aggregates computed without a common discount D = beta^(N-n) pass
    kappa = beta^(N-n); both give the same G.
    """
    num = sum(w * np.asarray(f) for w, f in zip(weights, mean_log_f))
    den = sum(w * np.asarray(v) for w, v in zip(weights, mean_inv))
    if np.any(np.asarray(den) <= 0):
        raise InternalConsistencyError("cross-sectional risk tolerance is not positive")
    return (num - (lattice.u - lattice.d) * kappa * np.asarray(supply)) / den


def equilibrium_prob(mean_log_f, mean_inv, weights, supply, lattice, kappa=1.0):
    """Equilibrium up-probability p = -d / (u exp(G) - d)."""
    G = equilibrium_exponent(mean_log_f, mean_inv, weights, supply, lattice, kappa)
    _check_exponent(G)
    u, d = lattice.u, lattice.d
    return (-d / (u * np.exp(G) - d))[()]


def _check_exponent(G, n=None):
    G = np.asarray(G)
    if np.any(~np.isfinite(G)) or np.any(np.abs(G) > MAX_EXPONENT):
        bad = np.unravel_index(int(np.argmax(np.where(np.isfinite(G), np.abs(G), np.inf))), G.shape) if G.ndim else ()
        stock_idx = int(bad[0]) if len(bad) > 0 else None
        y_idx = int(bad[1]) if len(bad) > 1 else None
        raise ScenarioInfeasibleError(
            f"clearing exponent |G| exceeds {MAX_EXPONENT:g}; the required premium is not representable",
            n=n, stock_idx=stock_idx, y_idx=y_idx,
        )


def _log_probs(G, lattice):
    """log p and log(1 - p) computed from G without forming p."""
    log_u = math.log(lattice.u)
    log_md = math.log(-lattice.d)
    norm = np.logaddexp(log_u + G, log_md)
    return log_md - norm, log_u + G - norm


def optimal_position(p, log_f_pi, gamma, discount, lattice):
    """phi* = [log(-p u / ((1 - p) d)) + log f^pi] / (gamma D (u - d))."""
    u, d = lattice.u, lattice.d
    p = np.asarray(p, dtype=float)
    log_odds = np.log(p) - np.log1p(-p) + math.log(u) - math.log(-d)
    return ((log_odds + log_f_pi) / (gamma * discount * (u - d)))[()]


def subjective_prob(p, varpi):
    """Agent-measure up-probability varpi p / (varpi p + 1 - p)."""
    return varpi * p / (varpi * p + 1.0 - p)


def log_tilde_value(log_p, log_q, phi, log_a_up, log_a_down, gamma, discount, lattice):
    """log[p exp(-gamma D phi u + log A_up) + (1 - p) exp(-gamma D phi d + log A_down)]."""
    scale = gamma * discount * phi
    return np.logaddexp(log_p - scale * lattice.u + log_a_up,
                        log_q - scale * lattice.d + log_a_down)


def recursive_value(log_v_tilde, gamma, zeta, psi, delta, eta_n, lattice):
    """V_{n-1} from log V~_{n-1} for the recursive model."""
    x = psi * eta_n * lattice.beta
    denom = zeta + lattice.dt * x
    eta_prev = x / denom
    return (eta_prev / (eta_n * gamma * lattice.beta) * log_v_tilde
            + np.log(delta * x / zeta) / denom
            - np.log(eta_prev) / zeta)


def value_update(mode, p, phi, log_a_up, log_a_down, gamma, discount, lattice,
                 zeta=1.0, psi=1.0, delta=1.0, varpi=1.0):
    """
    Continuation value at the parent node.

    EXPONENTIAL_TERMINAL returns log V_{n-1}; RECURSIVE returns V_{n-1}, with
    discount = eta_n. A bias varpi evaluates the expectation under the agent's
    subjective up-probability.
    """
    p_agent = subjective_prob(np.asarray(p, dtype=float), np.asarray(varpi, dtype=float))
    log_v = log_tilde_value(np.log(p_agent), np.log1p(-p_agent), phi, log_a_up, log_a_down,
                            gamma, discount, lattice)
    if not np.all(np.isfinite(log_v)):
        raise NumericalOverflowError("value update overflowed")
    if UtilityMode(mode) is UtilityMode.EXPONENTIAL_TERMINAL:
        return log_v[()]
    return recursive_value(log_v, gamma, zeta, psi, delta, discount, lattice)[()]


def consumption_rate(x, log_v_tilde, gamma, zeta, psi, delta, eta_n, lattice):
    """
    Optimal spending rate c*_{n-1}.

    c* = eta_{n-1} x - [log(delta psi eta_n beta / zeta) + (psi / gamma) log V~_{n-1}] / (zeta + dt psi eta_n beta)
    """
    q = psi * eta_n * lattice.beta
    denom = zeta + lattice.dt * q
    return q / denom * x - (np.log(delta * q / zeta) + psi / gamma * log_v_tilde) / denom


def consumption_policy(x, n, stock_idx, y_idx, z_idx, type_idx, solution, population=0):
    """Spending rate at decision step n for an agent with wealth x."""
    pop = solution.scenario.populations[population]
    if pop.mode is not UtilityMode.RECURSIVE:
        raise InputError("consumption is only defined for recursive-utility populations")
    if solution.log_v_tilde is None or solution.log_v_tilde[population] is None:
        raise DiagnosticsNotRetainedError("solve with keep_diagnostics=True to evaluate consumption")
    agent = pop.grid.types[type_idx]
    eta_next = solution.eta[population][type_idx, n + 1]
    log_vt = solution.log_v_tilde[population][n][stock_idx, y_idx, z_idx, type_idx]
    return consumption_rate(x, log_vt, agent.gamma, agent.zeta, agent.psi, agent.delta,
                            eta_next, solution.lattice)


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NodeProblem:
    """Explicit one-step data for a single agent at a single node."""

    p: float
    log_a_up: float
    log_a_down: float
    gamma: float
    discount: float
    varpi: float = 1.0
    x: float = None
    zeta: float = 1.0
    psi: float = 1.0
    delta: float = 1.0


@dataclass(frozen=True)
class OracleResult:
    phi: float
    log_v_tilde: float
    c: float = None


def _bounded_argmin(objective, bounds, what):
    lo, hi = bounds
    coarse = minimize_scalar(objective, bounds=bounds, method="bounded",
                             options={"xatol": 1e-9, "maxiter": 5000})
    if coarse.x - lo < 1e-7 * (hi - lo) or hi - coarse.x < 1e-7 * (hi - lo):
        raise BracketError(f"{what} optimum {coarse.x:.6g} sits on the search edge [{lo}, {hi}]")
    # Brent's stopping rule is relative to |x|; refine around the coarse point.
    centre = float(coarse.x)
    fine = minimize_scalar(lambda t: objective(centre + t), bounds=(-1e-3, 1e-3), method="bounded",
                           options={"xatol": 1e-12, "maxiter": 5000})
    return centre + float(fine.x), fine.fun


def brute_force_node_oracle(problem, lattice, bounds=ORACLE_BOUNDS, c_bounds=ORACLE_BOUNDS):
    """
    Minimize the one-step objective numerically.

    The position minimizes V~(phi) = E_agent[exp(-gamma D phi R + W)]; in the
    recursive model the spending rate then minimizes
    exp(-zeta c) dt + delta exp(-psi eta_n beta (x - c dt)) V~^(psi/gamma).
    The objective is evaluated in extended precision.
    """
    ld = np.longdouble
    p_agent = subjective_prob(problem.p, problem.varpi)
    log_p, log_q = np.log(ld(p_agent)), np.log1p(-ld(p_agent))
    scale = ld(problem.gamma) * ld(problem.discount)
    u, d = ld(lattice.u), ld(lattice.d)
    up, down = ld(problem.log_a_up), ld(problem.log_a_down)

    def position_objective(phi):
        return np.logaddexp(log_p - scale * ld(phi) * u + up, log_q - scale * ld(phi) * d + down)

    phi, log_vt = _bounded_argmin(position_objective, bounds, "position")
    if problem.x is None:
        return OracleResult(phi=phi, log_v_tilde=float(log_vt))

    q = ld(problem.psi) * ld(problem.discount) * ld(lattice.beta)
    dt = ld(lattice.dt)
    cont = np.log(ld(problem.delta)) + ld(problem.psi) / ld(problem.gamma) * log_vt

    def spending_objective(c):
        c = ld(c)
        return np.logaddexp(-ld(problem.zeta) * c + np.log(dt), cont - q * (ld(problem.x) - c * dt))

    c, _ = _bounded_argmin(spending_objective, c_bounds, "spending")
    return OracleResult(phi=phi, log_v_tilde=float(log_vt), c=c)


# ---------------------------------------------------------------------------
# Backward sweep
# ---------------------------------------------------------------------------

class _StockAxis:
    """Stock states per step in node or path layout."""

    def __init__(self, lattice, layout):
        self.lattice = lattice
        self.layout = layout
        self._history = {}

    def size(self, n):
        return n + 1 if self.layout == "node" else 2 ** n

    def current(self, n):
        if self.layout == "node":
            return node_prices(self.lattice, n)
        return self.history(n)[:, -1]

    def history(self, n):
        if n not in self._history:
            self._history[n] = path_price_history(self.lattice, n)
        return self._history[n]

    def statistic(self, name, n):
        if name == "last":
            return self.current(n)
        if self.layout == "node":
            raise InputError(f"path statistic {name!r} needs the path-indexed solver")
        hist = self.history(n)
        return hist.max(axis=1) if name == "max" else hist.mean(axis=1)


def backward_solve(scenario, phi_steps=None, keep_diagnostics=False):
    """
    Node-indexed equilibrium for a scenario whose payoffs depend on the current price.

    Args:
        scenario: validated Scenario
        phi_steps: decision steps whose full phi tables are kept; None keeps all
        keep_diagnostics: keep log f and log V~ tables (needed for consumption)
    """
    if scenario.path_dependent:
        raise InputError("scenario has path-dependent payoffs; use path_dependent_solve")
    return _solve(scenario, "node", phi_steps, keep_diagnostics)


def path_dependent_solve(scenario, phi_steps=None, keep_diagnostics=False, path_cap=None):
    """Path-indexed equilibrium; stock index n is the n-bit path integer."""
    cap = scenario.analysis.path_cap if path_cap is None else path_cap
    if scenario.lattice.N > cap:
        raise CapacityError(scenario.lattice.N, cap)
    return _solve(scenario, "path", phi_steps, keep_diagnostics)


def solve(scenario, **kwargs):
    """Dispatch on analysis.path_mode."""
    if scenario.analysis.path_mode:
        return path_dependent_solve(scenario, **kwargs)
    return backward_solve(scenario, **kwargs)


def _solve(scenario, layout, phi_steps, keep_diagnostics):
    lat = scenario.lattice
    N, dt, beta = lat.N, lat.dt, lat.beta
    y_chain = scenario.y_chain
    pops = scenario.populations
    weights = [pop.weight for pop in pops]
    axis = _StockAxis(lat, layout)
    keep = None if phi_steps is None else set(int(n) for n in phi_steps)

    gammas = [pop.grid.gammas for pop in pops]
    etas = [eta_schedule(pop.grid, lat).values for pop in pops]
    slices = []
    for pop, gamma in zip(pops, gammas):
        F = payoff_grid(pop.F, N, axis.statistic(pop.F.path_statistic, N), y_chain.states[N],
                        pop.z_chain.states[N], dt)
        if pop.mode is UtilityMode.RECURSIVE:
            values = np.repeat(F[..., None], len(gamma), axis=3)
        else:
            values = gamma * F[..., None]
        slices.append(ValueSlice(N, values, pop.mode))

    p_tab = [None] * N
    phi_tab = [[None] * N for _ in pops]
    mean_tab = [None] * N
    sq_tab = [None] * N
    supply_tab = [None] * N
    log_f_tab = [[None] * N for _ in pops] if keep_diagnostics else None
    log_vt_tab = [[None] * N for _ in pops] if keep_diagnostics else None
    worst = 0.0

    for n in range(N, 0, -1):
        m = n - 1
        prices = axis.current(m)
        supply = order_flow_grid(scenario.order_flow, m, prices, y_chain.states[m])

        staged = []
        agg_f, agg_inv = [], []
        for i, (pop, gamma) in enumerate(zip(pops, gammas)):
            if pop.mode is UtilityMode.RECURSIVE:
                discount = etas[i][:, n]
            else:
                discount = np.full(len(gamma), beta ** (N - n))
            g_field = pop.endowment(n)
            g = payoff_grid(g_field, n, axis.statistic(g_field.path_statistic, n), y_chain.states[n],
                            pop.z_chain.states[n], dt)
            W = slices[i].log_weight(gamma) - gamma * discount * g[..., None]
            log_a = branch_expectation(W, y_chain.transitions[m], pop.z_chain.transitions[m], n=n)
            log_a_up, log_a_down = split_branches(log_a, layout)
            log_f = f_ratio(log_a_up, log_a_down)
            varpi = bias_grid(pop.bias, m, prices, pop.z_chain.states[m], len(y_chain.states[m]),
                              len(gamma), lat, pop.z_chain.initial_state)
            log_f_pi = apply_bias(log_f, varpi) if pop.biased else log_f

            law = pop.cross_section(m)
            tolerance = law / (gamma * discount)
            s_m, j_m = log_f_pi.shape[:2]
            agg_f.append(np.sum((log_f_pi * tolerance).reshape(s_m, j_m, -1), axis=-1))
            agg_inv.append(tolerance.sum())
            staged.append((discount, log_a_up, log_a_down, log_f, log_f_pi, varpi, law))

        G = equilibrium_exponent(agg_f, agg_inv, weights, supply, lat)
        _check_exponent(G, n=m)
        log_p, log_q = _log_probs(G, lat)
        p_tab[m] = np.exp(log_p)
        supply_tab[m] = supply

        first = np.zeros_like(supply)
        second = np.zeros_like(supply)
        for i, (pop, gamma) in enumerate(zip(pops, gammas)):
            discount, log_a_up, log_a_down, log_f, log_f_pi, varpi, law = staged[i]
            phi = (log_f_pi - G[..., None, None]) / (gamma * discount * (lat.u - lat.d))
            s_m, j_m = phi.shape[:2]
            first += weights[i] * np.sum((phi * law).reshape(s_m, j_m, -1), axis=-1)
            second += weights[i] * np.sum((phi * phi * law).reshape(s_m, j_m, -1), axis=-1)

            lp, lq = log_p[..., None, None], log_q[..., None, None]
            if pop.biased:
                log_varpi = np.log(varpi)
                norm = np.logaddexp(log_varpi + lp, lq)
                lp, lq = log_varpi + lp - norm, lq - norm
            log_vt = log_tilde_value(lp, lq, phi, log_a_up, log_a_down, gamma, discount, lat)
            if not np.all(np.isfinite(log_vt)):
                bad = np.argwhere(~np.isfinite(log_vt))[0]
                raise NumericalOverflowError("value update overflowed", n=m,
                                             stock_idx=int(bad[0]), y_idx=int(bad[1]))
            if pop.mode is UtilityMode.RECURSIVE:
                grid = pop.grid
                values = recursive_value(log_vt, gamma, grid.zetas, grid.psis, grid.deltas, discount, lat)
            else:
                values = log_vt
            slices[i] = ValueSlice(m, values, pop.mode)

            if keep is None or m in keep:
                phi_tab[i][m] = phi
            if keep_diagnostics:
                log_f_tab[i][m] = log_f
                log_vt_tab[i][m] = log_vt if pop.mode is UtilityMode.RECURSIVE else None

        residual = np.abs(first - supply)
        step_worst = float(residual.max())
        if step_worst > CLEARING_TOL:
            k, j = np.unravel_index(int(np.argmax(residual)), residual.shape)
            raise InternalConsistencyError(f"market clearing residual {step_worst:.3e}",
                                           n=m, stock_idx=int(k), y_idx=int(j))
        worst = max(worst, step_worst)
        mean_tab[m] = first
        sq_tab[m] = second
        logger.debug("step %d: %d stock states, clearing residual %.3e", m, prices.size, step_worst)

    logger.info("solved %s equilibrium over %d steps for %d population(s), max residual %.3e",
                layout, N, len(pops), worst)
    return EquilibriumSolution(
        scenario=scenario,
        layout=layout,
        p=tuple(p_tab),
        phi=tuple(tuple(t) for t in phi_tab),
        phi_mean=tuple(mean_tab),
        phi_sq=tuple(sq_tab),
        supply=tuple(supply_tab),
        eta=tuple(etas),
        log_f=tuple(tuple(t) for t in log_f_tab) if keep_diagnostics else None,
        log_v_tilde=tuple(tuple(t) for t in log_vt_tab) if keep_diagnostics else None,
        max_residual=worst,
    )


def path_table_to_nodes(table, n):
    """Average a per-path table at step n onto nodes by up-count."""
    counts = path_up_counts(n)
    flat = table.reshape(table.shape[0], -1)
    out = np.zeros((n + 1, flat.shape[1]))
    np.add.at(out, counts, flat)
    out /= np.bincount(counts, minlength=n + 1)[:, None]
    return out.reshape((n + 1,) + table.shape[1:])
