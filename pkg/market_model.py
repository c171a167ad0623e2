"""
Agents, populations and the scenario functions they face.

A scenario bundles the lattice, the common factor chain Y, one or more agent
populations and the external order flow. Populations carry their own type
grid, idiosyncratic chain Z, terminal liability F, per-period endowment g,
belief bias and utility mode. Scenarios are built from plain JSON-like
mappings by validate_scenario, which reports every problem it finds.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InputError, MissingEntryError, ScenarioValidationError, Violation
from .lattice import (
    DEFAULT_PATH_CAP,
    FiniteMarkovChainSpec,
    LatticeSpec,
    chain_violations,
    lattice_violations,
)

logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12


class UtilityMode(str, Enum):
    EXPONENTIAL_TERMINAL = "exponential_terminal"
    RECURSIVE = "recursive"


class PayoffFamily(str, Enum):
    ZERO = "zero"
    AFFINE_PRODUCT = "affine_product"
    AFFINE_PRODUCT_DT = "affine_product_dt"
    CUSTOM = "custom"


class OrderFlowFamily(str, Enum):
    ZERO = "zero"
    RAMP_SUM = "ramp_sum"
    CUSTOM = "custom"


class BiasFamily(str, Enum):
    NONE = "none"
    CONTRARIAN = "contrarian"
    MOMENTUM = "momentum"
    CUSTOM = "custom"


PATH_STATISTICS = ("last", "max", "mean")


@dataclass(frozen=True)
class AgentType:
    gamma: float
    zeta: float = 1.0
    psi: float = 1.0
    delta: float = 1.0
    xi: float = 0.0
    weight: float = 1.0


@dataclass(frozen=True)
class AgentTypeGrid:
    """Finite distribution of agent types within one population."""

    types: tuple

    @classmethod
    def uniform(cls, gamma_min, gamma_max, n_gamma, psi_min=1.0, psi_max=1.0, n_psi=0,
                a_zeta=1.0, rho=0.0, dt=1.0, xi=0.0):
        """
        Uniform product grid over gamma and psi.

        gamma(k) = gamma_min + (gamma_max - gamma_min) * k / n_gamma for
        k = 0..n_gamma, same pattern for psi; zeta = psi / a_zeta and the
        common time preference delta = exp(-rho * dt).
        """
        gammas = _grid(gamma_min, gamma_max, n_gamma)
        psis = _grid(psi_min, psi_max, n_psi)
        delta = math.exp(-rho * dt)
        weight = 1.0 / (len(gammas) * len(psis))
        types = tuple(
            AgentType(gamma=g, zeta=psi / a_zeta, psi=psi, delta=delta, xi=xi, weight=weight)
            for g in gammas
            for psi in psis
        )
        return cls(types=types)

    @classmethod
    def single(cls, gamma, zeta=1.0, psi=1.0, delta=1.0, xi=0.0):
        return cls(types=(AgentType(gamma, zeta, psi, delta, xi, 1.0),))

    def __len__(self):
        return len(self.types)

    def _column(self, name):
        return np.array([getattr(t, name) for t in self.types], dtype=float)

    @property
    def gammas(self):
        return self._column("gamma")

    @property
    def zetas(self):
        return self._column("zeta")

    @property
    def psis(self):
        return self._column("psi")

    @property
    def deltas(self):
        return self._column("delta")

    @property
    def xis(self):
        return self._column("xi")

    @property
    def weights(self):
        return self._column("weight")


def _grid(lo, hi, n):
    if n == 0:
        return [float(lo)]
    return [lo + (hi - lo) * k / n for k in range(n + 1)]


@dataclass(frozen=True)
class PayoffField:
    """
    Liability or endowment as a function of (stock, y, z).

    AFFINE_PRODUCT evaluates a + b*s*y*z and AFFINE_PRODUCT_DT evaluates
    a + b*dt*s*y*z. CUSTOM looks values up by (n, stock_idx, y_idx, z_idx).
    path_statistic picks which summary of the price path plays the role of s.
    """

    family: PayoffFamily = PayoffFamily.ZERO
    a: float = 0.0
    b: float = 0.0
    path_statistic: str = "last"
    table: dict = field(default=None, compare=False)

    def shifted(self, c):
        """The same field plus a constant."""
        if self.family is PayoffFamily.CUSTOM:
            return PayoffField(self.family, path_statistic=self.path_statistic,
                               table={k: v + c for k, v in self.table.items()})
        family = PayoffFamily.AFFINE_PRODUCT if self.family is PayoffFamily.ZERO else self.family
        return PayoffField(family, self.a + c, self.b, self.path_statistic)

    @property
    def stock_dependent(self):
        if self.family is PayoffFamily.ZERO:
            return False
        if self.family is PayoffFamily.CUSTOM:
            return True
        return self.b != 0.0


@dataclass(frozen=True)
class OrderFlowField:
    """
    Per-capita external net supply L(s, y).

    RAMP_SUM is sum_k a_k*max(s - c_k, 0) + sum_j b_j*max(c_j - s, 0) with
    calls = ((a_k, c_k), ...) and puts = ((b_j, c_j), ...).
    """

    family: OrderFlowFamily = OrderFlowFamily.ZERO
    calls: tuple = ()
    puts: tuple = ()
    table: dict = field(default=None, compare=False)


@dataclass(frozen=True)
class BiasField:
    family: BiasFamily = BiasFamily.NONE
    lo: float = 1.0
    hi: float = 1.0
    table: dict = field(default=None, compare=False)


@dataclass(frozen=True, eq=False)
class PopulationSpec:
    """
    One population of agents sharing a type grid, a Z chain and scenario functions.

    g is either a single PayoffField applied at every step 1..N or a tuple of
    N fields, one per step. joint_law optionally replaces the product of the
    initial Z law and the type weights with a table over (z0 state, type).
    """

    weight: float
    grid: AgentTypeGrid
    z_chain: FiniteMarkovChainSpec
    F: PayoffField = PayoffField()
    g: object = PayoffField()
    bias: BiasField = BiasField()
    mode: UtilityMode = UtilityMode.EXPONENTIAL_TERMINAL
    joint_law: np.ndarray = None

    def endowment(self, n):
        """Endowment field received at step n (1..N)."""
        if isinstance(self.g, PayoffField):
            return self.g
        return self.g[n - 1]

    @property
    def biased(self):
        return self.bias.family is not BiasFamily.NONE

    def cross_section(self, n):
        """Law over (z state at n, type) as an array (M_n, K)."""
        if self.joint_law is None:
            return np.outer(self.z_chain.marginals[n], self.grid.weights)
        law = self.joint_law
        for j in range(n):
            law = self.z_chain.transitions[j].T @ law
        return law / law.sum()


@dataclass(frozen=True)
class AnalysisOptions:
    report_steps: tuple = ()
    percentiles: tuple = (0.25, 0.75)
    percentile_convention: str = "node-index"
    excess_return_convention: str = "log"
    path_mode: bool = False
    path_cap: int = DEFAULT_PATH_CAP
    seed: int = 0
    tail_thresholds: tuple = None


@dataclass(frozen=True, eq=False)
class Scenario:
    lattice: LatticeSpec
    y_chain: FiniteMarkovChainSpec
    populations: tuple
    order_flow: OrderFlowField = OrderFlowField()
    analysis: AnalysisOptions = AnalysisOptions()
    config: dict = field(default=None, repr=False)

    @property
    def content_hash(self):
        return content_hash(self.config if self.config is not None else {})

    @property
    def biased(self):
        return any(p.biased for p in self.populations)

    @property
    def multi_population(self):
        return len(self.populations) > 1

    @property
    def path_dependent(self):
        return any(p.F.path_statistic != "last" for p in self.populations)


def content_hash(config):
    """SHA-256 of the canonical JSON form of a scenario document."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Field evaluation
# ---------------------------------------------------------------------------

def eval_F(field, s, y, z, dt=None, index=None):
    """
    Value of a payoff field at (s, y, z).

    Inputs broadcast like numpy arrays. CUSTOM fields need index, the
    (n, stock_idx, y_idx, z_idx) key of the table entry.
    """
    if field.family is PayoffFamily.ZERO:
        return np.zeros(np.broadcast(s, y, z).shape)[()]
    if field.family is PayoffFamily.AFFINE_PRODUCT:
        return field.a + field.b * s * y * z
    if field.family is PayoffFamily.AFFINE_PRODUCT_DT:
        if dt is None:
            raise InputError("affine_product_dt needs the period length dt")
        return field.a + field.b * dt * s * y * z
    return _lookup(field.table, index, "payoff")


def payoff_grid(field, n, s_values, y_values, z_values, dt):
    """Payoff over the product (stock, y, z) at step n as an array (S, J, M)."""
    s = np.asarray(s_values, dtype=float)[:, None, None]
    y = np.asarray(y_values, dtype=float)[None, :, None]
    z = np.asarray(z_values, dtype=float)[None, None, :]
    if field.family is not PayoffFamily.CUSTOM:
        return np.broadcast_to(eval_F(field, s, y, z, dt=dt), (s.shape[0], y.shape[1], z.shape[2])).copy()
    out = np.empty((s.shape[0], y.shape[1], z.shape[2]))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for m in range(out.shape[2]):
                out[i, j, m] = _lookup(field.table, (n, i, j, m), "payoff")
    return out


def eval_L(field, s, y=None, index=None):
    """Per-capita net supply; positive values are sell orders the agents absorb."""
    if field.family is OrderFlowFamily.ZERO:
        return np.zeros(np.shape(s))[()]
    if field.family is OrderFlowFamily.RAMP_SUM:
        s = np.asarray(s, dtype=float)
        total = np.zeros(s.shape)
        for a, c in field.calls:
            total = total + a * np.maximum(s - c, 0.0)
        for b, c in field.puts:
            total = total + b * np.maximum(c - s, 0.0)
        return total[()]
    return _lookup(field.table, index, "order flow")


def order_flow_grid(field, n, s_values, y_values):
    s = np.asarray(s_values, dtype=float)
    if field.family is not OrderFlowFamily.CUSTOM:
        return np.repeat(np.atleast_1d(eval_L(field, s))[:, None], len(y_values), axis=1)
    out = np.empty((s.size, len(y_values)))
    for i in range(s.size):
        for j in range(len(y_values)):
            out[i, j] = _lookup(field.table, (n, i, j), "order flow")
    return out


def eval_bias(field, n, s, z, spec, z0, index=None):
    """Clamped odds tilt of the agent's belief at step n."""
    if field.family is BiasFamily.NONE:
        return np.ones(np.broadcast(s, z).shape)[()]
    if field.family is BiasFamily.CUSTOM:
        return _lookup(field.table, index, "bias")
    trend = (np.asarray(s, dtype=float) / (spec.s0 * spec.beta ** n)) * (np.asarray(z, dtype=float) / z0)
    ratio = 1.0 / trend if field.family is BiasFamily.CONTRARIAN else trend
    return np.clip(ratio, field.lo, field.hi)[()]


def bias_grid(field, n, s_values, z_values, n_y, n_types, spec, z0):
    """Bias over (stock, y, z, type) at step n, broadcastable to (S, J, M, K)."""
    s = np.asarray(s_values, dtype=float)[:, None, None, None]
    z = np.asarray(z_values, dtype=float)[None, None, :, None]
    if field.family is not BiasFamily.CUSTOM:
        return np.asarray(eval_bias(field, n, s, z, spec, z0), dtype=float)
    out = np.empty((s.shape[0], n_y, z.shape[2], n_types))
    for idx in np.ndindex(*out.shape):
        out[idx] = _lookup(field.table, (n,) + idx, "bias")
    return out


def _lookup(table, index, what):
    if table is None or index is None:
        raise MissingEntryError(f"custom {what} table needs an index key")
    key = tuple(int(i) for i in index)
    try:
        return table[key]
    except KeyError:
        raise MissingEntryError(f"custom {what} table has no entry for {key}") from None


# ---------------------------------------------------------------------------
# Scenario parsing and validation
# ---------------------------------------------------------------------------

class _Collector:
    def __init__(self):
        self.violations = []

    def add(self, code, message):
        self.violations.append(Violation(code, message))

    def extend(self, found):
        self.violations.extend(found)


def load_scenario(path):
    """Read a JSON scenario file and validate it."""
    with open(path, "r", encoding="utf-8") as fh:
        config = json.load(fh)
    return validate_scenario(config)


def validate_scenario(config):
    """
    Build a Scenario from a parsed scenario document.

    Returns:
        Scenario: the validated, immutable scenario

    Raises:
        ScenarioValidationError: listing every violation found
    """
    out = _Collector()
    if not isinstance(config, dict):
        raise ScenarioValidationError([Violation("scenario.type", "scenario must be a JSON object")])

    lattice = _parse_lattice(config.get("lattice"), out)
    N = lattice.N if lattice is not None else None
    dt = lattice.dt if lattice is not None and not any(v.code.startswith("lattice.") for v in out.violations) else None

    y_chain = None
    if dt is not None:
        y_chain = _parse_chain(config.get("y_chain", {}), "y_chain", N, dt, additive=True, out=out)

    populations = []
    raw_pops = config.get("populations")
    if not isinstance(raw_pops, list) or not raw_pops:
        out.add("population.missing", "scenario needs a nonempty 'populations' list")
        raw_pops = []
    for i, raw in enumerate(raw_pops):
        pop = _parse_population(raw, i, N, dt, lattice, out)
        if pop is not None:
            populations.append(pop)
    if raw_pops and len(populations) == len(raw_pops):
        total = sum(p.weight for p in populations)
        if abs(total - 1.0) > WEIGHT_TOL:
            out.add("population.weight_sum", f"population weights sum to {total:.15g}, not 1")

    order_flow = _parse_order_flow(config.get("order_flow", {}), out)
    analysis = _parse_analysis(config.get("analysis", {}), out)

    if populations and not analysis.path_mode:
        for i, p in enumerate(populations):
            fields = [p.F] + ([p.g] if isinstance(p.g, PayoffField) else list(p.g))
            if any(f.path_statistic != "last" for f in fields):
                out.add("payoff.path_statistic",
                        f"population {i}: path-dependent payoff needs analysis.path_mode")

    if out.violations:
        logger.debug("scenario rejected with %d violation(s)", len(out.violations))
        raise ScenarioValidationError(out.violations)
    return Scenario(
        lattice=lattice,
        y_chain=y_chain,
        populations=tuple(populations),
        order_flow=order_flow,
        analysis=analysis,
        config=config,
    )


def _parse_lattice(raw, out):
    if not isinstance(raw, dict):
        out.add("lattice.missing", "scenario needs a 'lattice' object")
        return None
    try:
        N = int(raw["N"])
        T = float(raw["T"])
        r = float(raw.get("r", 0.0))
        s0 = float(raw.get("s0", 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        out.add("lattice.field", f"lattice needs numeric N, T (and r, s0): {exc}")
        return None
    if N < 1 or T <= 0:
        out.add("lattice.steps", f"need N >= 1 and T > 0, got N={N}, T={T}")
        return LatticeSpec(N=max(N, 1), T=T if T > 0 else 1.0, r=r, s0=s0, u_tilde=1.0, d_tilde=1.0)
    if "u_tilde" in raw or "d_tilde" in raw:
        spec = LatticeSpec(N=N, T=T, r=r, s0=s0,
                           u_tilde=float(raw.get("u_tilde", 0.0)), d_tilde=float(raw.get("d_tilde", 0.0)))
    elif "sigma" in raw:
        spec = LatticeSpec.from_volatility(N, T, r, s0, float(raw["sigma"]))
    else:
        out.add("lattice.field", "lattice needs 'sigma' or both 'u_tilde' and 'd_tilde'")
        return None
    out.extend(lattice_violations(spec))
    return spec


def _parse_chain(raw, name, N, dt, additive, out):
    try:
        if "transitions" in raw:
            chain = FiniteMarkovChainSpec.from_matrices(raw["states"], raw["transitions"], raw.get("initial"))
        elif additive:
            chain = FiniteMarkovChainSpec.additive_binomial(
                N, dt, float(raw.get("y0", 1.0)), float(raw.get("sigma_y", 0.0)), float(raw.get("p_y", 0.5)))
        else:
            chain = FiniteMarkovChainSpec.multiplicative_binomial(
                N, dt, float(raw.get("z0", 1.0)), float(raw.get("sigma_z", 0.0)), float(raw.get("p_z", 0.5)))
    except (KeyError, TypeError, ValueError) as exc:
        out.add(f"{name}.field", f"cannot build {name}: {exc}")
        return None
    p_key = "p_y" if additive else "p_z"
    if p_key in raw and not 0.0 <= float(raw[p_key]) <= 1.0:
        out.add(f"{name}.entries", f"{p_key} must lie in [0, 1]")
        return None
    if not additive and "transitions" not in raw and not float(raw.get("z0", 1.0)) > 0:
        out.add(f"{name}.z0", "z0 must be positive")
    found = chain_violations(chain, name, N)
    out.extend(found)
    return None if found else chain


def _parse_enum(enum_cls, value, code, out):
    try:
        return enum_cls(str(value).lower())
    except ValueError:
        out.add(code, f"unknown family {value!r}; expected one of {[e.value for e in enum_cls]}")
        return None


def _parse_key(text):
    return tuple(int(part) for part in str(text).split(","))


def _parse_payoff(raw, name, out):
    if raw is None:
        return PayoffField()
    if not isinstance(raw, dict):
        out.add("field.type", f"{name} must be an object")
        return None
    family = _parse_enum(PayoffFamily, raw.get("family", "zero"), "field.family", out)
    if family is None:
        return None
    params = raw.get("params", raw)
    statistic = str(params.get("path_statistic", raw.get("path_statistic", "last")))
    if statistic not in PATH_STATISTICS:
        out.add("field.path_statistic", f"{name}: path_statistic must be one of {PATH_STATISTICS}")
        return None
    if family is PayoffFamily.CUSTOM:
        table = {_parse_key(k): float(v) for k, v in params.get("table", {}).items()}
        if not all(math.isfinite(v) for v in table.values()):
            out.add("field.finite", f"{name}: custom table has non-finite values")
        return PayoffField(family, path_statistic=statistic, table=table)
    a = float(params.get("a", 0.0))
    b = float(params.get("b", 0.0))
    if not (math.isfinite(a) and math.isfinite(b)):
        out.add("field.finite", f"{name}: parameters must be finite")
    return PayoffField(family, a, b, statistic)


def _parse_order_flow(raw, out):
    if not raw:
        return OrderFlowField()
    family = _parse_enum(OrderFlowFamily, raw.get("family", "zero"), "field.family", out)
    if family is None:
        return OrderFlowField()
    params = raw.get("params", raw)
    if family is OrderFlowFamily.CUSTOM:
        return OrderFlowField(family, table={_parse_key(k): float(v) for k, v in params.get("table", {}).items()})
    calls = tuple((float(a), float(c)) for a, c in params.get("calls", ()))
    puts = tuple((float(b), float(c)) for b, c in params.get("puts", ()))
    if not all(math.isfinite(x) for pair in calls + puts for x in pair):
        out.add("field.finite", "order_flow: ramp parameters must be finite")
    return OrderFlowField(family, calls, puts)


def _parse_bias(raw, name, out):
    if not raw:
        return BiasField()
    family = _parse_enum(BiasFamily, raw.get("family", "none"), "field.family", out)
    if family is None or family is BiasFamily.NONE:
        return BiasField()
    lo = float(raw.get("lo", 0.8))
    hi = float(raw.get("hi", 1.2))
    if not lo > 0:
        out.add("bias.positivity", f"{name}: lower clamp must be positive, got {lo}")
    if not math.isfinite(hi):
        out.add("bias.finite", f"{name}: upper clamp must be finite")
    if lo > hi:
        out.add("bias.order", f"{name}: need lo <= hi, got lo={lo}, hi={hi}")
    table = None
    if family is BiasFamily.CUSTOM:
        table = {_parse_key(k): float(v) for k, v in raw.get("table", {}).items()}
        if any(not lo <= v <= hi for v in table.values()):
            out.add("bias.bounds", f"{name}: custom bias values must lie in [lo, hi]")
    return BiasField(family, lo, hi, table)


def _parse_grid(raw, name, dt, out):
    if "types" in raw:
        types = tuple(
            AgentType(
                gamma=float(t["gamma"]),
                zeta=float(t.get("zeta", 1.0)),
                psi=float(t.get("psi", 1.0)),
                delta=float(t.get("delta", 1.0)),
                xi=float(t.get("xi", 0.0)),
                weight=float(t.get("weight", 1.0 / len(raw["types"]))),
            )
            for t in raw["types"]
        )
        grid = AgentTypeGrid(types)
    else:
        gamma_min = float(raw["gamma_min"])
        a_zeta = float(raw.get("a_zeta", 1.0))
        if not a_zeta > 0:
            out.add("agent.positive", f"{name}: a_zeta must be positive")
            return None
        grid = AgentTypeGrid.uniform(
            gamma_min,
            float(raw.get("gamma_max", gamma_min)),
            int(raw.get("n_gamma", 0)),
            float(raw.get("psi_min", 1.0)),
            float(raw.get("psi_max", raw.get("psi_min", 1.0))),
            int(raw.get("n_psi", 0)),
            a_zeta,
            float(raw.get("rho", 0.0)),
            dt,
            float(raw.get("xi", 0.0)),
        )
    if not grid.types:
        out.add("agent.empty", f"{name}: type grid is empty")
        return None
    for column in ("gammas", "zetas", "psis", "deltas"):
        if np.any(getattr(grid, column) <= 0):
            out.add("agent.positive", f"{name}: all {column} must be positive")
    total = grid.weights.sum()
    if np.any(grid.weights < 0) or abs(total - 1.0) > WEIGHT_TOL:
        out.add("agent.weight_sum", f"{name}: type weights sum to {total:.15g}, not 1")
    return grid


def _parse_population(raw, i, N, dt, lattice, out):
    name = f"populations[{i}]"
    if not isinstance(raw, dict):
        out.add("population.type", f"{name} must be an object")
        return None
    ok = True
    weight = float(raw.get("weight", 1.0))
    if not 0 < weight <= 1:
        out.add("population.weight", f"{name}: weight must lie in (0, 1], got {weight}")
        ok = False
    mode = _parse_enum(UtilityMode, raw.get("mode", "exponential_terminal"), "population.mode", out)
    grid = None
    if dt is not None:
        try:
            grid = _parse_grid(raw.get("agent_grid", {}), name, dt, out)
        except (KeyError, TypeError, ValueError) as exc:
            out.add("agent.field", f"{name}: cannot build agent grid: {exc}")
    z_chain = None
    if dt is not None:
        z_chain = _parse_chain(raw.get("z_chain", {}), f"{name}.z_chain", N, dt, additive=False, out=out)
    F = _parse_payoff(raw.get("F"), f"{name}.F", out)
    raw_g = raw.get("g")
    if isinstance(raw_g, list):
        g = tuple(_parse_payoff(item, f"{name}.g[{j}]", out) for j, item in enumerate(raw_g))
        if N is not None and len(g) != N:
            out.add("field.steps", f"{name}: per-step g needs {N} entries, got {len(g)}")
            ok = False
        if any(item is None for item in g):
            ok = False
    else:
        g = _parse_payoff(raw_g, f"{name}.g", out)
    bias = _parse_bias(raw.get("bias"), f"{name}.bias", out)

    joint = raw.get("joint_law")
    if joint is not None:
        joint = np.asarray(joint, dtype=float)
        if grid is not None and z_chain is not None:
            if joint.shape != (z_chain.size(0), len(grid)):
                out.add("population.joint_law",
                        f"{name}: joint_law must have shape ({z_chain.size(0)}, {len(grid)})")
                ok = False
            elif np.any(joint < 0) or abs(joint.sum() - 1.0) > WEIGHT_TOL:
                out.add("population.joint_law", f"{name}: joint_law must be a probability table")
                ok = False

    if not ok or None in (mode, grid, z_chain, F, g) or lattice is None:
        return None
    return PopulationSpec(weight=weight, grid=grid, z_chain=z_chain, F=F, g=g, bias=bias,
                          mode=mode, joint_law=joint)


def _parse_analysis(raw, out):
    convention = str(raw.get("percentile_convention", "node-index")).lower().replace("_", "-")
    if convention not in ("node-index", "probability"):
        out.add("analysis.percentile_convention", f"unknown percentile convention {convention!r}")
        convention = "node-index"
    excess = str(raw.get("excess_return_convention", "log")).lower()
    if excess not in ("log", "simple"):
        out.add("analysis.excess_return_convention", f"unknown excess-return convention {excess!r}")
        excess = "log"
    percentiles = tuple(float(q) for q in raw.get("percentiles", (0.25, 0.75)))
    if any(not 0 < q < 1 for q in percentiles):
        out.add("analysis.percentiles", "percentiles must lie in (0, 1)")
    tails = raw.get("tail_thresholds")
    if tails is not None:
        tails = (float(tails[0]), float(tails[1]))
    return AnalysisOptions(
        report_steps=tuple(int(n) for n in raw.get("report_steps", ())),
        percentiles=percentiles,
        percentile_convention=convention,
        excess_return_convention=excess,
        path_mode=bool(raw.get("path_mode", False)),
        path_cap=int(raw.get("path_cap", DEFAULT_PATH_CAP)),
        seed=int(raw.get("seed", 0)),
        tail_thresholds=tails,
    )


def allocate_counts(weights, total):
    """Split total into integer counts proportional to weights (largest remainder)."""
    weights = np.asarray(weights, dtype=float)
    exact = weights / weights.sum() * total
    counts = np.floor(exact).astype(int)
    short = int(total - counts.sum())
    if short > 0:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def sample_agents(population, count, rng):
    """Draw (initial z index, type index) pairs for count agents of one population."""
    if population.joint_law is not None:
        flat = population.joint_law.ravel()
        cells = rng.choice(flat.size, size=count, p=flat / flat.sum())
        return np.unravel_index(cells, population.joint_law.shape)
    z0 = population.z_chain.initial
    weights = population.grid.weights
    z_idx = rng.choice(len(z0), size=count, p=z0)
    t_idx = rng.choice(len(weights), size=count, p=weights / weights.sum())
    return z_idx, t_idx
