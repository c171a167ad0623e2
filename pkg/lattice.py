"""
Recombining binomial lattice, factor chains and path indexing.

The stock moves from S to S*u_tilde or S*d_tilde each period. Excess returns
over the risk-free growth factor beta = exp(r*dt) are u = u_tilde - beta and
d = d_tilde - beta. Nodes are indexed by (n, k) where k is the number of up
moves; paths are integers whose n bits record the moves, first move in the
most significant bit, 0 for down and 1 for up.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import CapacityError, InternalConsistencyError, InvalidLatticeError, Violation

logger = logging.getLogger(__name__)

DEFAULT_PATH_CAP = 16
STOCHASTIC_TOL = 1e-14
DRIFT_GUARD = 1e-8


@dataclass(frozen=True)
class LatticeSpec:
    """
    Stock tree geometry and risk-free discounting.

    Args:
        N (int): number of steps
        T (float): horizon in years
        r (float): risk-free rate per annum
        s0 (float): initial stock price
        u_tilde (float): gross up return
        d_tilde (float): gross down return
    """

    N: int
    T: float
    r: float
    s0: float
    u_tilde: float
    d_tilde: float

    @classmethod
    def from_volatility(cls, N, T, r, s0, sigma):
        """Build the symmetric tree u_tilde = 1/d_tilde = exp(sigma*sqrt(dt))."""
        u_tilde = math.exp(sigma * math.sqrt(T / N))
        return cls(N=N, T=T, r=r, s0=s0, u_tilde=u_tilde, d_tilde=1.0 / u_tilde)

    @property
    def dt(self):
        return self.T / self.N if self.N else 0.0

    @property
    def beta(self):
        return math.exp(self.r * self.dt)

    @property
    def u(self):
        return self.u_tilde - self.beta

    @property
    def d(self):
        return self.d_tilde - self.beta

    @property
    def p_q(self):
        return risk_neutral_prob(self)

    def times(self):
        """Calendar time of every step 0..N."""
        return np.arange(self.N + 1) * self.dt


def lattice_violations(spec):
    """Return the list of Violation for a LatticeSpec (empty when valid)."""
    found = []
    if not isinstance(spec.N, (int, np.integer)) or spec.N < 1:
        found.append(Violation("lattice.steps", f"N must be an integer >= 1, got {spec.N!r}"))
        return found
    if not spec.T > 0:
        found.append(Violation("lattice.horizon", f"T must be positive, got {spec.T}"))
        return found
    if not spec.s0 > 0:
        found.append(Violation("lattice.s0", f"s0 must be positive, got {spec.s0}"))
    beta = spec.beta
    if not 0 < spec.d_tilde < beta < spec.u_tilde:
        found.append(Violation(
            "lattice.ordering",
            f"need 0 < d_tilde < beta < u_tilde, got d_tilde={spec.d_tilde}, "
            f"beta={beta:.12g}, u_tilde={spec.u_tilde}",
        ))
    return found


def risk_neutral_prob(spec):
    """
    Risk-neutral up probability (beta - d_tilde) / (u_tilde - d_tilde).

    Raises:
        InvalidLatticeError: if the ordering 0 < d_tilde < beta < u_tilde fails
    """
    beta = spec.beta
    if not 0 < spec.d_tilde < beta < spec.u_tilde:
        raise InvalidLatticeError(
            f"need 0 < d_tilde < beta < u_tilde, got d_tilde={spec.d_tilde}, "
            f"beta={beta:.12g}, u_tilde={spec.u_tilde}"
        )
    u = spec.u_tilde - beta
    d = spec.d_tilde - beta
    return -d / (u - d)


def node_price(spec, n, k):
    """Price s0 * u_tilde^k * d_tilde^(n-k) at node (n, k)."""
    if not 0 <= k <= n <= spec.N:
        raise IndexError(f"node (n={n}, k={k}) outside 0 <= k <= n <= {spec.N}")
    return spec.s0 * spec.u_tilde ** k * spec.d_tilde ** (n - k)


def node_prices(spec, n):
    """All n+1 node prices at step n, ordered by up-count."""
    if not 0 <= n <= spec.N:
        raise IndexError(f"step {n} outside 0..{spec.N}")
    k = np.arange(n + 1)
    return spec.s0 * spec.u_tilde ** k * spec.d_tilde ** (n - k)


@dataclass(frozen=True, eq=False)
class FiniteMarkovChainSpec:
    """
    Per-step finite Markov chain.

    states[n] holds the state values at step n, transitions[n] is the
    row-stochastic matrix from step n to n+1 and initial is the law over
    states[0].
    """

    states: tuple
    transitions: tuple
    initial: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.initial is None:
            law = np.zeros(len(self.states[0]))
            law[0] = 1.0
            object.__setattr__(self, "initial", law)

    @classmethod
    def from_matrices(cls, states, transitions, initial=None):
        states = tuple(np.asarray(s, dtype=float).ravel() for s in states)
        transitions = tuple(np.asarray(t, dtype=float) for t in transitions)
        if initial is not None:
            initial = np.asarray(initial, dtype=float).ravel()
        return cls(states=states, transitions=transitions, initial=initial)

    @classmethod
    def additive_binomial(cls, N, dt, y0, sigma, p):
        """Y_{n+1} = Y_n +/- sigma*sqrt(dt) with up probability p."""
        step = sigma * math.sqrt(dt)
        states = tuple(y0 + (2 * np.arange(n + 1) - n) * step for n in range(N + 1))
        return cls(states=states, transitions=_binomial_transitions(N, p))

    @classmethod
    def multiplicative_binomial(cls, N, dt, z0, sigma, p):
        """Z_{n+1} = Z_n * exp(+/- sigma*sqrt(dt)) with up probability p."""
        step = sigma * math.sqrt(dt)
        states = tuple(z0 * np.exp((2 * np.arange(n + 1) - n) * step) for n in range(N + 1))
        return cls(states=states, transitions=_binomial_transitions(N, p))

    @property
    def steps(self):
        return len(self.transitions)

    @property
    def initial_state(self):
        return float(self.states[0][int(np.argmax(self.initial))])

    def size(self, n):
        return len(self.states[n])

    @cached_property
    def marginals(self):
        laws = [self.initial / self.initial.sum()]
        for n, matrix in enumerate(self.transitions):
            laws.append(push_forward(laws[-1], matrix, n + 1))
        return tuple(laws)


def _binomial_transitions(N, p):
    mats = []
    for n in range(N):
        m = np.zeros((n + 1, n + 2))
        idx = np.arange(n + 1)
        m[idx, idx] = 1.0 - p
        m[idx, idx + 1] = p
        mats.append(m)
    return tuple(mats)


def push_forward(law, matrix, n=None):
    """One forward step of a law, renormalized under the drift guard."""
    nxt = law @ matrix
    mass = nxt.sum()
    if abs(mass - 1.0) > DRIFT_GUARD:
        raise InternalConsistencyError(f"probability mass drifted to {mass!r}", n=n)
    return nxt / mass


def chain_violations(chain, name, N=None):
    found = []
    if N is not None and chain.steps != N:
        found.append(Violation(f"{name}.steps", f"chain has {chain.steps} steps, lattice has {N}"))
    if len(chain.states) != chain.steps + 1:
        found.append(Violation(f"{name}.states", "need one state set per step 0..N"))
        return found
    if chain.initial.shape != chain.states[0].shape:
        found.append(Violation(f"{name}.initial", "initial law does not match step-0 states"))
    elif np.any(chain.initial < 0) or abs(chain.initial.sum() - 1.0) > 1e-12:
        found.append(Violation(f"{name}.initial", "initial law must be a probability vector"))
    for n, m in enumerate(chain.transitions):
        if m.shape != (len(chain.states[n]), len(chain.states[n + 1])):
            found.append(Violation(f"{name}.shape", f"transition {n} has shape {m.shape}"))
            continue
        if np.any(m < 0) or np.any(m > 1):
            found.append(Violation(f"{name}.entries", f"transition {n} has entries outside [0, 1]"))
        if np.any(np.abs(m.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
            found.append(Violation(f"{name}.stochastic", f"transition {n} rows do not sum to 1"))
    return found


def chain_marginal(chain, n):
    """Law of the chain at step n started from its initial law."""
    if not 0 <= n <= chain.steps:
        raise IndexError(f"step {n} outside 0..{chain.steps}")
    return chain.marginals[n]


@dataclass(frozen=True, order=True)
class PathIndex:
    """A stock path of length n encoded as an n-bit integer."""

    n: int
    bits: int

    @property
    def up_count(self):
        return bin(self.bits).count("1")

    @property
    def moves(self):
        if self.n == 0:
            return ""
        return format(self.bits, f"0{self.n}b").replace("0", "d").replace("1", "u")

    def child(self, up):
        return PathIndex(self.n + 1, 2 * self.bits + int(up))

    def __str__(self):
        return self.moves or "<root>"


def enumerate_stock_paths(spec, n, path_cap=DEFAULT_PATH_CAP):
    """Yield all 2^n paths at step n in lexicographic order (d before u)."""
    if not 0 <= n <= spec.N:
        raise IndexError(f"step {n} outside 0..{spec.N}")
    if n > path_cap:
        raise CapacityError(n, path_cap)
    for bits in range(2 ** n):
        yield PathIndex(n, bits)


def path_up_counts(n):
    """Up-count of every path at step n, as an array indexed by path."""
    b = np.arange(2 ** n, dtype=np.int64)
    counts = np.zeros_like(b)
    for i in range(n):
        counts += (b >> i) & 1
    return counts


def path_price_history(spec, n):
    """Array (2^n, n+1) of prices along every path at step n."""
    b = np.arange(2 ** n, dtype=np.int64)
    hist = np.empty((b.size, n + 1))
    for j in range(n + 1):
        k = path_up_counts(j)[b >> (n - j)]
        hist[:, j] = spec.s0 * spec.u_tilde ** k * spec.d_tilde ** (j - k)
    return hist


def rng_stream(seed, *key):
    """
    Independent generator for one stream of a seeded run.

    The stream for (seed, key...) is Philox seeded by SeedSequence(seed,
    spawn_key=key), so results do not depend on scheduling order.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))))


def sample_rows(rng, matrix, rows):
    """Draw a next state for each current state in rows from a stochastic matrix."""
    cum = np.cumsum(matrix[rows], axis=1)
    draws = rng.random(len(rows))
    nxt = (cum < draws[:, None] * cum[:, -1:]).sum(axis=1)
    return np.minimum(nxt, matrix.shape[1] - 1)


def sample_chain_paths(chain, count, rng, start=None):
    """State-index paths (count, steps+1) of a chain; start overrides the initial draw."""
    paths = np.empty((count, chain.steps + 1), dtype=np.int64)
    if start is None:
        start = rng.choice(len(chain.initial), size=count, p=chain.initial)
    paths[:, 0] = start
    for n, matrix in enumerate(chain.transitions):
        paths[:, n + 1] = sample_rows(rng, matrix, paths[:, n])
    return paths
