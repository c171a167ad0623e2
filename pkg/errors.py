"""
Exception hierarchy for mfelattice.

Every error carries the process exit code the command line interface reports
for it: 2 for invalid input, 3 for numerical failures.
"""

from dataclasses import dataclass

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3


class MfeError(Exception):
    """Base class for all library errors."""

    exit_code = EXIT_INVALID


@dataclass(frozen=True)
class Violation:
    """A single failed scenario check."""

    code: str
    message: str

    def __str__(self):
        return f"[{self.code}] {self.message}"


class ScenarioValidationError(MfeError, ValueError):
    """Raised with every violation found in a scenario, not just the first."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n".join(f"  {v}" for v in self.violations)
        super().__init__(f"scenario has {len(self.violations)} violation(s):\n{lines}")

    @property
    def codes(self):
        return [v.code for v in self.violations]


class InvalidLatticeError(MfeError, ValueError):
    """Lattice parameters break 0 < d_tilde < beta < u_tilde."""


class InputError(MfeError, ValueError):
    """Arguments are inconsistent with each other or with a solution."""


class CapacityError(MfeError):
    """Path enumeration would exceed the configured path cap."""

    def __init__(self, n, cap):
        self.n = n
        self.cap = cap
        super().__init__(
            f"{2 ** n} paths at step {n} exceed path_cap={cap} (2^{cap} paths); "
            "use the node-based solver or raise path_cap"
        )


class MissingEntryError(MfeError, KeyError):
    """A CUSTOM table has no value for the requested state."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing table entry"


class NodeError(MfeError):
    """Numerical failure tied to a lattice node."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message, n=None, stock_idx=None, y_idx=None):
        self.n = n
        self.stock_idx = stock_idx
        self.y_idx = y_idx
        where = []
        if n is not None:
            where.append(f"n={n}")
        if stock_idx is not None:
            where.append(f"stock_idx={stock_idx}")
        if y_idx is not None:
            where.append(f"y_idx={y_idx}")
        if where:
            message = f"{message} at node ({', '.join(where)})"
        super().__init__(message)


class NumericalOverflowError(NodeError, ArithmeticError):
    """A log-domain quantity became non-finite."""


class ScenarioInfeasibleError(NodeError):
    """The clearing exponent G is too large to represent."""


class InternalConsistencyError(NodeError):
    """An analytic identity (market clearing, normalization) failed."""


class ConditioningError(MfeError):
    """Conditioning on an event of zero probability."""

    exit_code = EXIT_NUMERICAL


class DiagnosticsNotRetainedError(MfeError):
    """The solution was computed without the tables this call needs."""

    exit_code = EXIT_NUMERICAL


class BracketError(MfeError, ArithmeticError):
    """The oracle optimum sits on the edge of its search interval."""

    exit_code = EXIT_NUMERICAL
