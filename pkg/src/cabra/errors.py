"""Exception types shared across the package."""


class CabraError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(CabraError):
    pass


class BlockUnderCovered(CabraError):
    """Block k is the argument of fewer than two monotone operators."""

    def __init__(self, k, count):
        super().__init__(f"block {k} is covered by {count} monotone operator(s); need >= 2")
        self.k = k
        self.count = count


class CutoffInfeasible(CabraError):
    """No legal cutoff operator exists for cocoercive operator j."""

    def __init__(self, j, msg):
        super().__init__(f"cocoercive operator {j}: {msg}")
        self.j = j


class NotPSD(CabraError):
    def __init__(self, which, k, lam_min):
        super().__init__(f"{which}[k={k}] is not PSD (lambda_min = {lam_min:.3e})")
        self.which = which
        self.k = k
        self.lam_min = lam_min


class WrongNullspace(CabraError):
    def __init__(self, k, msg):
        super().__init__(f"W[k={k}]: {msg}")
        self.k = k


class NoConvergence(CabraError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class PatternConflict(CabraError):
    pass


class Infeasible(CabraError):
    """Projection solver stalled above tolerance (cannot certify infeasibility)."""

    def __init__(self, residual, iterations):
        super().__init__(
            f"no feasible point found: residual {residual:.3e} after {iterations} iterations"
        )
        self.residual = residual
        self.iterations = iterations


class SingularSystem(CabraError):
    pass


class EmptyProblem(CabraError):
    pass


class DependencyViolation(CabraError):
    """Forward-substitution order would read a value that is not yet final."""


class Deadlock(CabraError):
    """A simulated node waits on a message that is never scheduled."""


class InvalidParams(CabraError):
    pass


class SchemaError(CabraError):
    """A JSON input file does not match the documented schema."""
