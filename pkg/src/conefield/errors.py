"""Exception types shared across the package."""


class ConefieldError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(ConefieldError):
    """System definition text violates the grammar.

    Carries the character offset of the offending token in ``position``.
    """

    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (at char {position})")
        self.position = position


class EvaluationError(ConefieldError):
    """Domain error while evaluating a vector field (log of nonpositive,
    division by zero, fractional power of a negative base, ...)."""


class DivergenceError(ConefieldError):
    """Trajectory left the configured divergence radius; the orbit is not
    resolvable (left the basin, or the system is not complete there)."""

    def __init__(self, message, t=None, state=None):
        super().__init__(message)
        self.t = t
        self.state = state


class MaxStepsError(ConefieldError):
    """Integrator exceeded the configured step budget."""


class ConvergenceError(ConefieldError):
    """An iterative procedure (Newton, return map, averaging) failed to
    converge to the requested tolerance."""

    def __init__(self, message, residual=None, best=None):
        super().__init__(message)
        self.residual = residual
        self.best = best


class NotOscillatingError(ConefieldError):
    """No Poincare-section crossing was found: the orbit does not oscillate."""


class EigenbasisError(ConefieldError):
    """Eigenvector matrix is defective or too ill-conditioned to trust."""


class PositivityRefusal(ConefieldError):
    """The requested cone construction is impossible: a complex dominant
    eigenvalue rules out any pointed invariant cone near the fixed point."""


class AngleUndefinedError(ConefieldError):
    """Dominant cycle eigenfunction has (numerically) zero modulus at the
    query point: the phase is undefined there (phaseless set)."""


class ResolutionError(ConefieldError):
    """Eigenfunction data could not be resolved at the query point."""
