"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``ValidationError`` subclasses give 2,
``NumericalError`` subclasses give 3.
"""


class LagctrlError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(LagctrlError, ValueError):
    """Input or scenario rejected before any numerical work."""


class ParameterError(ValidationError):
    """An argument is outside its admissible range."""


class InvariantError(ValidationError):
    """A mesh or data structure violates one of its invariants."""


class GeometryError(ValidationError):
    """A geometric precondition (clearance, containment of a tube) fails."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class CompatibilityError(ValidationError):
    """Neumann data with nonzero total flux."""


class BasisError(ValidationError):
    """A user supplied cohomology basis has a singular Gram matrix."""


class NumericalError(LagctrlError, RuntimeError):
    """Failure during a numerical stage."""


class BlowUpError(NumericalError):
    """Non-finite values or degenerate geometry during time integration."""

    def __init__(self, message, time=None, index=None):
        super().__init__(message)
        self.time = time
        self.index = index


class ConditioningError(NumericalError):
    """Least-squares system too ill conditioned to trust."""


class RefinementOverflowError(NumericalError):
    """Adaptive time sampling requested too many snapshots."""


class NonConvergenceError(NumericalError):
    """Fixed-point iteration hit its iteration cap."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class BallViolationError(NumericalError):
    """An iterate left the admissible ball around the reference field."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class ContainmentError(NumericalError):
    """The transported surface left the fluid domain."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class AuditFailure(NumericalError):
    """A runtime a-priori bound was violated."""
