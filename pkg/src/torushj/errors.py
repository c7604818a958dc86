"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Bad build parameters (unsupported dimension, even velocity count, ...)."""


class DomainError(ValueError):
    """Numerically invalid input (non-finite coordinates, negative weights, ...)."""


class FenchelBoxError(RuntimeError):
    """The momentum search box is too small: the conjugate argmax hit the boundary."""


class SolveError(RuntimeError):
    """A fixed-point solve failed in a way that cannot be reported as a field."""


class MatherLPError(RuntimeError):
    """Linear program over the discrete closed-measure polytope failed."""


class TailMassError(RuntimeError):
    """Trace horizon too short: discarded occupation-measure tail exceeds tolerance."""


class CalibrationError(RuntimeError):
    """Backward curve steps disagree with the dynamic programming principle."""
