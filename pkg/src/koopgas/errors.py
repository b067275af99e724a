"""Exception hierarchy shared by all koopgas modules."""


class KoopgasError(Exception):
    """Base class for all library errors."""


class DomainError(KoopgasError, ValueError):
    """A formula was evaluated outside its physical domain."""


class NonPhysicalSteadyState(DomainError):
    """The pipeline cannot carry the requested flow at the given inlet pressure."""


class NonPhysicalState(KoopgasError):
    """A simulated pressure became nonpositive."""


class NewtonDivergence(KoopgasError):
    """Newton iterations failed to reach the residual tolerance."""

    def __init__(self, message, residual=float("nan"), step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


class TopologyError(KoopgasError):
    """The gas network graph is malformed or disconnected."""


class ExcitationOutOfBounds(KoopgasError):
    """An excitation range violates the pipeline operating limits."""


class InsufficientData(KoopgasError):
    """Too few snapshots for the requested regression."""


class RankDeficient(KoopgasError):
    """The regressor matrix does not have full column rank."""


class NonConvergence(KoopgasError):
    """An iterative fit exhausted its iteration budget."""


class SchemaMismatch(KoopgasError):
    """A persisted file lacks required fields or has wrong types."""


class VersionError(SchemaMismatch):
    """A persisted file was written with an unsupported schema version."""

    def __init__(self, expected, actual):
        super().__init__(f"unsupported schema version: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class SpecError(KoopgasError):
    """A network, power system or coupling specification failed validation."""


class DimensionMismatch(SpecError):
    """Array or model dimensions disagree."""


class Infeasible(KoopgasError):
    """The linear program has no feasible point."""

    def __init__(self, message, max_violation=None, row=None):
        super().__init__(message)
        self.max_violation = max_violation
        self.row = row


class Unbounded(KoopgasError):
    """The linear program objective is unbounded below."""


class LengthMismatch(KoopgasError, ValueError):
    """Two series that must align have different lengths."""


class HorizonMismatch(KoopgasError):
    """A dispatch solution does not cover the requested evaluation horizon."""
