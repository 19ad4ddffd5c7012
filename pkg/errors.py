class RailPlanError(Exception):
    """Base class for every error raised by this package."""


class RailMapError(RailPlanError):
    """A rail state does not lie on traversable track."""


class GenerationError(RailPlanError):
    """An instance cannot be generated from the given configuration."""


class InstanceFormatError(RailPlanError):
    """A file could not be parsed; the message names the line or field."""


class InstanceValidationError(RailPlanError):
    """A parsed instance violates one of its invariants."""


class TableConflictError(RailPlanError):
    """Reserved paths overlap in a cell or swap along an edge."""


class DesyncError(RailPlanError):
    """An agent left its planned path during execution."""


class PlanMismatchError(RailPlanError):
    """A plan file does not belong to the instance it is used with."""
