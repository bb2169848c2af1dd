"""Exception hierarchy shared across the package."""


class DiffAsrError(Exception):
    """Base class for all package errors."""


class NumericFault(DiffAsrError):
    """Non-finite loss, gradient or parameter encountered."""


class CapacityError(DiffAsrError):
    """Input exceeds a fixed buffer (canvas length, frame budget)."""


class SchemaError(DiffAsrError):
    """Malformed checkpoint, corpus record or parameter name."""


class ContractViolation(DiffAsrError):
    """A caller broke a documented precondition or an invariant was violated."""


class UndefinedMetric(DiffAsrError, ValueError):
    """Metric is undefined for the given input (empty reference, constant column)."""


class DependencyError(DiffAsrError):
    """A pipeline stage was started before the artifacts it needs exist."""


class ConfigError(DiffAsrError, ValueError):
    """Bad configuration file or override."""
