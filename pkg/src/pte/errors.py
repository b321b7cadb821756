"""Exception hierarchy shared by every module.

The CLI maps :class:`InvariantViolation` to exit code 2 and
:class:`ConfigError` to exit code 3.
"""


class PTEError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PTEError, ValueError):
    """Operand dimensions do not agree."""


class NonFiniteError(PTEError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class UsageError(PTEError, RuntimeError):
    """An API was called in a state or with arguments it does not support."""


class DataError(PTEError, ValueError):
    """Token ids or sequence lengths violate the model or corpus limits."""


class ConfigError(PTEError, ValueError):
    """A configuration value is out of its valid range."""


class ConsistencyError(PTEError, ValueError):
    """Two objects that must agree (shapes, configs, reports) do not."""


class CapacityError(PTEError, RuntimeError):
    """No FREE parameters are left to allocate."""


class PipelineError(PTEError, RuntimeError):
    """A pipeline stage is missing an input."""


class InvariantViolation(PTEError, RuntimeError):
    """A hard invariant (e.g. the frozen general-domain block) was broken."""
