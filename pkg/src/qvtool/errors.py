"""Exception hierarchy shared by all qvtool modules."""


class QVToolError(Exception):
    """Base class for every error raised by qvtool."""


class DomainError(QVToolError, ValueError):
    """An argument lies outside the region where the operation is defined."""


class UnsupportedOperationError(QVToolError, TypeError):
    """The operation does not apply to this kind of system (e.g. no parameter)."""


class ConfigurationError(QVToolError, ValueError):
    """A system or experiment description is inconsistent or incomplete."""


class KernelConstructionError(QVToolError, ValueError):
    """The requested kernel constraints cannot be satisfied uniquely."""


class InvalidKernelError(QVToolError, ValueError):
    """A kernel failed the moment/support conditions and was rejected."""


class DataError(QVToolError, ValueError):
    """Observed path contains non-finite values or has the wrong layout."""


class SingularWeightError(QVToolError, ValueError):
    """A weight 1/g was requested where g comes too close to zero."""


class PreconditionError(QVToolError, ValueError):
    """A documented precondition of an estimator does not hold."""


class StiffnessError(QVToolError, FloatingPointError):
    """The filter recursion produced non-finite values; refine the grid."""


class ShapeError(QVToolError, ValueError):
    """Arrays that must share a time grid do not."""


class SingularInformationError(QVToolError, ValueError):
    """Fisher information integrand is undefined because S(theta, t) <= 0."""


class DegenerateDataError(QVToolError, ValueError):
    """Summary statistics cannot be formed (e.g. a zero RMSE in a log fit)."""
