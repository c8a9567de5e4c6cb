"""Exception types raised across the package."""


class HybridContactError(Exception):
    """Base class for all package errors."""


class AngleNearPi(HybridContactError, ValueError):
    """Rotation angle too close to pi for a well-defined logarithm."""


class DimensionMismatch(HybridContactError, ValueError):
    pass


class UnknownFramePair(HybridContactError, KeyError):
    pass


class NonpositiveDt(HybridContactError, ValueError):
    pass


class MissingImuAlignment(HybridContactError, KeyError):
    """No preintegrated IMU rotation is available at the requested time."""


class UnknownKey(HybridContactError, KeyError):
    pass


class BadCovariance(HybridContactError, ValueError):
    pass


class ResidualEvaluationFailed(HybridContactError, RuntimeError):
    pass


class SingularNormalEquations(HybridContactError, RuntimeError):
    pass


class InfeasibleConfig(HybridContactError, ValueError):
    pass


class ConfigError(HybridContactError, ValueError):
    pass


class ParseError(HybridContactError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class OutOfOrderTimestamp(ParseError):
    pass


class TimestampMismatch(HybridContactError, ValueError):
    pass
