class ShieldError(Exception):
    """Base class for all package errors."""


class DimensionError(ShieldError, ValueError):
    pass


class NonFiniteError(ShieldError, FloatingPointError):
    pass


class DegenerateDistributionError(ShieldError, ValueError):
    """A softmax row had every entry masked."""


class ValidationError(ShieldError, ValueError):
    pass


class InfeasibleError(ShieldError, RuntimeError):
    pass


class ContractViolation(ShieldError, RuntimeError):
    pass


class SizeError(ShieldError, ValueError):
    pass


class ParseError(ShieldError, ValueError):
    def __init__(self, msg, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + msg)


class ConfigError(ShieldError, ValueError):
    pass


class CheckpointError(ShieldError, IOError):
    pass


class MetricError(ShieldError, ValueError):
    pass


class InputError(ShieldError, ValueError):
    pass
