"""Exception hierarchy shared by every module."""


class LCLIPError(Exception):
    """Base class for all library errors."""


class DimensionError(LCLIPError, ValueError):
    pass


class DegenerateInputError(LCLIPError, ValueError):
    """Input is structurally valid but the quantity is undefined (zero norm, empty, B < 2)."""


class DeterminismError(LCLIPError, RuntimeError):
    pass


class ConfigError(LCLIPError, ValueError):
    pass


class TokenizationError(LCLIPError, ValueError):
    pass


class ContractError(LCLIPError, ValueError):
    """A documented precondition on the inputs was violated."""


class DataError(LCLIPError, ValueError):
    """A dataset record is malformed or inconsistent with the requested protocol."""


class UndefinedCorrelationError(LCLIPError, ValueError):
    pass


class TrainingFailure(LCLIPError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class CheckpointError(LCLIPError, IOError):
    pass


class DomainError(LCLIPError, ValueError):
    pass
