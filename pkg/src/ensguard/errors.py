"""Exception types shared across the package."""


class EnsguardError(Exception):
    pass


class ContractError(EnsguardError, ValueError):
    """A caller broke a documented precondition (shapes, dims, empty inputs)."""


class AddressingError(EnsguardError, IndexError):
    pass


class FormatError(EnsguardError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(EnsguardError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingError(EnsguardError):
    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
        self.epoch = epoch


class ConfigError(EnsguardError, ValueError):
    pass


class UnrecoverableError(EnsguardError):
    """More than one store of a protection group is corrupted in the same layer."""


class ProfilingError(EnsguardError):
    pass
