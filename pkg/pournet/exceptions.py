"""Custom exception classes for pipeline contract violations."""


class PourException(Exception):
    """Base exception for all pournet errors."""

    def __init__(self, message: str, exit_code: int = 1, module: str | None = None):
        self.module = module
        self.message = f"[{module}] {message}" if module else message
        self.exit_code = exit_code
        super().__init__(self.message)


class ShapeError(PourException):
    """Exception for tensor/volume shape disagreement."""

    def __init__(self, message: str = "Shape mismatch", module: str | None = None):
        super().__init__(message, exit_code=1, module=module)


class ContractError(PourException):
    """Exception for a violated operation precondition."""

    def __init__(self, message: str = "Contract violated", module: str | None = None):
        super().__init__(message, exit_code=1, module=module)


class VolumeFormatError(PourException):
    """Exception for a malformed VVOL1 header; names the first bad field."""

    def __init__(self, field: str, detail: str = "", module: str | None = "volume"):
        self.field = field
        message = f"bad field '{field}'" + (f": {detail}" if detail else "")
        super().__init__(message, exit_code=1, module=module)


class SizeMismatchError(PourException):
    """Exception for a payload whose length disagrees with the declared dims."""

    def __init__(self, expected: int, actual: int, module: str | None = "volume"):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"payload holds {actual} values, header declares {expected}",
            exit_code=1,
            module=module,
        )


class DegenerateInputError(PourException):
    """Exception for inputs a formula cannot be evaluated on (zero mean, zero counts)."""

    def __init__(self, message: str = "Degenerate input", module: str | None = None):
        super().__init__(message, exit_code=1, module=module)


class DegenerateReferenceError(PourException):
    """Exception for a reference volume with zero data range or zero energy."""

    def __init__(self, message: str = "Degenerate reference", module: str | None = "metrics"):
        super().__init__(message, exit_code=1, module=module)


class CheckpointFormatError(PourException):
    """Exception for a malformed parameter checkpoint."""

    def __init__(self, message: str = "Malformed checkpoint", module: str | None = "tensor"):
        super().__init__(message, exit_code=1, module=module)


class ConfigError(PourException):
    """Exception for invalid or unknown configuration keys (usage error)."""

    def __init__(self, message: str = "Invalid configuration", module: str | None = "cli"):
        super().__init__(message, exit_code=2, module=module)


class UsageError(PourException):
    """Exception for invalid command-line arguments."""

    def __init__(self, message: str = "Invalid arguments", module: str | None = "cli"):
        super().__init__(message, exit_code=2, module=module)
