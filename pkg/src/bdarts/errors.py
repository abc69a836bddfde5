"""Exception taxonomy shared by the library and the CLI exit codes."""


class BdartsError(Exception):
    exit_code = 1


class ConfigError(BdartsError, ValueError):
    """Invalid configuration value or combination."""

    exit_code = 2

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class CatalogError(ConfigError):
    """Genotype or checkpoint built against a different operation catalog."""


class DimensionError(BdartsError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class UsageError(BdartsError, ValueError):
    """An API was called outside its documented domain."""


class DataFormatError(BdartsError, ValueError):
    """Malformed dataset or artifact file."""

    exit_code = 3


class NumericalError(BdartsError, ArithmeticError):
    """Non-finite values surfaced in a forward or backward pass."""

    exit_code = 4

    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)
