"""Exception hierarchy shared across the package."""


class BnnError(Exception):
    """Base class for all package errors."""


class ContractError(BnnError, ValueError):
    """A caller violated an operation's shape or layout contract."""


class InvalidInputError(BnnError, ValueError):
    """Input values are outside an operation's domain."""


class ConfigError(BnnError, ValueError):
    """An architecture or training configuration is inconsistent."""


class ParseError(BnnError, ValueError):
    """A binary file could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
