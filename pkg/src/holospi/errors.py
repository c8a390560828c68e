"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraint."""


class ContractError(ValueError):
    """An operation was called with inputs violating its contract."""


class FormatError(IOError):
    """A file does not conform to one of the binary/text formats.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
