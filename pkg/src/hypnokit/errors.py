"""Exception hierarchy shared by all hypnokit modules."""

from __future__ import annotations


class HypnokitError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class UsageError(HypnokitError, ValueError):
    """Caller violated a documented precondition."""

    exit_code = 2


class ConfigError(UsageError):
    """Invalid configuration file or key."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class ParseError(HypnokitError, ValueError):
    """Malformed input file.

    ``offset`` is the byte offset of the offending header field and
    ``record`` the index of a truncated EDF data record, when known.
    """

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None, record: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        if record is not None:
            message = f"{message} (data record {record})"
        super().__init__(message)
        self.offset = offset
        self.record = record


class RangeError(HypnokitError, ValueError):
    """Sample value outside the channel's declared physical range."""

    exit_code = 3

    def __init__(self, channel: str, index: int, value: float):
        super().__init__(f"channel {channel!r}: sample {index} = {value!r} outside physical range")
        self.channel = channel
        self.index = index
        self.value = value


class FormatError(HypnokitError, ValueError):
    """Checkpoint or manifest container is unreadable."""

    exit_code = 3


class IoError(HypnokitError, OSError):
    """Filesystem location cannot be used."""

    exit_code = 3


class NumericError(HypnokitError, ArithmeticError):
    """Non-finite values encountered in a numerical routine."""

    exit_code = 4
