"""Exception hierarchy shared across the package."""


class FlearnError(Exception):
    """Base class for every error raised by flearn."""


class ConfigError(FlearnError, ValueError):
    """Invalid configuration or mismatched tensor layouts."""


class InputError(FlearnError, ValueError):
    """Malformed caller input: empty batches, over-length sequences, bad ids."""


class ParseError(InputError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class CapacityError(FlearnError, ValueError):
    """Requested corpus is larger than the generator's template x entity space."""


class DivergenceError(FlearnError, ArithmeticError):
    def __init__(self, message, epoch=None, step=None, stage=None):
        self.epoch = epoch
        self.step = step
        self.stage = stage
        parts = [message]
        if stage is not None:
            parts.append(f"stage={stage}")
        if epoch is not None:
            parts.append(f"epoch={epoch}")
        if step is not None:
            parts.append(f"step={step}")
        super().__init__(" ".join(parts))


class FormatError(FlearnError, ValueError):
    """Corrupt or unsupported checkpoint container."""

    def __init__(self, message, offset=None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} at offset {offset}")
