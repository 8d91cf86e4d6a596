"""Exception hierarchy shared by all modules."""


class SimError(Exception):
    """Base class for every error raised by simctr."""


class ConfigError(SimError, ValueError):
    pass


class InputOrderError(SimError, ValueError):
    """A behavior is timestamped after the request it is supposed to precede."""


class IngestError(SimError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class StoreFormatError(SimError):
    """Base class for persisted-file problems (index or checkpoint)."""


class VersionMismatchError(StoreFormatError):
    pass


class ChecksumError(StoreFormatError):
    pass


class StoreIOError(StoreFormatError, OSError):
    pass


class UndefinedMetricError(SimError, ValueError):
    pass


class NumericError(SimError, FloatingPointError):
    def __init__(self, tensor: str, detail: str = "non-finite values"):
        self.tensor = tensor
        super().__init__(f"{detail} in {tensor}")


class ProtocolError(SimError, ValueError):
    pass


class SwapRejected(SimError):
    pass
