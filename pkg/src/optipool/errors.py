class OptipoolError(Exception):
    """Base class for engine errors."""


class PageFormatError(OptipoolError):
    pass


class BoundsError(OptipoolError, IndexError):
    pass


class ProtocolError(OptipoolError):
    """An LSN, WAL or before-image rule was violated."""


class LogIntegrityError(OptipoolError):
    pass


class CapacityError(OptipoolError):
    pass


class SizeError(OptipoolError, ValueError):
    pass


class ConfigError(OptipoolError, ValueError):
    pass
