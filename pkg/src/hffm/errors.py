"""Exception hierarchy shared by every hffm module."""


class HFFMError(Exception):
    """Base class for all errors raised by hffm."""


class ConfigError(HFFMError):
    """Invalid configuration value. ``path`` names the offending field."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class GenerationError(HFFMError):
    pass


class MembershipError(HFFMError):
    pass


class TopologyError(HFFMError):
    pass


class ShapeError(HFFMError):
    pass


class DataError(HFFMError):
    pass


class PartitionError(HFFMError):
    pass


class AggregationError(HFFMError):
    pass


class AccountingError(HFFMError):
    pass


class ReportingError(HFFMError):
    pass
