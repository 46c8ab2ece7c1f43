"""Exception types raised across the package."""


class HSFusionError(Exception):
    pass


class NotFound(HSFusionError, FileNotFoundError):
    pass


class FormatError(HSFusionError, ValueError):
    pass


class LabelRangeError(HSFusionError, ValueError):
    pass


class RangeError(HSFusionError, ValueError):
    pass


class SizeError(HSFusionError, ValueError):
    pass


class ConfigError(HSFusionError, ValueError):
    pass


class ContractError(HSFusionError, ValueError):
    pass


class DegenerateInput(HSFusionError, ValueError):
    pass


class AlignmentError(HSFusionError, ValueError):
    pass


class CheckpointError(HSFusionError, ValueError):
    pass
