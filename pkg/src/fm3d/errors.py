"""Exception hierarchy shared by every fm3d module."""


class FM3DError(Exception):
    """Base class for all errors raised by fm3d."""


# filter-map specs and indexing
class SpecError(FM3DError, ValueError):
    pass


class NonPositiveDimension(SpecError):
    pass


class ChannelConstraintViolated(SpecError):
    pass


class StrideExceedsFilter(SpecError):
    pass


class IndexOutOfRange(FM3DError, IndexError):
    pass


class ShapeMismatch(FM3DError, ValueError):
    pass


class LabelOutOfRange(FM3DError, ValueError):
    pass


# planning
class PlanError(FM3DError, ValueError):
    pass


class UnknownFilterCount(PlanError):
    pass


class BadOverride(PlanError):
    pass


class ChannelNotDivisible(PlanError):
    pass


class EmptyNetwork(PlanError):
    pass


# configuration files
class ConfigError(FM3DError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class MissingKey(ConfigError):
    pass


class UnknownKey(ConfigError):
    pass


class BadValue(ConfigError):
    pass


class DuplicateKey(ConfigError):
    pass


# data and checkpoint containers
class DataError(FM3DError, ValueError):
    pass


class BadMagic(DataError):
    pass


class CountMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class BadDims(DataError):
    pass


class EmptyDataset(DataError):
    pass


class VersionMismatch(DataError):
    pass


class DimMismatch(DataError):
    pass


class NonFiniteLoss(FM3DError, FloatingPointError):
    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at step {step}")
