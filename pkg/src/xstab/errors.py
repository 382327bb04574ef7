"""Exception hierarchy shared by every xstab module."""


class XstabError(Exception):
    """Base class for all library errors."""


class DataError(XstabError):
    """Input data could not be used (bad file, bad shape, degenerate values)."""


class ImageIOError(DataError, OSError):
    pass


class FormatError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class NonFiniteInputError(DataError):
    pass


class ZeroMassError(DataError):
    pass


class NegativeValueError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class InvalidParameterError(XstabError, ValueError):
    pass


class DegenerateQuadError(DataError):
    pass


class InvalidLayerError(XstabError, IndexError):
    pass


class EmptyDatasetError(DataError):
    pass


class EmptyTrainingSetError(DataError):
    pass


class EmptyFixationsError(DataError):
    pass


class ZeroVarianceError(DataError):
    pass


class IdenticalInputsError(DataError):
    pass


class NoValidVariantsError(DataError):
    pass


class ZeroBaselineError(DataError):
    pass


class LengthMismatchError(DataError):
    pass


class EmptyLevelError(DataError):
    pass


class ConfigError(XstabError):
    pass
