"""Exception hierarchy shared by all cellcount modules."""


class CellCountError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(CellCountError, ValueError):
    """Bad input data or a violated precondition."""


# imaging
class EmptyInput(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class InvalidSigma(ValidationError):
    pass


class PGMError(ValidationError):
    pass


class MalformedHeader(PGMError):
    pass


class UnsupportedMaxval(PGMError):
    pass


class TruncatedPixelData(PGMError):
    pass


# synthetic data
class CapacityExceeded(CellCountError):
    pass


class UnknownCount(ValidationError):
    pass


# augmentation
class FormulaError(ValidationError):
    pass


class FormulaSyntaxError(FormulaError):
    pass


class SumMismatch(FormulaError):
    pass


class DuplicateBasis(FormulaError):
    pass


class InsufficientDonors(CellCountError):
    pass


class MixedGroup(ValidationError):
    pass


class MissingPool(ValidationError):
    pass


# predictors
class DegenerateLabels(ValidationError):
    pass


class SingularSystem(CellCountError):
    pass


class ModelFormatError(ValidationError):
    pass


# ensemble
class TooFewCounts(ValidationError):
    pass


class DegenerateIntensities(ValidationError):
    pass


class GroupMismatch(ValidationError):
    pass


# harness
class EmptyRecords(ValidationError):
    pass


class MissingFormulae(ValidationError):
    pass


class ConfigError(ValidationError):
    pass
