"""Exception hierarchy shared by every module."""


class PDIError(Exception):
    """Base class for all library errors."""


class DoseOutOfRange(PDIError):
    pass


class DimensionMismatch(PDIError):
    pass


class EmptyDataset(PDIError):
    pass


class IndicatorMismatch(PDIError):
    pass


class SingularDesign(PDIError):
    pass


class DegenerateVariance(PDIError):
    pass


class NonpositiveDose(PDIError):
    pass


class SingleClass(PDIError):
    pass


class Separation(PDIError):
    """Raised only when even the ridge-stabilised logistic fit diverges."""


class InvalidInterval(PDIError):
    pass


class NonpositiveEpsilon(PDIError):
    pass


class MonotonicityViolated(PDIError):
    pass


class SolveFailure(PDIError):
    pass


class IterationCapWithoutDescent(PDIError):
    pass


class TooFewRows(PDIError):
    pass


class NoInterval(PDIError):
    pass


class LengthMismatch(PDIError):
    pass


class OracleUndefined(PDIError):
    pass


class EmptyContingency(PDIError):
    pass


class EmptyInput(PDIError):
    pass


class SchemaError(PDIError):
    pass


class VersionError(PDIError):
    pass
