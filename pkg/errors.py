import re


class LdmlError(Exception):
    """
    Base class of every error raised by the estimation pipeline.

    Attributes
    ----------
    code : string
        Stable machine-readable error code (snake_case of the class name).
    exit_code : int
        Process exit code used by the command line front end.
    """

    exit_code = 1

    @property
    def code(self):
        return re.sub(r"(?<!^)(?=[A-Z])", "_", type(self).__name__).lower()

    def to_dict(self):
        return {"code": self.code, "type": type(self).__name__, "message": str(self)}


class ConfigError(LdmlError):
    exit_code = 2


class InvalidParameter(LdmlError):
    pass


# data
class MissingColumn(LdmlError):
    pass


class NonBinaryTreatment(LdmlError):
    pass


class NonFiniteValue(LdmlError):
    pass


class EmptyFile(LdmlError):
    pass


class InvalidKPrime(LdmlError):
    pass


class TooFewRows(LdmlError):
    pass


# learners
class EmptyTrainingSet(LdmlError):
    pass


class SingularDesign(LdmlError):
    pass


class NonBinaryLabels(LdmlError):
    pass


class DimensionMismatch(LdmlError):
    pass


# estimands / engine
class MissingInstrument(LdmlError):
    pass


class DegenerateTreatmentArm(LdmlError):
    pass


class KPrimeTooSmall(LdmlError):
    pass


class NuTooSmall(LdmlError):
    pass


class EmptySubsample(LdmlError):
    pass


class EmptyPoints(LdmlError):
    pass


class SolverNoCandidate(LdmlError):
    pass


# inference
class NoContributingRows(LdmlError):
    pass


class NonPositiveBandwidth(LdmlError):
    pass


class SingularJacobian(LdmlError):
    pass


class FoldPlanMismatch(LdmlError):
    pass


class PropensityMismatch(FoldPlanMismatch):
    pass


# simlab
class UnknownMethod(LdmlError):
    pass


class ZeroReps(LdmlError):
    pass


# splits whose folds cannot be fitted are discarded rather than failing the run
FOLD_ERRORS = (EmptySubsample, DegenerateTreatmentArm)
