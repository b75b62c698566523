"""Exception types raised across the toolkit."""


class SdmemError(Exception):
    """Base class for all toolkit errors."""


class DimensionMismatchError(SdmemError, ValueError):
    pass


class NotPositiveDefiniteError(SdmemError, ValueError):
    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class SingularGammaError(SdmemError, ArithmeticError):
    pass


class NonFiniteStateError(SdmemError, ArithmeticError):
    def __init__(self, message, time=None, subject_id=None):
        super().__init__(message)
        self.time = time
        self.subject_id = subject_id


class TooFewPointsError(SdmemError, ValueError):
    pass


class MissingAntiderivativeError(SdmemError, ValueError):
    pass


class IdentifiabilityError(SdmemError, ArithmeticError):
    """A per-subject information matrix (V) is numerically singular."""


class SingularInformationError(SdmemError, ArithmeticError):
    """A pooled information matrix is numerically singular."""


class RankDeficientError(SdmemError, ValueError):
    pass


class TooFewReplicatesError(SdmemError, ValueError):
    pass


class PlanError(SdmemError, ValueError):
    pass
