"""Exception hierarchy shared across the package."""


class DPPVIError(Exception):
    """Base class for every error raised by dppvi."""


class DomainError(DPPVIError, ValueError):
    """An argument lies outside the domain of the operation."""


class DimensionMismatch(DPPVIError, ValueError):
    pass


class LengthMismatch(DimensionMismatch):
    pass


class NonNormalizable(DPPVIError, ValueError):
    """Natural parameters do not define a proper distribution."""


class NonNormalizableGlobal(NonNormalizable):
    """The server-side global approximation left the family."""


class OptimizerDiverged(DPPVIError, FloatingPointError):
    pass


class MissingPerExampleGrads(DPPVIError, ValueError):
    pass


class DivergentEpsilon(DPPVIError, ValueError):
    """The accountant could not certify a finite epsilon."""


class CalibrationFailed(DPPVIError, ValueError):
    pass


class InfeasibleSplit(DPPVIError, ValueError):
    pass


class SchemaMismatch(DPPVIError, ValueError):
    pass


class ConfigError(DPPVIError, ValueError):
    pass


class IoError(DPPVIError, OSError):
    """Input file missing or unreadable."""
