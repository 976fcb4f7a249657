"""Exception and warning classes raised across the package."""


class NlBackboneError(Exception):
    """Base class for all package errors."""


# mechanism algebra
class NotSupercritical(NlBackboneError, ValueError):
    pass


class GreyViolation(NlBackboneError, ValueError):
    pass


class NoRoot(NlBackboneError, ArithmeticError):
    pass


class TailTooHeavy(NlBackboneError, ArithmeticError):
    pass


class ZeroProbabilityBranch(NlBackboneError, ValueError):
    pass


class RepresentationMismatch(NlBackboneError, ArithmeticError):
    pass


class NotFinite(NlBackboneError, ArithmeticError):
    pass


# solvers
class PicardDivergence(NlBackboneError, ArithmeticError):
    pass


class RangeViolation(NlBackboneError, ArithmeticError):
    pass


class IdentityViolation(NlBackboneError, AssertionError):
    pass


class StepSizeTooLarge(NlBackboneError, ValueError):
    pass


# simulation
class PopulationExplosion(NlBackboneError, RuntimeError):
    """Raised when a simulation exceeds its population cap.

    The partially built object (tree or particle state) is attached as
    ``partial`` so callers can record the cap hit.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class OutOfHorizon(NlBackboneError, ValueError):
    pass


class FieldMismatch(NlBackboneError, ValueError):
    pass


class ConfigError(NlBackboneError, ValueError):
    pass


class GridTooNarrow(RuntimeWarning):
    """Heat-kernel mass escaping the computational grid exceeds tolerance."""


class ApproximationWarning(UserWarning):
    """Discloses the (epsilon, m) bias of particle-mode dressing."""
