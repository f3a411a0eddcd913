"""Exception hierarchy.

Two families matter to callers: :class:`ConfigError` for bad input (the CLI
maps it to exit code 2) and :class:`NumericalError` for a computation that
cannot proceed at the requested point (exit code 3).
"""


class QestError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(QestError, ValueError):
    pass


class NumericalError(QestError, ArithmeticError):
    pass


class DimensionMismatch(ConfigError):
    pass


class InvalidOperator(ConfigError):
    """Matrix violates a construction invariant by more than the repair tolerance."""


class UnknownModel(ConfigError):
    pass


class OutsideRegion(ConfigError):
    pass


class InvalidGrid(ConfigError):
    pass


class InvalidConfig(ConfigError):
    pass


class Infeasible(ConfigError):
    pass


class MultiparameterUnsupported(ConfigError):
    pass


class StrategyUnsupported(ConfigError):
    pass


class TreeTooLarge(ConfigError):
    pass


class ZeroProbabilityBranch(NumericalError):
    pass


class M2Violated(NumericalError):
    """The derivative has weight on the kernel of the state; no SLD exists."""


class SingularSupport(NumericalError):
    """A zero-probability outcome carries a nonzero score."""


class SingularFisher(NumericalError):
    pass


class SingularB(NumericalError):
    pass


class IdentifiabilityFailure(NumericalError):
    pass


class NotLocallyUnbiased(NumericalError):
    pass


class StateNotPositive(NumericalError):
    pass


class UnidentifiableDirection(NumericalError):
    pass


class NotInterior(NumericalError):
    pass


class BoundaryWeight(NumericalError):
    pass
