"""Exception hierarchy shared across the package."""


class IonolinkError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 4


class ConfigError(IonolinkError, ValueError):
    exit_code = 2


class DataError(IonolinkError, ValueError):
    exit_code = 4


class FrozenProtocolError(IonolinkError, RuntimeError):
    """A frozen calibration artifact was modified, reused or refit."""

    exit_code = 3


# xrs_ingest
class UnknownFormat(DataError):
    pass


class NonMonotonicTime(DataError):
    pass


class EmptySeries(DataError):
    pass


class WindowTooLong(ConfigError):
    pass


# scenario_synth
class GridMismatch(DataError):
    pass


# frontend_detect
class DegenerateShape(ConfigError):
    pass


class InsufficientData(DataError):
    pass


# estimator
class NumericalBreakdown(DataError, ArithmeticError):
    pass


# risk_forecast / phy_abstraction
class AlreadyFrozen(FrozenProtocolError):
    pass


class NoBracket(DataError):
    pass


class RateNotOnLadder(ConfigError):
    pass


class PoorConditioning(DataError):
    pass


class BetaOutOfRange(ConfigError):
    pass


# controller_policies
class UnknownPolicy(ConfigError):
    pass


# stats_eval
class SeriesTooShort(DataError):
    pass


class DegenerateVariance(DataError, ArithmeticError):
    pass


class EmptyGate(DataError):
    pass


# cli_orchestrator
class BundleExists(FrozenProtocolError):
    pass


class MissingBundle(FrozenProtocolError):
    pass


class BundleTampered(FrozenProtocolError):
    pass
