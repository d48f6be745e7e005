"""Exception hierarchy shared by all modules."""


class LandscapeError(Exception):
    """Base class for every error raised by qlandscape."""


class InvalidDimension(LandscapeError, ValueError):
    pass


class DimensionMismatch(LandscapeError, ValueError):
    pass


class InvalidInput(LandscapeError, ValueError):
    pass


class NumericalFailure(LandscapeError, ArithmeticError):
    pass


class KinematicCritical(LandscapeError):
    """Transversality was requested at a point where the translated gradient vanishes."""


class DegenerateDenominator(LandscapeError, ArithmeticError):
    """The singular-control formula hit a vanishing denominator at time ``t``."""

    def __init__(self, t, numerator=float("nan"), denominator=float("nan")):
        self.t = float(t)
        self.numerator = float(numerator)
        self.denominator = float(denominator)
        super().__init__(
            f"singular-control denominator vanished at t={self.t:.6g} "
            f"(num={self.numerator:.3e}, den={self.denominator:.3e})"
        )


class AllRejected(LandscapeError):
    """Every restart of the singular-control search was rejected by the amplitude bound."""


class ConfigError(LandscapeError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class IoError(LandscapeError, OSError):
    pass
