"""Exception types shared across the package."""


class GanInfluenceError(Exception):
    """Base class for every error raised by this package."""


class NonFiniteValue(GanInfluenceError, FloatingPointError):
    pass


class DimensionMismatch(GanInfluenceError, ValueError):
    pass


class SpecMismatch(GanInfluenceError, ValueError):
    pass


class Diverged(GanInfluenceError):
    """Parameter norm exceeded the divergence guard during training."""

    def __init__(self, step, norm, guard):
        self.step = step
        self.norm = norm
        self.guard = guard
        super().__init__(f"parameter norm {norm:.3e} exceeded guard {guard:.1e} at step {step}")


class ScheduleMismatch(GanInfluenceError, ValueError):
    pass


class AdjointBlewUp(GanInfluenceError):
    """Adjoint vector norm exceeded its guard during an influence sweep."""

    def __init__(self, step, norm, guard):
        self.step = step
        self.norm = norm
        self.guard = guard
        super().__init__(f"adjoint norm {norm:.3e} exceeded guard {guard:.1e} at step {step}")


class MissingCheckpoint(GanInfluenceError, KeyError):
    pass


class DegenerateCovariance(GanInfluenceError):
    pass


class DegenerateInput(GanInfluenceError, ValueError):
    pass


class NoConvergence(GanInfluenceError):
    pass


class ConfigError(GanInfluenceError, ValueError):
    pass
