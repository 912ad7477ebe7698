"""Exception and warning types shared across the package."""


class AdvisoryWarning(UserWarning):
    """Non-fatal condition worth surfacing (degenerate batch, empty class, ...)."""


class DimensionError(ValueError):
    pass


class LabelError(ValueError):
    pass


class AugmentationLabelError(LabelError):
    pass


class DataFormatError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class PoisonedGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter tensor '{name}'")
        self.name = name


class NumericalDivergenceError(ArithmeticError):
    def __init__(self, epoch, what="loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}; training aborted")
        self.epoch = epoch
