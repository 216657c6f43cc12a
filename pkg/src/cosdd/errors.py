"""Exception hierarchy shared by every cosdd module."""


class CosddError(Exception):
    """Base class for all errors raised by this package."""


# data pipeline
class UnreadableFile(CosddError, OSError):
    pass


class MixedShapes(CosddError, ValueError):
    pass


class NonFiniteValues(CosddError, ValueError):
    pass


class DegenerateStack(CosddError, ValueError):
    pass


class CropTooLarge(CosddError, ValueError):
    pass


class TooFewImages(CosddError, ValueError):
    pass


# noise synthesis
class OutOfRangeSignal(CosddError, ValueError):
    pass


class NegativeSignalForPoisson(CosddError, ValueError):
    pass


# models
class ShapeNotDivisible(CosddError, ValueError):
    pass


class ShapeMismatch(CosddError, ValueError):
    pass


class NonFiniteStats(CosddError, FloatingPointError):
    pass


class IndexOutOfRange(CosddError, IndexError):
    pass


class NonFiniteLoss(CosddError, FloatingPointError):
    pass


# evaluation
class ImageTooSmall(CosddError, ValueError):
    pass


class NonPositiveRange(CosddError, ValueError):
    pass


# configuration and checkpoints
class UnknownKey(CosddError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown key"


class InvalidValue(CosddError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class VersionMismatch(CosddError, ValueError):
    pass


class PresetMismatch(VersionMismatch):
    """A checkpoint was built for a different model preset than requested."""


class CorruptFile(CosddError, ValueError):
    pass
