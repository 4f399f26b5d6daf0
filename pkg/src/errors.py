"""Hierarquia de exceções do pipeline e códigos de saída da CLI."""


class TFMError(Exception):
    """Erro base. `exit_code` é o código devolvido pela CLI."""

    exit_code = 1


class UsageError(TFMError):
    exit_code = 2


class DataError(TFMError):
    exit_code = 3


class NumericError(TFMError):
    exit_code = 4


# --- lognormal ---
class NonPositiveVariance(NumericError, ValueError):
    pass


class EmptyEnsemble(NumericError, ValueError):
    pass


class ZeroVariance(NumericError, ValueError):
    pass


class NonPositiveMean(NumericError, ValueError):
    pass


class QuantileOutOfRange(UsageError, ValueError):
    pass


# --- autograd ---
class ShapeMismatch(NumericError, ValueError):
    pass


class OddSpatialDims(NumericError, ValueError):
    pass


class InvalidRate(UsageError, ValueError):
    pass


class NonScalarLoss(NumericError, ValueError):
    pass


class NonFiniteValue(NumericError):
    pass


# --- modelo ---
class ConfigInvalid(UsageError, ValueError):
    pass


class IndivisibleInput(DataError, ValueError):
    pass


class CheckpointError(DataError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


# --- augmentation / dados ---
class InvalidAlpha(UsageError, ValueError):
    pass


class InvalidSample(DataError, ValueError):
    pass


class NoCellFound(DataError):
    pass


class DegenerateShape(DataError):
    pass


class EmptyMask(DataError, ValueError):
    pass


class ManifestMissing(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class TruncatedFrame(DataError):
    def __init__(self, index: int, path: str, expected: int, actual: int):
        super().__init__(
            f"Frame {index} truncado: {path} tem {actual} bytes, esperado {expected}"
        )
        self.index = index


# --- treino / inferência ---
class NonFiniteGradient(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, step: int, value: float):
        super().__init__(f"Loss não finita ({value}) no step {step}")
        self.step = step


class PixelOutOfBounds(UsageError, ValueError):
    def __init__(self, pixel: tuple[int, int], width: int, height: int):
        super().__init__(
            f"Pixel {pixel} fora do frame: x deve estar em [0, {width - 1}], "
            f"y em [0, {height - 1}]"
        )
        self.pixel = pixel
        self.bounds = (width, height)
