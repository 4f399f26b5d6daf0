"""
Pipeline de batches: máscara de Tukey nas forças, recorte em torno da célula,
flips, rotação bicúbica, salt noise e log truncado.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage as ndi
from scipy.signal import windows
from skimage.filters import threshold_otsu

from src.errors import ConfigInvalid, InvalidAlpha, NoCellFound
from src.synth_data import FrameSet, SamplePair
from src.utils import keyed_stream, parallel_map

logger = logging.getLogger(__name__)

MORPH_KERNEL = np.ones((5, 5), dtype=bool)
FORCE_MASK_ALPHA = 0.1


@dataclass(frozen=True)
class AugmentConfig:
    crop: int = 256
    flip_prob: float = 0.5
    salt_fraction: float = 0.01
    salt_image_prob: float = 0.5
    salt_intensity_max: float = 2000.0
    tukey_alpha: float = FORCE_MASK_ALPHA
    max_rotation_deg: float = 360.0

    def __post_init__(self):
        if self.crop < 32:
            raise ConfigInvalid(f"crop deve ser >= 32: {self.crop}")
        for name in ("flip_prob", "salt_fraction", "salt_image_prob", "tukey_alpha"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigInvalid(f"{name} deve estar em [0, 1]: {value}")
        if self.salt_intensity_max <= 0:
            raise ConfigInvalid("salt_intensity_max deve ser > 0")
        if not 0.0 <= self.max_rotation_deg <= 360.0:
            raise ConfigInvalid(f"max_rotation_deg deve estar em [0, 360]: {self.max_rotation_deg}")

    @classmethod
    def from_config(cls, config: dict, **overrides) -> "AugmentConfig":
        section = config.get("augmentation", {})
        known = cls.__dataclass_fields__
        values = {k: v for k, v in section.items() if k in known}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class BoundingBox:
    """Caixa inclusiva: linhas top..bottom, colunas left..right."""

    top: int
    left: int
    bottom: int
    right: int

    @classmethod
    def full_frame(cls, height: int, width: int) -> "BoundingBox":
        return cls(0, 0, height - 1, width - 1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.top + self.bottom) / 2.0, (self.left + self.right) / 2.0


# ---------------------------------------------------------------------------
# Máscara de Tukey
# ---------------------------------------------------------------------------
def _tukey_1d(n: int, alpha: float) -> np.ndarray:
    w = windows.tukey(n, alpha, sym=True)
    w = np.minimum(w, w[::-1])
    if alpha > 0 and n > 1:
        w[0] = w[-1] = 0.0
    return w


def tukey_window2d(height: int, width: int, alpha: float) -> np.ndarray:
    """Produto externo de duas janelas de Tukey 1-D. alpha = 0 é a janela retangular."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidAlpha(f"alpha deve estar em [0, 1]: {alpha}")
    return np.outer(_tukey_1d(height, alpha), _tukey_1d(width, alpha))


def mask_forces(fs: FrameSet, alpha: float = FORCE_MASK_ALPHA) -> FrameSet:
    """Multiplica cada mapa de forças pela janela de Tukey. Não é idempotente."""
    window = tukey_window2d(fs.manifest.height, fs.manifest.width, alpha)
    frames = tuple(
        SamplePair(f.input_image, (f.force_map * window).astype(np.float32)) for f in fs.frames
    )
    logger.debug(f"Máscara de Tukey (alpha={alpha}) aplicada a {len(frames)} frames")
    return replace(fs, frames=frames, masked=True)


# ---------------------------------------------------------------------------
# Extração da célula
# ---------------------------------------------------------------------------
def _foreground(image: np.ndarray) -> np.ndarray:
    positive = image[image > 0]
    if positive.size == 0:
        raise NoCellFound("imagem sem pixels positivos")
    if np.all(positive == positive[0]):
        return image > 0
    return image > threshold_otsu(positive)


def extract_cell_bbox(image: np.ndarray) -> BoundingBox:
    """
    Otsu nas intensidades positivas, fechamento e abertura com caixa 5x5,
    componentes 4-conexas; devolve a caixa da maior componente.
    """
    image = np.asarray(image, dtype=np.float64)
    pad = MORPH_KERNEL.shape[0]
    fg = np.pad(_foreground(image), pad)
    fg = ndi.binary_closing(fg, structure=MORPH_KERNEL)
    fg = ndi.binary_opening(fg, structure=MORPH_KERNEL)[pad:-pad, pad:-pad]

    labels, n = ndi.label(fg)
    if n == 0:
        raise NoCellFound("nenhuma região sobreviveu à morfologia")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    largest = int(np.argmax(sizes))
    rows, cols = ndi.find_objects(labels)[largest - 1]
    return BoundingBox(rows.start, cols.start, rows.stop - 1, cols.stop - 1)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------
def _rotate(arr: np.ndarray, angle_deg: float, center: tuple[float, float]) -> np.ndarray:
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    matrix = np.array([[c, -s], [s, c]])
    center = np.asarray(center)
    offset = center - matrix @ center
    out = ndi.affine_transform(arr.astype(np.float64), matrix, offset=offset, order=3,
                               mode="constant", cval=0.0)
    return np.maximum(out, 0.0)


def _crop(arr: np.ndarray, center_row: int, center_col: int, size: int) -> np.ndarray:
    h, w = arr.shape
    if h < size or w < size:
        arr = np.pad(arr, ((0, max(0, size - h)), (0, max(0, size - w))))
        h, w = arr.shape
    top = int(np.clip(center_row - size // 2, 0, h - size))
    left = int(np.clip(center_col - size // 2, 0, w - size))
    return arr[top:top + size, left:left + size]


def augment_sample(pair: SamplePair, cfg: AugmentConfig, rng: np.random.Generator) -> SamplePair:
    """
    Flip horizontal → flip vertical → rotação em torno do centro da célula →
    recorte crop×crop centrado num ponto uniforme da caixa da célula.
    Entrada e força recebem exatamente a mesma transformação.
    """
    hflip = rng.random() < cfg.flip_prob
    vflip = rng.random() < cfg.flip_prob
    angle = rng.uniform(0.0, cfg.max_rotation_deg)

    image, force = pair.input_image, pair.force_map
    if hflip:
        image, force = image[:, ::-1], force[:, ::-1]
    if vflip:
        image, force = image[::-1, :], force[::-1, :]

    try:
        bbox = extract_cell_bbox(image)
    except NoCellFound:
        logger.debug("Célula não encontrada. Usando o frame inteiro.")
        bbox = BoundingBox.full_frame(*image.shape)
    center_row = int(rng.integers(bbox.top, bbox.bottom + 1))
    center_col = int(rng.integers(bbox.left, bbox.right + 1))

    if angle != 0.0:
        image = _rotate(image, angle, bbox.center)
        force = _rotate(force, angle, bbox.center)

    image = _crop(np.ascontiguousarray(image), center_row, center_col, cfg.crop)
    force = _crop(np.ascontiguousarray(force), center_row, center_col, cfg.crop)
    return SamplePair(image.astype(np.float32), force.astype(np.float32))


def salt_noise(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Com probabilidade salt_image_prob, substitui round(salt_fraction·N) pixels por U[0, max)."""
    out = np.array(image, dtype=np.float32, copy=True)
    if not rng.random() < cfg.salt_image_prob:
        return out
    n = out.size
    count = int(np.rint(cfg.salt_fraction * n))
    positions = rng.choice(n, size=count, replace=False)
    values = rng.uniform(0.0, cfg.salt_intensity_max, size=count).astype(np.float32)
    # float32 pode arredondar para o limite superior
    ceiling = np.nextafter(np.float32(cfg.salt_intensity_max), np.float32(0.0))
    out.ravel()[positions] = np.minimum(values, ceiling)
    return out


def clipped_log(x):
    """ln(max(1, x)), elemento a elemento."""
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    out = np.log(np.maximum(arr, 1.0))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------
def prepare_item(fs: FrameSet, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    index = int(rng.integers(len(fs)))
    pair = augment_sample(fs.frames[index], cfg, rng)
    image = salt_noise(pair.input_image, cfg, rng)
    return clipped_log(image), clipped_log(pair.force_map)


def build_batch(
    fs: FrameSet,
    cfg: AugmentConfig,
    seed: int,
    step: int,
    batch_size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Batch (entradas, alvos em log) com shape (B, 1, crop, crop). Cada item usa
    o stream (seed, step, índice), então o resultado não depende da ordem de execução.
    """
    if len(fs) == 0:
        raise ValueError("frameset vazio")
    items = parallel_map(lambda b: prepare_item(fs, cfg, keyed_stream(seed, 0, step, b)),
                         list(range(batch_size)))
    inputs = np.stack([x for x, _ in items])[:, None].astype(np.float32)
    targets = np.stack([y for _, y in items])[:, None].astype(np.float32)
    return inputs, targets
