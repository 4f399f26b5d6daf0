"""
Pares sintéticos (imagem de fluorescência, mapa de forças) gerados a partir da
geometria da célula, e o formato em disco dos framesets.
"""

import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from scipy import ndimage as ndi
from tqdm import tqdm

from src.errors import (
    DegenerateShape,
    DimensionMismatch,
    EmptyMask,
    InvalidSample,
    ManifestMissing,
    TruncatedFrame,
)
from src.utils import keyed_stream, parallel_map

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.yaml"
DTYPE_TAG = "f32le"
MAX_SHAPE_ATTEMPTS = 100
_THETA = np.linspace(0.0, 2.0 * np.pi, 720, endpoint=False)


# ---------------------------------------------------------------------------
# Tipos
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SamplePair:
    """Imagem de entrada e mapa de forças (magnitude da tração), mesmo shape."""

    input_image: np.ndarray
    force_map: np.ndarray

    def __post_init__(self):
        image = np.asarray(self.input_image, dtype=np.float32)
        force = np.asarray(self.force_map, dtype=np.float32)
        if image.shape != force.shape or image.ndim != 2:
            raise InvalidSample(f"shapes incompatíveis: {image.shape} e {force.shape}")
        for name, arr in (("input_image", image), ("force_map", force)):
            if not np.all(np.isfinite(arr)):
                raise InvalidSample(f"{name} contém valores não finitos")
            if np.any(arr < 0):
                raise InvalidSample(f"{name} contém valores negativos")
        object.__setattr__(self, "input_image", image)
        object.__setattr__(self, "force_map", force)

    @property
    def shape(self) -> tuple[int, int]:
        return self.input_image.shape


@dataclass(frozen=True)
class FrameManifest:
    width: int
    height: int
    frames: int
    dtype: str = DTYPE_TAG
    units: str = "force: unidades arbitrárias (0 a ~2000); input: intensidade"
    hetero: bool = False
    seed: Optional[int] = None
    generator: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FrameSet:
    manifest: FrameManifest
    frames: tuple[SamplePair, ...]
    sigma2: Optional[tuple[np.ndarray, ...]] = None
    masked: bool = False

    def __post_init__(self):
        frames = tuple(self.frames)
        shape = (self.manifest.height, self.manifest.width)
        for i, frame in enumerate(frames):
            if frame.shape != shape:
                raise DimensionMismatch(f"frame {i} tem shape {frame.shape}, manifest diz {shape}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class ShapeParams:
    """Região estrela-convexa r(θ) = r₀(1 + Σ aₖ cos(kθ + φₖ) + protrusões)."""

    center: tuple[float, float]
    base_radius: float
    amplitudes: tuple[float, ...] = ()
    phases: tuple[float, ...] = ()
    protrusion_count: int = 0
    protrusion_amplitude: float = 0.0
    protrusion_sharpness: float = 1.0
    protrusion_phase: float = 0.0

    def radius(self, theta: np.ndarray) -> np.ndarray:
        r = np.ones_like(theta)
        for k, (a, phi) in enumerate(zip(self.amplitudes, self.phases), start=1):
            r = r + a * np.cos(k * theta + phi)
        if self.protrusion_count and self.protrusion_amplitude:
            lobes = np.maximum(0.0, np.cos(self.protrusion_count * theta + self.protrusion_phase))
            r = r + self.protrusion_amplitude * lobes ** self.protrusion_sharpness
        return self.base_radius * r

    def max_extent(self) -> float:
        return float(np.max(self.radius(_THETA)))


@dataclass(frozen=True)
class SynthConfig:
    radius_range: tuple[float, float] = (0.12, 0.22)  # fração de min(H, W)
    harmonics: int = 6
    harmonic_amplitude: float = 0.22
    protrusion_range: tuple[int, int] = (2, 5)
    protrusion_amplitude: float = 0.25
    protrusion_sharpness: float = 4.0
    force_amplitude: float = 1500.0
    force_decay: float = 4.0
    interior_intensity: float = 800.0
    background_intensity: float = 20.0
    texture_amplitude: float = 0.25
    texture_scale: float = 6.0
    blur_sigma: float = 1.0
    frames_per_cell: int = 10
    drift: float = 0.4  # pixels por frame
    phase_rate: float = 0.03  # rad por frame
    hetero_scale: float = 0.3

    def __post_init__(self):
        if not 1 <= self.harmonics <= 8:
            raise ValueError(f"harmonics deve estar em [1, 8]: {self.harmonics}")

    @classmethod
    def from_config(cls, config: dict) -> "SynthConfig":
        section = dict(config.get("synthesis", {}))
        for key in ("radius_range", "protrusion_range"):
            if key in section:
                section[key] = tuple(section[key])
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in section.items() if k in known})


# ---------------------------------------------------------------------------
# Geometria
# ---------------------------------------------------------------------------
def rasterize_shape(params: ShapeParams, height: int, width: int) -> np.ndarray:
    """Máscara binária da região, reduzida à maior componente 4-conexa."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy, dx = yy - params.center[0], xx - params.center[1]
    inside = np.hypot(dy, dx) <= params.radius(np.arctan2(dy, dx))
    labels, n = ndi.label(inside)
    if n <= 1:
        return inside
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def draw_shape_params(rng: np.random.Generator, height: int, width: int,
                      cfg: SynthConfig = SynthConfig()) -> ShapeParams:
    """Sorteia parâmetros com raio positivo em todos os ângulos."""
    side = min(height, width)
    for attempt in range(MAX_SHAPE_ATTEMPTS):
        r0 = rng.uniform(*cfg.radius_range) * side
        ks = np.arange(1, cfg.harmonics + 1)
        amplitudes = rng.uniform(0.0, cfg.harmonic_amplitude, size=cfg.harmonics) / ks
        phases = rng.uniform(0.0, 2.0 * np.pi, size=cfg.harmonics)
        protrusions = int(rng.integers(cfg.protrusion_range[0], cfg.protrusion_range[1] + 1))
        protrusion_phase = rng.uniform(0.0, 2.0 * np.pi)
        params = ShapeParams(
            center=(height / 2.0, width / 2.0),
            base_radius=float(r0),
            amplitudes=tuple(float(a) for a in amplitudes),
            phases=tuple(float(p) for p in phases),
            protrusion_count=protrusions,
            protrusion_amplitude=cfg.protrusion_amplitude,
            protrusion_sharpness=cfg.protrusion_sharpness,
            protrusion_phase=float(protrusion_phase),
        )
        if np.min(params.radius(_THETA)) > 0:
            extent = params.max_extent() + 2.0
            cy = rng.uniform(min(extent, height / 2.0), max(height - extent, height / 2.0))
            cx = rng.uniform(min(extent, width / 2.0), max(width - extent, width / 2.0))
            return replace(params, center=(float(cy), float(cx)))
        logger.debug(f"Forma degenerada na tentativa {attempt + 1}. Sorteando de novo.")
    raise DegenerateShape(f"raio não positivo após {MAX_SHAPE_ATTEMPTS} tentativas")


def generate_shape(rng: np.random.Generator, height: int, width: int,
                   cfg: SynthConfig = SynthConfig()) -> tuple[ShapeParams, np.ndarray]:
    params = draw_shape_params(rng, height, width, cfg)
    mask = rasterize_shape(params, height, width)
    if not mask.any():
        raise DegenerateShape("máscara vazia")
    return params, mask


def geometry_force_field(mask: np.ndarray, amplitude: float, decay: float) -> np.ndarray:
    """
    F(p) = A·exp(−d(p)/τ) dentro da máscara, d = distância euclidiana exata até o
    pixel de fundo mais próximo (a borda do frame conta como fundo). Zero fora.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("máscara sem pixels")
    d = ndi.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    force = np.where(mask, amplitude * np.exp(-d / decay), 0.0)
    return force.astype(np.float32)


def cell_force_amplitude(mask: np.ndarray, cfg: SynthConfig) -> float:
    """Amplitude cresce com a área da célula: forma e tamanho determinam a força."""
    side = min(mask.shape)
    ref_radius = 0.5 * (cfg.radius_range[0] + cfg.radius_range[1]) * side
    ratio = math.sqrt(mask.sum() / (math.pi * ref_radius ** 2))
    return cfg.force_amplitude * float(np.clip(ratio, 0.5, 1.5))


def render_fluorescence(mask: np.ndarray, rng: np.random.Generator,
                        cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    """
    Interior com textura suave (±25%) sobre a intensidade base, fundo com
    ruído de Poisson, blur gaussiano de 1 px. A imagem não codifica a força,
    só a geometria.
    """
    mask = np.asarray(mask, dtype=bool)
    texture = ndi.gaussian_filter(rng.standard_normal(mask.shape), sigma=cfg.texture_scale)
    peak = np.max(np.abs(texture))
    if peak > 0:
        texture = texture / peak
    interior = cfg.interior_intensity * (1.0 + cfg.texture_amplitude * texture)
    exterior = rng.poisson(cfg.background_intensity, size=mask.shape).astype(np.float64)
    image = np.where(mask, interior, exterior)
    image = ndi.gaussian_filter(image, sigma=cfg.blur_sigma)
    return np.maximum(image, 0.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Séries temporais
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class CellTrack:
    """Forma base que deriva linearmente e gira devagar ao longo dos frames."""

    shape: ShapeParams
    velocity: tuple[float, float]
    phase_rate: float

    def at(self, t: int, height: int, width: int) -> ShapeParams:
        extent = self.shape.max_extent() + 2.0
        cy = self.shape.center[0] + self.velocity[0] * t
        cx = self.shape.center[1] + self.velocity[1] * t
        cy = float(np.clip(cy, min(extent, height / 2.0), max(height - extent, height / 2.0)))
        cx = float(np.clip(cx, min(extent, width / 2.0), max(width - extent, width / 2.0)))
        phases = tuple(p + (k + 1) * self.phase_rate * t for k, p in enumerate(self.shape.phases))
        return replace(
            self.shape,
            center=(cy, cx),
            phases=phases,
            protrusion_phase=self.shape.protrusion_phase + self.phase_rate * t,
        )


def _draw_track(seed: int, cell: int, height: int, width: int, cfg: SynthConfig) -> CellTrack:
    rng = keyed_stream(seed, 0, cell)
    shape = draw_shape_params(rng, height, width, cfg)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    rate = rng.uniform(-cfg.phase_rate, cfg.phase_rate)
    return CellTrack(
        shape=shape,
        velocity=(cfg.drift * math.sin(angle), cfg.drift * math.cos(angle)),
        phase_rate=float(rate),
    )


def synthesize_frame(track: CellTrack, t: int, rng: np.random.Generator, height: int, width: int,
                     cfg: SynthConfig, hetero: bool) -> tuple[SamplePair, Optional[np.ndarray]]:
    mask = rasterize_shape(track.at(t, height, width), height, width)
    if not mask.any():
        raise DegenerateShape(f"máscara vazia no frame {t}")
    amplitude = cell_force_amplitude(mask, cfg)
    force = geometry_force_field(mask, amplitude, cfg.force_decay).astype(np.float64)
    image = render_fluorescence(mask, rng, cfg)

    sigma2 = None
    if hetero:
        sigma2 = np.where(mask, cfg.hetero_scale * force / amplitude, 0.0)
        force = force * np.exp(np.sqrt(sigma2) * rng.standard_normal(mask.shape))
        sigma2 = sigma2.astype(np.float32)
    return SamplePair(image, force.astype(np.float32)), sigma2


def synthesize_frameset(
    frames: int,
    height: int,
    width: int,
    seed: int,
    hetero: bool = False,
    cfg: SynthConfig = SynthConfig(),
) -> FrameSet:
    """Frameset sintético: função pura de (seed, parâmetros). Frames gerados em paralelo."""
    if frames < 1:
        raise ValueError("frames deve ser >= 1")
    per_cell = max(1, cfg.frames_per_cell)
    n_cells = math.ceil(frames / per_cell)
    tracks = [_draw_track(seed, c, height, width, cfg) for c in range(n_cells)]

    def make(index: int):
        track = tracks[index // per_cell]
        return synthesize_frame(track, index % per_cell, keyed_stream(seed, 1, index),
                                height, width, cfg, hetero)

    results = parallel_map(make, list(range(frames)))
    manifest = FrameManifest(
        width=width, height=height, frames=frames, hetero=hetero, seed=seed,
        generator={**_plain(asdict(cfg)), "cells": n_cells},
    )
    return FrameSet(
        manifest=manifest,
        frames=tuple(pair for pair, _ in results),
        sigma2=tuple(s for _, s in results) if hetero else None,
    )


def _plain(values: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}


# ---------------------------------------------------------------------------
# Formato em disco
# ---------------------------------------------------------------------------
FRAME_KINDS = ("input", "force", "sigma2")


def _frame_path(directory: Path, kind: str, index: int) -> Path:
    return directory / f"{kind}_{index:04d}.raw"


def write_frameset(fs: FrameSet, directory: str | Path) -> Path:
    """manifest.yaml + input_0000.raw… + force_0000.raw… (float32 little-endian, row-major)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for kind in FRAME_KINDS:
        for stale in directory.glob(f"{kind}_[0-9][0-9][0-9][0-9].raw"):
            stale.unlink()
    for i, frame in enumerate(tqdm(fs.frames, desc="Gravando frames", leave=False)):
        _frame_path(directory, "input", i).write_bytes(frame.input_image.astype("<f4").tobytes())
        _frame_path(directory, "force", i).write_bytes(frame.force_map.astype("<f4").tobytes())
        if fs.sigma2 is not None:
            _frame_path(directory, "sigma2", i).write_bytes(fs.sigma2[i].astype("<f4").tobytes())

    manifest = asdict(fs.manifest)
    manifest["frames"] = len(fs.frames)
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=False, allow_unicode=True)
    logger.info(f"Frameset salvo em {directory} ({len(fs.frames)} frames)")
    return directory


def _check_sizes(directory: Path, kind: str, count: int, expected: int) -> None:
    sizes = []
    for i in range(count):
        path = _frame_path(directory, kind, i)
        sizes.append(os.path.getsize(path) if path.exists() else 0)
    if count and len(set(sizes)) == 1 and sizes[0] != expected and sizes[0] > 0:
        raise DimensionMismatch(
            f"{kind}: todos os arquivos têm {sizes[0]} bytes, manifest implica {expected}"
        )
    for i, size in enumerate(sizes):
        if size < expected:
            raise TruncatedFrame(i, str(_frame_path(directory, kind, i)), expected, size)
        if size > expected:
            raise DimensionMismatch(
                f"{_frame_path(directory, kind, i)} tem {size} bytes, esperado {expected}"
            )


def _read_map(path: Path, height: int, width: int) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float32).reshape(height, width)


def read_frameset(directory: str | Path) -> FrameSet:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise ManifestMissing(f"Manifest não encontrado em {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    known = FrameManifest.__dataclass_fields__
    manifest = FrameManifest(**{k: v for k, v in raw.items() if k in known})
    if manifest.dtype != DTYPE_TAG:
        raise DimensionMismatch(f"dtype {manifest.dtype!r} não suportado (esperado {DTYPE_TAG})")

    h, w, n = manifest.height, manifest.width, manifest.frames
    expected = h * w * 4
    kinds = ["input", "force"] + (["sigma2"] if manifest.hetero else [])
    for kind in kinds:
        _check_sizes(directory, kind, n, expected)

    frames = tuple(
        SamplePair(_read_map(_frame_path(directory, "input", i), h, w),
                   _read_map(_frame_path(directory, "force", i), h, w))
        for i in range(n)
    )
    sigma2 = None
    if manifest.hetero:
        sigma2 = tuple(_read_map(_frame_path(directory, "sigma2", i), h, w) for i in range(n))
    logger.info(f"Frameset lido de {directory}: {n} frames {h}x{w}")
    return FrameSet(manifest=manifest, frames=frames, sigma2=sigma2)
