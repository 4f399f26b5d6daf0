"""
Predição por MC dropout: T passes estocásticos por frame, momentos da mistura
log-normal, intervalos de confiança e o diretório de predição em disco.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import yaml
from tqdm import tqdm

from src import lognormal
from src.augmentation import FORCE_MASK_ALPHA, clipped_log, mask_forces
from src.errors import DataError, EmptyEnsemble, ManifestMissing, PixelOutOfBounds
from src.model import Model, forward
from src.synth_data import FrameSet, read_frameset
from src.utils import atomic_write_text, keyed_stream, parallel_map

logger = logging.getLogger(__name__)

MOMENT_KINDS = ("mean", "var_total", "var_aleatoric", "var_epistemic", "cv", "entropy")
PREDICTION_META = "prediction.yaml"
HEATMAP_DIR = "heatmaps"


def level_tag(level: float) -> str:
    return f"{level:g}"


@dataclass(frozen=True)
class Prediction:
    moments: lognormal.PredictionMoments
    intervals: dict[float, tuple[np.ndarray, np.ndarray]]
    samples: int

    @property
    def levels(self) -> list[float]:
        return list(self.intervals)

    def maps(self) -> dict[str, np.ndarray]:
        """Todos os mapas por nome, na ordem do diretório de predição."""
        out = {kind: getattr(self.moments, kind) for kind in MOMENT_KINDS}
        for level, (lower, upper) in self.intervals.items():
            out[f"lower_{level_tag(level)}"] = lower
            out[f"upper_{level_tag(level)}"] = upper
        return out


def mc_predict(
    model: Model,
    image: np.ndarray,
    samples: int,
    seed: int,
    levels: Sequence[float] = (0.5, 0.9),
    frame: int = 0,
) -> Prediction:
    """
    Aplica o log truncado à imagem crua e roda `samples` passes com dropout
    ativo, cada um no stream (seed, frame, t).
    """
    if samples < 1:
        raise EmptyEnsemble(f"número de passes MC deve ser >= 1: {samples}")
    x = clipped_log(np.asarray(image, dtype=np.float32))[None, None].astype(np.float32)

    def one_pass(t: int):
        mu, sigma2 = forward(model, x, keyed_stream(seed, frame, t), stochastic=True)
        return mu.data[0, 0].astype(np.float64), sigma2.data[0, 0].astype(np.float64)

    passes = parallel_map(one_pass, list(range(samples)))
    ensemble = lognormal.MCEnsemble.from_arrays(
        np.stack([mu for mu, _ in passes]), np.stack([s2 for _, s2 in passes])
    )
    moments = lognormal.prediction_moments(ensemble)
    intervals = {
        float(level): lognormal.confidence_interval(moments.mean, moments.var_total, level)
        for level in levels
    }
    return Prediction(moments=moments, intervals=intervals, samples=samples)


def predict_frameset(model: Model, fs: FrameSet, samples: int, seed: int,
                     levels: Sequence[float] = (0.5, 0.9), progress: bool = True) -> list[Prediction]:
    return [
        mc_predict(model, frame.input_image, samples, seed, levels, frame=i)
        for i, frame in enumerate(tqdm(fs.frames, desc="Predição MC", disable=not progress))
    ]


# ---------------------------------------------------------------------------
# Diretório de predição
# ---------------------------------------------------------------------------
def _pgm_bytes(values: np.ndarray, lo: float, hi: float) -> bytes:
    h, w = values.shape
    if hi > lo:
        scaled = np.rint((values - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(values)
    pixels = np.clip(scaled, 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_prediction_dir(predictions: Sequence[Prediction], out_dir: str | Path, meta: dict) -> Path:
    """
    Mapas crus <kind>_NNNN.raw (float32 LE), heatmaps PGM 8-bit com escala
    global por tipo em heatmaps/scale.json, e prediction.yaml.
    """
    out_dir = Path(out_dir)
    heat_dir = out_dir / HEATMAP_DIR
    heat_dir.mkdir(parents=True, exist_ok=True)
    if not predictions:
        raise DataError("nenhuma predição para gravar")

    all_maps = [p.maps() for p in predictions]
    kinds = list(all_maps[0])
    scale = {
        kind: {"min": float(min(m[kind].min() for m in all_maps)),
               "max": float(max(m[kind].max() for m in all_maps))}
        for kind in kinds
    }
    for i, maps in enumerate(all_maps):
        for kind in kinds:
            values = maps[kind]
            (out_dir / f"{kind}_{i:04d}.raw").write_bytes(values.astype("<f4").tobytes())
            (heat_dir / f"{kind}_{i:04d}.pgm").write_bytes(
                _pgm_bytes(values, scale[kind]["min"], scale[kind]["max"])
            )
    atomic_write_text(heat_dir / "scale.json", json.dumps(scale, indent=2, sort_keys=True))

    first = predictions[0].moments.mean
    info = {
        **meta,
        "frames": len(predictions),
        "mc_samples": predictions[0].samples,
        "levels": [float(level) for level in predictions[0].levels],
        "height": int(first.shape[0]),
        "width": int(first.shape[1]),
        "kinds": kinds,
    }
    atomic_write_text(out_dir / PREDICTION_META, yaml.safe_dump(info, sort_keys=False))
    logger.info(f"Predição salva em {out_dir} ({len(predictions)} frames, {len(kinds)} mapas/frame)")
    return out_dir


def read_prediction_meta(pred_dir: str | Path) -> dict:
    path = Path(pred_dir) / PREDICTION_META
    if not path.exists():
        raise ManifestMissing(f"{PREDICTION_META} não encontrado em {pred_dir}")
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f)


def read_prediction_map(pred_dir: str | Path, kind: str, frame: int, meta: dict) -> np.ndarray:
    path = Path(pred_dir) / f"{kind}_{frame:04d}.raw"
    expected = meta["height"] * meta["width"] * 4
    blob = path.read_bytes()
    if len(blob) != expected:
        raise DataError(f"{path} tem {len(blob)} bytes, esperado {expected}")
    return np.frombuffer(blob, dtype="<f4").reshape(meta["height"], meta["width"]).astype(np.float32)


# ---------------------------------------------------------------------------
# Série temporal de um pixel
# ---------------------------------------------------------------------------
def series_columns(levels: Sequence[float]) -> list[str]:
    columns = ["frame_index", "truth", "mean"]
    for level in levels:
        columns += [f"lower_{level_tag(level)}", f"upper_{level_tag(level)}"]
    return columns + ["entropy_bits"]


def check_pixel(pixel: tuple[int, int], width: int, height: int) -> tuple[int, int]:
    x, y = pixel
    if not (0 <= x < width and 0 <= y < height):
        raise PixelOutOfBounds(pixel, width, height)
    return int(x), int(y)


def pixel_timeseries(
    model: Model,
    fs: FrameSet,
    pixel: tuple[int, int],
    samples: int,
    levels: Sequence[float],
    seed: int,
    tukey_alpha: float = FORCE_MASK_ALPHA,
) -> pd.DataFrame:
    """Verdade (força mascarada), média, limites por nível e entropia de um pixel (x, y) por frame."""
    x, y = check_pixel(pixel, fs.manifest.width, fs.manifest.height)
    if not fs.masked:
        fs = mask_forces(fs, tukey_alpha)
    rows = []
    for i, frame in enumerate(fs.frames):
        pred = mc_predict(model, frame.input_image, samples, seed, levels, frame=i)
        row = [i, float(frame.force_map[y, x]), float(pred.moments.mean[y, x])]
        for level in levels:
            lower, upper = pred.intervals[float(level)]
            row += [float(lower[y, x]), float(upper[y, x])]
        rows.append(row + [float(pred.moments.entropy[y, x])])
    return pd.DataFrame(rows, columns=series_columns(levels))


def pixel_series_from_predictions(pred_dir: str | Path, pixel: tuple[int, int]) -> pd.DataFrame:
    """Mesma série lida de um diretório de predição; a verdade vem do frameset registrado nele."""
    meta = read_prediction_meta(pred_dir)
    x, y = check_pixel(pixel, meta["width"], meta["height"])
    levels = meta["levels"]
    fs = mask_forces(read_frameset(meta["data"]), meta.get("tukey_alpha", FORCE_MASK_ALPHA))
    rows = []
    for i in range(meta["frames"]):
        row = [i, float(fs.frames[i].force_map[y, x]),
               float(read_prediction_map(pred_dir, "mean", i, meta)[y, x])]
        for level in levels:
            for side in ("lower", "upper"):
                row.append(float(read_prediction_map(pred_dir, f"{side}_{level_tag(level)}", i, meta)[y, x]))
        row.append(float(read_prediction_map(pred_dir, "entropy", i, meta)[y, x]))
        rows.append(row)
    return pd.DataFrame(rows, columns=series_columns(levels))
