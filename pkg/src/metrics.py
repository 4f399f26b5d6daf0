"""Métricas de avaliação: MAE por frame entre a média prevista e a força mascarada."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import mean_absolute_error

from src.augmentation import FORCE_MASK_ALPHA, mask_forces
from src.errors import ShapeMismatch
from src.inference import mc_predict
from src.model import Model
from src.synth_data import FrameSet
from src.utils import write_csv

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalReport:
    """MAE por frame (unidades de força), com média e desvio padrão populacional."""

    maes: tuple[float, ...]
    name: str = "set"
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        maes = tuple(float(m) for m in self.maes)
        object.__setattr__(self, "maes", maes)
        object.__setattr__(self, "mean", float(np.mean(maes)) if maes else float("nan"))
        object.__setattr__(self, "std", float(np.std(maes)) if maes else float("nan"))


def frame_mae(predicted: np.ndarray, truth: np.ndarray) -> float:
    if predicted.shape != truth.shape:
        raise ShapeMismatch(f"predição {predicted.shape} != verdade {truth.shape}")
    return float(mean_absolute_error(np.ravel(truth).astype(np.float64),
                                     np.ravel(predicted).astype(np.float64)))


def report_from_maps(predicted: Sequence[np.ndarray], truth: Sequence[np.ndarray],
                     name: str = "set") -> EvalReport:
    if len(predicted) != len(truth):
        raise ShapeMismatch(f"{len(predicted)} predições para {len(truth)} frames")
    return EvalReport(tuple(frame_mae(p, t) for p, t in zip(predicted, truth)), name=name)


def evaluate_mae(model: Model, fs: FrameSet, samples: int, seed: int, name: str = "set",
                 tukey_alpha: float = FORCE_MASK_ALPHA) -> EvalReport:
    """Sem augmentation; a máscara de Tukey é aplicada às forças antes da comparação."""
    if not fs.masked:
        fs = mask_forces(fs, tukey_alpha)
    predicted = [
        mc_predict(model, frame.input_image, samples, seed, levels=(), frame=i).moments.mean
        for i, frame in enumerate(fs.frames)
    ]
    report = report_from_maps(predicted, [f.force_map for f in fs.frames], name=name)

    logger.info(f"=== MAE ({name}) ===")
    logger.info(f"  Frames: {len(report.maes)}")
    logger.info(f"  Média: {report.mean:.4f}")
    logger.info(f"  Desvio padrão: {report.std:.4f}")
    return report


def write_eval_csv(report: EvalReport, path: str | Path) -> None:
    """Linhas (frame_index, mae) seguidas das linhas de resumo mean e std."""
    rows = [(i, mae) for i, mae in enumerate(report.maes)]
    rows += [("mean", report.mean), ("std", report.std)]
    write_csv(path, ["frame_index", "mae"], rows)
    logger.info(f"Relatório de MAE salvo em {path}")


def read_eval_csv(path: str | Path, name: str | None = None) -> EvalReport:
    df = pd.read_csv(path, dtype={"frame_index": str}, float_precision="round_trip")
    frames = df[~df["frame_index"].isin(["mean", "std"])]
    return EvalReport(tuple(frames["mae"].astype(float)), name=name or Path(path).stem)
