"""
Loop de otimização: batches aumentados, forward com dropout ativo, loss KL
log-normal nos alvos em log, weight decay L2, clipping global e Adam.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from src import autograd as ag
from src import lognormal
from src.audit_logger import AuditLogger
from src.augmentation import AugmentConfig, build_batch
from src.autograd import Tape, Tensor
from src.errors import (
    ConfigInvalid,
    DataError,
    NonFiniteGradient,
    NonFiniteLoss,
    ShapeMismatch,
)
from src.model import Model, forward, save_checkpoint
from src.synth_data import FrameSet
from src.utils import keyed_stream, parallel_map, write_csv

logger = logging.getLogger(__name__)

TRAIN_PRESETS = {
    "paper": dict(epochs=200, steps_per_epoch=50, batch_size=8, crop=256),
    "desk": dict(epochs=5, steps_per_epoch=20, batch_size=4, crop=64),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    steps_per_epoch: int
    batch_size: int
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    seed: int = 0
    crop: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    preset: str = "custom"

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "batch_size", "crop"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} deve ser >= 1: {getattr(self, name)}")
        if self.clip_norm <= 0:
            raise ConfigInvalid(f"clip_norm deve ser > 0: {self.clip_norm}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigInvalid("learning_rate deve ser > 0 e weight_decay >= 0")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in TRAIN_PRESETS:
            raise ConfigInvalid(f"preset desconhecido: {name} (opções: {sorted(TRAIN_PRESETS)})")
        values = {**TRAIN_PRESETS[name], **{k: v for k, v in overrides.items() if v is not None}}
        return cls(preset=name, **values)

    @classmethod
    def from_config(cls, config: dict, preset: Optional[str] = None, **overrides) -> "TrainConfig":
        section = config.get("training", {})
        name = preset or section.get("preset", "desk")
        known = cls.__dataclass_fields__
        values = {k: v for k, v in section.items() if k in known and k != "preset"}
        values.update(section.get("presets", {}).get(name, {}))
        values.update({k: v for k, v in overrides.items() if v is not None})
        if name in TRAIN_PRESETS:
            return cls.from_preset(name, **values)
        return cls(preset=name, **values)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros(t.data.shape, np.float64) for k, t in params.items()},
            v={k: np.zeros(t.data.shape, np.float64) for k, t in params.items()},
        )


@dataclass
class TrainResult:
    history: pd.DataFrame
    checkpoint_path: Optional[Path]
    steps: int


# ---------------------------------------------------------------------------
# Otimizador
# ---------------------------------------------------------------------------
def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """
    Se a norma L2 global passar de max_norm, reescala todos os gradientes por
    max_norm/norma. Devolve (gradientes, norma antes do clipping).
    """
    if max_norm <= 0:
        raise ConfigInvalid(f"max_norm deve ser > 0: {max_norm}")
    total = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradiente não finito em {name}")
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def _params_of(model) -> Mapping[str, Tensor]:
    return model.params if isinstance(model, Model) else model


def adam_step(model, grads: Mapping[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> tuple[float, bool]:
    """
    Um passo: g ← g + λθ, clipping global, Adam com correção de viés.
    Atualiza parâmetros e estado no lugar. Devolve (norma pré-clip, clipou?).
    """
    params = _params_of(model)
    if set(grads) != set(params):
        raise ShapeMismatch("gradientes e parâmetros com nomes diferentes")

    decayed = {}
    for name, tensor in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != tensor.data.shape:
            raise ShapeMismatch(f"{name}: gradiente {g.shape}, parâmetro {tensor.data.shape}")
        decayed[name] = g + cfg.weight_decay * tensor.data.astype(np.float64)

    clipped, norm = clip_gradients(decayed, cfg.clip_norm)

    state.step += 1
    bias1 = 1.0 - cfg.beta1 ** state.step
    bias2 = 1.0 - cfg.beta2 ** state.step
    for name, tensor in params.items():
        g = clipped[name]
        m = state.m.setdefault(name, np.zeros(g.shape, np.float64))
        v = state.v.setdefault(name, np.zeros(g.shape, np.float64))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
        tensor.data = (tensor.data.astype(np.float64) - update).astype(tensor.data.dtype)
    return norm, norm > cfg.clip_norm


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------
def sample_loss_and_grads(model: Model, image: np.ndarray, target: np.ndarray,
                          stream: np.random.Generator) -> tuple[float, float, float, dict]:
    """Grafo de uma amostra: (loss, termo quadrático, termo log, gradientes)."""
    tape = Tape()
    mu, sigma2 = forward(model, image, stream, stochastic=True, tape=tape)
    with tape:
        loss = ag.kl_loss(mu, sigma2, target)
    sq, log = lognormal.loss_terms(lognormal.LossInput(target, mu.data, sigma2.data))
    return loss.item(), sq, log, ag.backward(loss, tape)


def train_step(model: Model, inputs: np.ndarray, targets: np.ndarray, seed: int,
               step: int) -> tuple[float, float, float, dict]:
    """Média sobre o batch; amostras em paralelo, redução na ordem dos índices."""
    batch = inputs.shape[0]
    results = parallel_map(
        lambda b: sample_loss_and_grads(model, inputs[b:b + 1], targets[b:b + 1],
                                        keyed_stream(seed, 1, step, b)),
        list(range(batch)),
    )
    loss = sum(r[0] for r in results) / batch
    sq = sum(r[1] for r in results) / batch
    log = sum(r[2] for r in results) / batch
    grads = {}
    for name in model.params:
        total = results[0][3][name].astype(np.float64)
        for r in results[1:]:
            total = total + r[3][name]
        grads[name] = total / batch
    return loss, sq, log, grads


def train(
    model: Model,
    fs: FrameSet,
    train_cfg: TrainConfig,
    aug_cfg: AugmentConfig,
    checkpoint_path: Optional[str | Path] = None,
    audit: Optional[AuditLogger] = None,
    progress: bool = True,
) -> TrainResult:
    """Treina no lugar. O resultado é função pura de (modelo inicial, frameset, configs)."""
    if not fs.masked:
        raise DataError("frameset sem máscara de Tukey nas forças (use mask_forces na ingestão)")

    state = AdamState.zeros(model.params)
    rows = []
    total = train_cfg.total_steps
    logger.info(
        f"Treino: {train_cfg.epochs} épocas x {train_cfg.steps_per_epoch} steps, "
        f"batch {train_cfg.batch_size}, crop {aug_cfg.crop}, lr {train_cfg.learning_rate}"
    )
    bar = tqdm(total=total, desc="Treinando", disable=not progress)
    for epoch in range(train_cfg.epochs):
        for s in range(train_cfg.steps_per_epoch):
            step = epoch * train_cfg.steps_per_epoch + s + 1
            started = time.perf_counter()
            inputs, targets = build_batch(fs, aug_cfg, train_cfg.seed, step, train_cfg.batch_size)
            loss, sq, log, grads = train_step(model, inputs, targets, train_cfg.seed, step)
            if not math.isfinite(loss):
                bar.close()
                raise NonFiniteLoss(step, loss)
            norm, clipped = adam_step(model, grads, state, train_cfg)

            rows.append({"step": step, "epoch": epoch + 1, "loss": loss,
                         "loss_sq": sq, "loss_log": log, "grad_norm": norm})
            if audit is not None:
                audit.log(step, epoch + 1, loss, sq, log, norm, clipped,
                          (time.perf_counter() - started) * 1000)
            bar.update(1)
            bar.set_postfix(loss=f"{loss:.4f}")
        epoch_rows = rows[-train_cfg.steps_per_epoch:]
        logger.info(f"Época {epoch + 1}: loss média {np.mean([r['loss'] for r in epoch_rows]):.4f}")
    bar.close()

    history = pd.DataFrame(rows, columns=["step", "epoch", "loss", "loss_sq", "loss_log", "grad_norm"])
    saved = save_checkpoint(model, checkpoint_path) if checkpoint_path is not None else None
    return TrainResult(history=history, checkpoint_path=saved, steps=total)


def write_loss_csv(history: pd.DataFrame, path: str | Path) -> None:
    write_csv(path, ["step", "epoch", "loss"],
              history[["step", "epoch", "loss"]].itertuples(index=False, name=None))
