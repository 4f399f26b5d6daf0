"""
Encoder/decoder de dense blocks (família Tiramisu) com duas cabeças por pixel:
média (linear) e variância (softplus ao quadrado). Inclui o formato de checkpoint.
"""

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from src import autograd as ag
from src.autograd import Tape, Tensor
from src.errors import (
    CheckpointError,
    ChecksumMismatch,
    ConfigInvalid,
    IndivisibleInput,
)
from src.utils import atomic_write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TFMW"
CHECKPOINT_VERSION = 1

# bias da cabeça de variância: softplus(ln(e − 1))² = 1
VARIANCE_BIAS_INIT = math.log(math.e - 1.0)

PRESETS = {
    "paper": dict(down_blocks=5, layers_per_block=5, growth_rate=16,
                  first_conv_filters=48, up_conv_filters=128, dropout_rate=0.2),
    "desk": dict(down_blocks=3, layers_per_block=2, growth_rate=8,
                 first_conv_filters=16, up_conv_filters=32, dropout_rate=0.2),
}


@dataclass(frozen=True)
class ModelConfig:
    down_blocks: int
    layers_per_block: int
    growth_rate: int
    first_conv_filters: int
    up_conv_filters: int
    dropout_rate: float
    preset: str = "custom"
    in_channels: int = 1

    def __post_init__(self):
        counts = (self.down_blocks, self.layers_per_block, self.growth_rate,
                  self.first_conv_filters, self.up_conv_filters, self.in_channels)
        if any(int(c) != c or c < 1 for c in counts):
            raise ConfigInvalid(f"contagens do modelo devem ser inteiros >= 1: {self}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigInvalid(f"dropout_rate deve estar em [0, 1): {self.dropout_rate}")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigInvalid(f"preset desconhecido: {name} (opções: {sorted(PRESETS)})")
        values = {**PRESETS[name], **{k: v for k, v in overrides.items() if v is not None}}
        return cls(preset=name, **values)

    @classmethod
    def from_config(cls, config: dict, preset: Optional[str] = None) -> "ModelConfig":
        section = config.get("model", {})
        name = preset or section.get("preset", "desk")
        overrides = section.get("presets", {}).get(name, {})
        if name in PRESETS:
            return cls.from_preset(name, **overrides)
        known = {f.name for f in fields(cls)}
        return cls(preset=name, **{k: v for k, v in overrides.items() if k in known})

    @property
    def input_multiple(self) -> int:
        return 2 ** self.down_blocks


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]

    @property
    def parameter_count(self) -> int:
        return count_params(self)


# ---------------------------------------------------------------------------
# Construção
# ---------------------------------------------------------------------------
def _glorot_kernel(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    fan_in, fan_out = c_in * k * k, c_out * k * k
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32)


def _add_conv(params: dict, rng, name: str, c_in: int, c_out: int, k: int) -> None:
    params[f"{name}.kernel"] = Tensor(_glorot_kernel(rng, c_out, c_in, k), requires_grad=True,
                                      name=f"{name}.kernel")
    params[f"{name}.bias"] = Tensor(np.zeros((1, c_out, 1, 1), np.float32), requires_grad=True,
                                    name=f"{name}.bias")


def _add_dense_block(params: dict, rng, name: str, c_in: int, cfg: ModelConfig) -> int:
    c = c_in
    for layer in range(cfg.layers_per_block):
        _add_conv(params, rng, f"{name}.layer{layer}", c, cfg.growth_rate, 3)
        c += cfg.growth_rate
    return c


def build(config: ModelConfig, seed: int) -> Model:
    """
    Constrói o modelo com pesos Glorot normal a partir da seed. Biases zerados,
    exceto a cabeça de variância (kernel zero, bias ln(e − 1)).
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    _add_conv(params, rng, "conv0", config.in_channels, config.first_conv_filters, 3)
    c = config.first_conv_filters
    skips = []
    for i in range(config.down_blocks):
        c = _add_dense_block(params, rng, f"down{i}", c, config)
        skips.append(c)
        _add_conv(params, rng, f"down{i}.transition", c, c, 1)

    c = _add_dense_block(params, rng, "bottleneck", c, config)

    for i, skip_c in enumerate(reversed(skips)):
        _add_conv(params, rng, f"up{i}.conv", c, config.up_conv_filters, 3)
        c = _add_dense_block(params, rng, f"up{i}", config.up_conv_filters + skip_c, config)

    _add_conv(params, rng, "head_mu", c, 1, 1)
    params["head_sigma2.kernel"] = Tensor(np.zeros((1, c, 1, 1), np.float32), requires_grad=True,
                                          name="head_sigma2.kernel")
    params["head_sigma2.bias"] = Tensor(np.full((1, 1, 1, 1), VARIANCE_BIAS_INIT, np.float32),
                                        requires_grad=True, name="head_sigma2.bias")

    model = Model(config=config, params=params)
    logger.info(f"Modelo '{config.preset}' construído: {count_params(model)} parâmetros")
    return model


def count_params(model: Model) -> int:
    return int(sum(t.data.size for t in model.params.values()))


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------
class _Runner:
    """Aplica as camadas lendo os parâmetros por nome."""

    def __init__(self, model: Model, stream: Optional[np.random.Generator], stochastic: bool):
        self.p = model.params
        self.cfg = model.config
        self.stream = stream
        self.rate = model.config.dropout_rate if stochastic else 0.0

    def conv(self, x: Tensor, name: str) -> Tensor:
        return ag.conv2d(x, self.p[f"{name}.kernel"], self.p[f"{name}.bias"], "same")

    def drop(self, x: Tensor) -> Tensor:
        if self.rate == 0.0:
            return x
        return ag.dropout(x, self.rate, self.stream)

    def dense_block(self, x: Tensor, name: str) -> Tensor:
        features = x
        for layer in range(self.cfg.layers_per_block):
            y = self.drop(self.conv(ag.relu(features), f"{name}.layer{layer}"))
            features = ag.concat_channels(features, y)
        return features

    def run(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x = self.conv(x, "conv0")
        skips = []
        for i in range(self.cfg.down_blocks):
            x = self.dense_block(x, f"down{i}")
            skips.append(x)
            x = ag.max_pool2(self.drop(self.conv(x, f"down{i}.transition")))

        x = self.dense_block(x, "bottleneck")

        for i, skip in enumerate(reversed(skips)):
            x = self.conv(ag.upsample_nn2(x), f"up{i}.conv")
            x = self.dense_block(ag.concat_channels(x, skip), f"up{i}")

        mu = self.conv(x, "head_mu")
        sigma2 = ag.softplus_sq(self.conv(x, "head_sigma2"))
        return mu, sigma2


def forward(
    model: Model,
    batch,
    dropout_stream: Optional[np.random.Generator],
    stochastic: bool = True,
    tape: Optional[Tape] = None,
) -> tuple[Tensor, Tensor]:
    """
    Retorna (mu, sigma2) com shape (B, 1, H, W). Com stochastic=True (padrão,
    tanto no treino quanto na inferência) o dropout fica ativo. Se `tape` for
    passada, o grafo é gravado e os parâmetros ficam observados nela.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float32))
    h, w = x.shape[2:]
    m = model.config.input_multiple
    if h % m or w % m:
        raise IndivisibleInput(f"entrada {h}x{w} deve ser divisível por {m}")
    if x.shape[1] != model.config.in_channels:
        raise IndivisibleInput(f"entrada com {x.shape[1]} canais, modelo espera {model.config.in_channels}")
    if stochastic and model.config.dropout_rate > 0 and dropout_stream is None:
        raise ValueError("forward estocástico exige um dropout_stream")

    runner = _Runner(model, dropout_stream, stochastic)
    if tape is None:
        return runner.run(x)
    for name, tensor in model.params.items():
        tape.watch(name, tensor)
    with tape:
        return runner.run(x)


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------
def checkpoint_bytes(model: Model) -> bytes:
    config_blob = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(config_blob)),
        config_blob,
        struct.pack("<I", len(model.params)),
    ]
    for name, tensor in model.params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", tensor.data.ndim))
        parts.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Model, path: str | Path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, checkpoint_bytes(model))
    logger.info(f"Checkpoint salvo em {path}")
    return path


def model_from_bytes(blob: bytes, source: str = "<bytes>") -> Model:
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: não é um checkpoint TFMW")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch(f"{source}: checksum CRC-32 não confere (arquivo corrompido)")

    offset = 4

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(body):
            raise CheckpointError(f"{source}: checkpoint truncado")
        values = struct.unpack_from(fmt, body, offset)
        offset += size
        return values

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: versão {version} não suportada")
    (config_len,) = take("<I")
    config = ModelConfig(**json.loads(body[offset:offset + config_len].decode("utf-8")))
    offset += config_len

    (count,) = take("<I")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        n_bytes = 4 * math.prod(dims)
        if offset + n_bytes > len(body):
            raise CheckpointError(f"{source}: parâmetro {name} truncado")
        data = np.frombuffer(body, dtype="<f4", count=n_bytes // 4, offset=offset)
        offset += n_bytes
        params[name] = Tensor(data.astype(np.float32).reshape(dims), requires_grad=True, name=name)
    if offset != len(body):
        raise CheckpointError(f"{source}: {len(body) - offset} bytes sobrando após os parâmetros")
    return Model(config=config, params=params)


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint não encontrado: {path}")
    model = model_from_bytes(path.read_bytes(), source=str(path))
    logger.info(f"Checkpoint carregado de {path} ({count_params(model)} parâmetros)")
    return model
