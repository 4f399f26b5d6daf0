"""
Diferenciação reversa mínima sobre arrays densos de rank 4 (batch, canal, altura, largura).

Só implementa os operadores que o modelo usa. Cada op calcula o forward com
numpy e, se houver uma Tape ativa na thread e alguma entrada exigir gradiente,
registra um nó com a função de backward correspondente.
"""

import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from src import lognormal
from src.errors import (
    InvalidRate,
    NonFiniteValue,
    NonScalarLoss,
    OddSpatialDims,
    ShapeMismatch,
)

logger = logging.getLogger(__name__)

_debug = os.getenv("TFM_DEBUG", "").strip() not in ("", "0", "false")
_local = threading.local()


def set_debug(enabled: bool) -> None:
    """Liga a checagem de NaN/Inf após cada op."""
    global _debug
    _debug = bool(enabled)


class Tensor:
    """Array float de rank 4 com flag de gradiente."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        if arr.ndim != 4:
            raise ShapeMismatch(f"Tensor exige rank 4, recebeu shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarLoss(f"item() em tensor com shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    output: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]
    op: str


@dataclass
class Tape:
    """
    Lista ordenada de ops gravadas. Pais sempre precedem filhos, então o
    backward percorre a lista em ordem reversa visitando cada nó uma vez.
    Uma tape pertence a uma única thread.
    """

    nodes: list[_Node] = field(default_factory=list)
    watched: dict[str, Tensor] = field(default_factory=dict)

    def watch(self, name: str, tensor: Tensor) -> None:
        self.watched[name] = tensor

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _local.tapes.pop()
        return False


def _active_tape() -> Optional[Tape]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        named = [p.name for p in parents if p.name]
        where = f" (entradas: {', '.join(named)})" if named else ""
        raise NonFiniteValue(f"valor não finito após {op}{where}")
    requires_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and requires_grad:
        tape.nodes.append(_Node(out, parents, backward, op))
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} e {b.shape}")


# ---------------------------------------------------------------------------
# Operadores
# ---------------------------------------------------------------------------
def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """
    Correlação cruzada 2-D. kernel (K, C, kh, kw), bias (1, K, 1, 1).
    `same` usa zero padding; `valid` não usa padding.
    """
    k_out, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernel espacial deve ser ímpar, recebeu {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ShapeMismatch(f"conv2d: entrada com {x.shape[1]} canais, kernel espera {c_in}")
    if bias.shape != (1, k_out, 1, 1):
        raise ShapeMismatch(f"conv2d: bias {bias.shape}, esperado (1, {k_out}, 1, 1)")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph, pw = 0, 0
    else:
        raise ValueError(f"padding desconhecido: {padding}")

    b, _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    h_out, w_out = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if h_out < 1 or w_out < 1:
        raise ShapeMismatch(f"conv2d: entrada {h}x{w} menor que o kernel {kh}x{kw}")

    # (B, C, Ho, Wo, kh, kw)
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, K)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data

    def backward(g: np.ndarray):
        grad_kernel = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # (K, C, kh, kw)
        grad_bias = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        grad_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))  # (B, Ho, Wo, C)
                grad_xp[:, :, i:i + h_out, j:j + w_out] += contrib.transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, ph:ph + h, pw:pw + w]
        return grad_x, grad_kernel.astype(kernel.data.dtype), grad_bias

    return _result(out.astype(x.data.dtype, copy=False), "conv2d", (x, kernel, bias), backward)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    out = np.where(active, x.data, 0).astype(x.data.dtype)

    def backward(g):
        # subgradiente 0 em x = 0
        return (g * active,)

    return _result(out, "relu", (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """ln(1 + exp(x)) estável. Calculado em float64 e convertido de volta."""
    x64 = x.data.astype(np.float64)
    out = np.logaddexp(0.0, x64).astype(x.data.dtype)

    def backward(g):
        sig = np.exp(-np.logaddexp(0.0, -x64))
        return ((g * sig).astype(x.data.dtype),)

    return _result(out, "softplus", (x,), backward)


def softplus_sq(x: Tensor) -> Tensor:
    """
    softplus(x)² fundido, calculado em float64 com a assíntota x² acima de 30.
    O resultado nunca é menor que o menor normal positivo do dtype de x.
    """
    x64 = x.data.astype(np.float64)
    sp = np.logaddexp(0.0, x64)
    floor = np.finfo(x.data.dtype).tiny
    out = np.maximum(lognormal.softplus_sq(x64).astype(x.data.dtype), floor)

    def backward(g):
        sig = np.exp(-np.logaddexp(0.0, -x64))
        slope = np.where(x64 > lognormal.SOFTPLUS_LINEAR_FROM, 2.0 * x64, 2.0 * sp * sig)
        return ((g * slope).astype(x.data.dtype),)

    return _result(np.asarray(out), "softplus_sq", (x,), backward)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def backward(g):
        return (2 * x.data * g,)

    return _result(out, "square", (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g):
        return g, g

    return _result(a.data + b.data, "add", (a, b), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"concat_channels: shapes {a.shape} e {b.shape}")
    split = a.shape[1]

    def backward(g):
        return g[:, :split], g[:, split:]

    return _result(np.concatenate([a.data, b.data], axis=1), "concat_channels", (a, b), backward)


def mean_all(x: Tensor) -> Tensor:
    """Média de todos os elementos, como tensor (1, 1, 1, 1)."""
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        return (np.full(x.shape, g.reshape(()) / n, dtype=x.data.dtype),)

    return _result(out, "mean_all", (x,), backward)


def max_pool2(x: Tensor) -> Tensor:
    """Max pooling 2x2, stride 2. Empate vai para o primeiro elemento da janela."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise OddSpatialDims(f"max_pool2 exige dimensões pares, recebeu {h}x{w}")
    windows = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(b, c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        scatter = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(scatter, arg[..., None], g[..., None], axis=-1)
        scatter = scatter.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (scatter.reshape(b, c, h, w),)

    return _result(np.ascontiguousarray(out), "max_pool2", (x,), backward)


def upsample_nn2(x: Tensor) -> Tensor:
    """Cada pixel vira um bloco 2x2, sem interpolação."""
    b, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, "upsample_nn2", (x,), backward)


def dropout(x: Tensor, rate: float, mask_rng: np.random.Generator) -> Tensor:
    """
    Dropout invertido: zera cada elemento com probabilidade `rate` e escala os
    sobreviventes por 1/(1 − rate). A máscara vem inteira do stream recebido.
    """
    if not 0 <= rate < 1:
        raise InvalidRate(f"taxa de dropout deve estar em [0, 1): {rate}")
    if rate == 0:
        return x
    keep = mask_rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    mask = keep.astype(x.data.dtype) * scale

    def backward(g):
        return (g * mask,)

    return _result(x.data * mask, "dropout", (x,), backward)


def kl_loss(mu: Tensor, sigma2: Tensor, target: np.ndarray) -> Tensor:
    """Loss KL log-normal (média sobre todos os pixels) como um único nó."""
    _check_same_shape(mu, sigma2, "kl_loss")
    inp = lognormal.LossInput(target, mu.data, sigma2.data)
    value = lognormal.kl_lognormal_loss(inp)
    out = np.asarray(value, dtype=mu.data.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        d_mu, d_sigma2 = lognormal.kl_lognormal_loss_grad(inp)
        scale = float(g.reshape(()))
        return (d_mu * scale).astype(mu.data.dtype), (d_sigma2 * scale).astype(sigma2.data.dtype)

    return _result(out, "kl_loss", (mu, sigma2), backward)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------
def backward(loss: Tensor, tape: Tape) -> dict[str, np.ndarray]:
    """
    Propaga gradientes de `loss` pela tape. Retorna {nome: gradiente} para
    todos os tensores observados, com zeros para os que não foram usados.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss deve ser escalar, recebeu shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    out = {}
    for name, tensor in tape.watched.items():
        g = grads.get(id(tensor))
        out[name] = np.zeros_like(tensor.data) if g is None else g.astype(tensor.data.dtype, copy=False)
    return out
