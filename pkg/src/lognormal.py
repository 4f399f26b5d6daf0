"""
Cálculo fechado de distribuições log-normais e de misturas de T componentes:
loss de treino, média e variância da mistura, CV, entropia e quantis.

Todas as funções são vetorizadas (numpy, float64) e puras.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import erfc

from src.errors import (
    EmptyEnsemble,
    NonPositiveMean,
    NonPositiveVariance,
    QuantileOutOfRange,
    ShapeMismatch,
    ZeroVariance,
)

_SQRT_2PI = np.sqrt(2.0 * np.pi)
SOFTPLUS_LINEAR_FROM = 30.0


@dataclass(frozen=True)
class LogNormalParams:
    """(μ, σ²) por pixel de uma log-normal prevista."""

    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if mu.shape != sigma2.shape:
            raise ShapeMismatch(f"mu {mu.shape} != sigma2 {sigma2.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma2))):
            raise ValueError("LogNormalParams com valores não finitos")
        if np.any(sigma2 < 0):
            raise NonPositiveVariance("sigma2 negativo")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)


@dataclass(frozen=True)
class MCEnsemble:
    """Saídas de T passes estocásticos para uma mesma entrada."""

    samples: tuple[LogNormalParams, ...]

    def __post_init__(self):
        samples = tuple(self.samples)
        if not samples:
            raise EmptyEnsemble("ensemble vazio (T = 0)")
        shape = samples[0].mu.shape
        for s in samples[1:]:
            if s.mu.shape != shape:
                raise ShapeMismatch(f"amostras com shapes diferentes: {shape} e {s.mu.shape}")
        object.__setattr__(self, "samples", samples)

    @classmethod
    def from_arrays(cls, mu: np.ndarray, sigma2: np.ndarray) -> "MCEnsemble":
        """mu, sigma2 com shape (T, ...)."""
        return cls(tuple(LogNormalParams(m, s) for m, s in zip(mu, sigma2)))

    @property
    def size(self) -> int:
        return len(self.samples)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.samples[0].mu.shape

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        mu = np.stack([s.mu for s in self.samples])
        sigma2 = np.stack([s.sigma2 for s in self.samples])
        return mu, sigma2


@dataclass(frozen=True)
class LossInput:
    target_logmu: np.ndarray
    pred_mu: np.ndarray
    pred_sigma2: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=np.float64) for a in
                  (self.target_logmu, self.pred_mu, self.pred_sigma2)]
        if len({a.shape for a in arrays}) != 1:
            raise ShapeMismatch("target, mu e sigma2 devem ter o mesmo shape")
        if np.any(arrays[2] <= 0):
            raise NonPositiveVariance("sigma2 previsto deve ser > 0 em todos os pixels")
        for name, arr in zip(("target_logmu", "pred_mu", "pred_sigma2"), arrays):
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return int(self.pred_mu.size)


class MixtureVariance(NamedTuple):
    var_total: np.ndarray
    var_aleatoric: np.ndarray
    var_epistemic: np.ndarray


@dataclass(frozen=True)
class PredictionMoments:
    mean: np.ndarray
    var_total: np.ndarray
    var_aleatoric: np.ndarray
    var_epistemic: np.ndarray
    cv: np.ndarray
    entropy: np.ndarray


def softplus_sq(x):
    """ln(1 + exp(x))², com assíntota x² para x > 30."""
    x = np.asarray(x, dtype=np.float64)
    safe = np.minimum(x, SOFTPLUS_LINEAR_FROM)
    out = np.where(x > SOFTPLUS_LINEAR_FROM, x * x, np.log1p(np.exp(safe)) ** 2)
    return out if out.ndim else float(out)


def loss_terms(inp: LossInput) -> tuple[float, float]:
    """Termo quadrático e termo logarítmico da loss, já divididos por n."""
    resid2 = (inp.target_logmu - inp.pred_mu) ** 2
    sq = float(np.sum(resid2 / (2.0 * inp.pred_sigma2)) / inp.n)
    log = float(np.sum(0.5 * np.log(inp.pred_sigma2)) / inp.n)
    return sq, log


def kl_lognormal_loss(inp: LossInput) -> float:
    """
    (1/n) Σ [ (μ − μ̂)² / (2σ̂²) + ½ ln σ̂² ]

    KL entre a log-normal degenerada do ground truth e a log-normal prevista,
    sem a constante de proporcionalidade.
    """
    sq, log = loss_terms(inp)
    return sq + log


def kl_lognormal_loss_grad(inp: LossInput) -> tuple[np.ndarray, np.ndarray]:
    """Gradientes analíticos (d/dμ̂, d/dσ̂²) da loss."""
    resid = inp.target_logmu - inp.pred_mu
    d_mu = -resid / inp.pred_sigma2 / inp.n
    d_sigma2 = (0.5 / inp.pred_sigma2 - resid ** 2 / (2.0 * inp.pred_sigma2 ** 2)) / inp.n
    return d_mu, d_sigma2


def mixture_mean(ens: MCEnsemble) -> np.ndarray:
    """E[y] ≈ (1/T) Σ_t exp(μ_t + σ_t²/2)"""
    mu, sigma2 = ens.stacked()
    return np.mean(np.exp(mu + sigma2 / 2.0), axis=0)


def mixture_variance(ens: MCEnsemble, clamp: bool = True) -> MixtureVariance:
    """
    Variância total da mistura = aleatórica + epistêmica.

    A epistêmica é calculada exatamente e só depois truncada em 0
    (cancelamento numérico pode gerar negativos minúsculos).
    """
    mu, sigma2 = ens.stacked()
    component_mean = np.exp(mu + sigma2 / 2.0)
    mean = np.mean(component_mean, axis=0)
    aleatoric = np.mean(np.exp(2.0 * mu + sigma2) * np.expm1(sigma2), axis=0)
    epistemic = np.mean(component_mean ** 2, axis=0) - mean ** 2
    total = aleatoric + epistemic
    if clamp:
        epistemic = np.maximum(epistemic, 0.0)
    return MixtureVariance(total, aleatoric, epistemic)


def coefficient_of_variation(ens: MCEnsemble) -> np.ndarray:
    """(1/T) Σ_t sqrt(exp(σ_t²) − 1). Ignora μ, como na fórmula original."""
    _, sigma2 = ens.stacked()
    return np.mean(np.sqrt(np.expm1(sigma2)), axis=0)


def predictive_entropy(ens: MCEnsemble) -> np.ndarray:
    """
    (1/T) Σ_t log₂(σ_t · exp(μ_t + ½) / sqrt(2π)), em bits.

    A fórmula divide por sqrt(2π); a entropia diferencial usual da log-normal
    multiplica. A diferença é uma constante de log₂(2π) bits e é mantida.
    """
    mu, sigma2 = ens.stacked()
    if np.any(sigma2 == 0):
        raise ZeroVariance("entropia indefinida: sigma2 = 0 em algum pixel")
    return np.mean(np.log2(np.sqrt(sigma2) * np.exp(mu + 0.5) / _SQRT_2PI), axis=0)


def prediction_moments(ens: MCEnsemble) -> PredictionMoments:
    var = mixture_variance(ens)
    return PredictionMoments(
        mean=mixture_mean(ens),
        var_total=var.var_total,
        var_aleatoric=var.var_aleatoric,
        var_epistemic=var.var_epistemic,
        cv=coefficient_of_variation(ens),
        entropy=predictive_entropy(ens),
    )


def moment_matched_params(mean, var) -> LogNormalParams:
    """Log-normal única com a média e a variância dadas."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(mean <= 0):
        raise NonPositiveMean("média deve ser > 0")
    if np.any(var < 0):
        raise NonPositiveVariance("variância negativa")
    sigma2 = np.log1p(var / mean ** 2)
    mu = np.log(mean) - sigma2 / 2.0
    return LogNormalParams(mu, sigma2)


# Coeficientes da aproximação racional de Acklam para Φ⁻¹.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _lower_half_inv_cdf(q: np.ndarray) -> np.ndarray:
    """Φ⁻¹ para q ∈ (0, 0.5]."""
    x = np.empty_like(q)

    tail = q < _P_LOW
    if np.any(tail):
        r = np.sqrt(-2.0 * np.log(q[tail]))
        num = ((((_C[0] * r + _C[1]) * r + _C[2]) * r + _C[3]) * r + _C[4]) * r + _C[5]
        den = (((_D[0] * r + _D[1]) * r + _D[2]) * r + _D[3]) * r + 1.0
        x[tail] = num / den

    central = ~tail
    if np.any(central):
        s = q[central] - 0.5
        r = s * s
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * s
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        x[central] = num / den

    # Um passo de Halley contra erfc leva ao erro de máquina.
    e = 0.5 * erfc(-x / math.sqrt(2.0)) - q
    u = e * _SQRT_2PI * np.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def normal_inv_cdf(q):
    """Inversa da CDF normal padrão.

    Para q > 0.5 vale f(q) == −f(1 − q) bit a bit, pois 1 − q é exato nesse
    intervalo. Para q < 0.5 a igualdade só é exata quando 1 − (1 − q) == q
    (q diádico, por exemplo); nos demais casos o erro é de poucos ulp.
    """
    q = np.asarray(q, dtype=np.float64)
    if np.any(~np.isfinite(q)) or np.any(q <= 0) or np.any(q >= 1):
        raise QuantileOutOfRange("quantil deve estar em (0, 1)")
    flat = np.atleast_1d(q).ravel()
    upper = flat > 0.5
    # 1 − q é exato para q ∈ [0.5, 1]
    lower_q = np.where(upper, 1.0 - flat, flat)
    z = _lower_half_inv_cdf(lower_q)
    z = np.where(upper, -z, z)
    z = z.reshape(np.shape(q))
    return z if z.ndim else float(z)


def lognormal_quantile(p: LogNormalParams, q: float):
    """Percent-point function: exp(μ + σ·Φ⁻¹(q))."""
    z = normal_inv_cdf(q)
    out = np.exp(p.mu + np.sqrt(p.sigma2) * z)
    return out if np.ndim(out) else float(out)


def confidence_interval(mean, var, level: float) -> tuple[np.ndarray, np.ndarray]:
    """Intervalo central de nível `level` da log-normal com momentos casados."""
    if not 0 < level < 1:
        raise QuantileOutOfRange(f"nível de confiança deve estar em (0, 1): {level}")
    params = moment_matched_params(mean, var)
    lower = lognormal_quantile(params, (1.0 - level) / 2.0)
    upper = lognormal_quantile(params, (1.0 + level) / 2.0)
    return lower, upper
