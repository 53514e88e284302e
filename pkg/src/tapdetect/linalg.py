"""Dense kernels with exact analytic backward passes.

Everything on the training path runs in float64; callers cast feature rows up
from storage precision before entering these kernels. Each backward is an
exact adjoint of its forward and is audited against central finite differences
in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate a kernel contract."""


class NumericalError(ArithmeticError):
    """A numeric quantity that must be finite is NaN or infinite."""


def _matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {a.shape}")
    return a


# -- layer normalization ------------------------------------------------


@dataclass
class LnCache:
    x_hat: np.ndarray    # (R, C) pre-affine normalized rows
    inv_std: np.ndarray  # (R, 1)
    gamma: np.ndarray    # (C,)


def layer_norm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = LN_EPS,
) -> tuple[np.ndarray, LnCache]:
    """Row-wise layer norm: y = gamma * (x - mean) / sqrt(var + eps) + beta.

    Variance is the biased per-row estimator, so pre-affine rows have mean 0
    exactly and variance var/(var + eps).
    """
    x = _matrix(x, "x")
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"gamma/beta must have shape ({x.shape[1]},), got {gamma.shape} and {beta.shape}"
        )
    mean = x.mean(axis=1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    y = gamma * x_hat + beta
    return y, LnCache(x_hat=x_hat, inv_std=inv_std, gamma=gamma)


def layer_norm_backward(
    dy: np.ndarray, cache: LnCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact adjoint of layer_norm_forward; returns (dx, dgamma, dbeta).

    Each dx row is orthogonal to the all-ones vector: normalization removes
    the row mean, so gradients cannot re-introduce one.
    """
    dy = _matrix(dy, "dy")
    if dy.shape != cache.x_hat.shape:
        raise ShapeError(f"dy shape {dy.shape} != forward shape {cache.x_hat.shape}")
    x_hat = cache.x_hat
    dgamma = (dy * x_hat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dx_hat = dy * cache.gamma
    m1 = dx_hat.mean(axis=1, keepdims=True)
    m2 = (dx_hat * x_hat).mean(axis=1, keepdims=True)
    dx = cache.inv_std * (dx_hat - m1 - x_hat * m2)
    return dx, dgamma, dbeta


# -- row softmax ---------------------------------------------------------


@dataclass
class SoftmaxCache:
    probs: np.ndarray  # (R, C)


def softmax_rows(scores: np.ndarray) -> tuple[np.ndarray, SoftmaxCache]:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    s = _matrix(scores, "scores")
    if not np.isfinite(s).all():
        raise NumericalError("softmax input contains NaN or Inf")
    shifted = s - s.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs, SoftmaxCache(probs=probs)


def softmax_backward(dprobs: np.ndarray, cache: SoftmaxCache) -> np.ndarray:
    dp = _matrix(dprobs, "dprobs")
    if dp.shape != cache.probs.shape:
        raise ShapeError(f"dprobs shape {dp.shape} != forward shape {cache.probs.shape}")
    a = cache.probs
    inner = (dp * a).sum(axis=1, keepdims=True)
    return a * (dp - inner)


# -- GELU ----------------------------------------------------------------


@dataclass
class GeluCache:
    x: np.ndarray


def gelu(x: np.ndarray) -> tuple[np.ndarray, GeluCache]:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = np.asarray(x, dtype=np.float64)
    y = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))
    return y, GeluCache(x=x)


def gelu_backward(dy: np.ndarray, cache: GeluCache) -> np.ndarray:
    x = cache.x
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != x.shape:
        raise ShapeError(f"dy shape {dy.shape} != forward shape {x.shape}")
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


# -- affine map ----------------------------------------------------------


@dataclass
class AffineCache:
    x: np.ndarray  # (R, Cin)
    w: np.ndarray  # (Cin, Cout)


def affine_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, AffineCache]:
    """y = x @ w + b on row batches."""
    x = _matrix(x, "x")
    w = _matrix(w, "w")
    b = np.asarray(b, dtype=np.float64)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"x cols {x.shape[1]} != w rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"b must have shape ({w.shape[1]},), got {b.shape}")
    return x @ w + b, AffineCache(x=x, w=w)


def affine_backward(
    dy: np.ndarray, cache: AffineCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dy = _matrix(dy, "dy")
    if dy.shape != (cache.x.shape[0], cache.w.shape[1]):
        raise ShapeError(
            f"dy shape {dy.shape} incompatible with forward shapes "
            f"{cache.x.shape} @ {cache.w.shape}"
        )
    dx = dy @ cache.w.T
    dw = cache.x.T @ dy
    db = dy.sum(axis=0)
    return dx, dw, db


def require_finite(arr: np.ndarray, stage: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite value produced at stage '{stage}'")
