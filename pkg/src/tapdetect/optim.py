"""AdamW with decoupled weight decay, plus the iteration-based LR schedule.

The update, per tensor, with step counter t already incremented:

    m <- beta1 * m + (1 - beta1) * g
    v <- beta2 * v + (1 - beta2) * g^2
    m_hat = m / (1 - beta1^t);  v_hat = v / (1 - beta2^t)
    theta <- theta - lr_t * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)

Decay is decoupled: it never flows through the moments, so with zero
gradients the trajectory is exactly theta_0 * prod(1 - lr_t * wd).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import NumericalError


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_state(params: dict[str, np.ndarray]) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(arr) for name, arr in params.items()},
        v={name: np.zeros_like(arr) for name, arr in params.items()},
        step=0,
    )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    hyper: AdamWHyper,
    lr_t: float,
) -> None:
    """One in-place AdamW step over every named tensor."""
    if lr_t < 0:
        raise ValueError(f"lr_t must be >= 0, got {lr_t}")
    if set(params) != set(grads):
        raise ValueError(
            f"parameter/gradient name mismatch: {sorted(set(params) ^ set(grads))}"
        )
    state.step += 1
    t = state.step
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {theta.shape} for '{name}'"
            )
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in tensor '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= lr_t * (m_hat / (np.sqrt(v_hat) + hyper.eps) + hyper.weight_decay * theta)


SCHEDULES = ("warmup-cosine", "constant")

WARMUP_FRACTION = 0.05


def lr_at(schedule: str, iteration: int, total_iters: int, base_lr: float) -> float:
    """Learning rate for one iteration of an iteration-indexed run.

    ``warmup-cosine`` ramps linearly from 0 over the first 5% of iterations
    (rounded; skipped entirely when it rounds to zero) and then follows a
    half-cosine from base_lr down toward 0. ``constant`` is base_lr
    throughout.
    """
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule {schedule!r}, expected one of {SCHEDULES}")
    if total_iters < 1:
        raise ValueError(f"total_iters must be >= 1, got {total_iters}")
    if not (0 <= iteration < total_iters):
        raise ValueError(f"iteration {iteration} out of range [0, {total_iters})")
    if schedule == "constant":
        return base_lr
    warmup = round(WARMUP_FRACTION * total_iters)
    if iteration < warmup:
        return base_lr * iteration / warmup
    span = total_iters - warmup
    progress = (iteration - warmup) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
