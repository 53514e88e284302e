"""Finite-difference audit of the analytic backward pass.

The analytic gradient of the logit is compared, tensor by tensor, against
central finite differences of the forward pass. The numeric side never touches
the backward code, so agreement is evidence, not tautology.

The per-tensor figure is a scaled infinity norm:

    rel_err(T) = max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)

where floor is one thousandth of the largest gradient entry anywhere in the
model. The floor matters for one tensor only: the key-projection bias has an
identically zero gradient (softmax is shift-invariant, so a per-head constant
added to every key moves nothing), and without a floor its figure would be
finite-difference noise divided by rounding noise.

Parameters are randomly perturbed around their init (biases and layer-norm
affines included) so no other tensor sits at a symmetric point with a
vanishing gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .featurestore import TokenFeatureRecord
from .tap import TapConfig, init_params, tap_backward, tap_forward

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-6


def finite_difference_grad(
    f: Callable[[], float], tensor: np.ndarray, h: float = DEFAULT_STEP
) -> np.ndarray:
    """Central differences of scalar f with respect to one tensor, in place.

    Entries are perturbed and restored one at a time; f must read the tensor
    through the same reference.
    """
    grad = np.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12
) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


@dataclass
class GradcheckResult:
    per_tensor: dict[str, float]
    max_rel_err: float
    worst_tensor: str


def gradcheck_tap(
    config: TapConfig,
    n_tokens: int,
    seed: int,
    h: float = DEFAULT_STEP,
    check_tokens: bool = True,
) -> GradcheckResult:
    """Audit every parameter tensor (and optionally the input tokens)."""
    params = init_params(config)
    rng = np.random.default_rng(seed)
    for arr in params.tensors().values():
        arr += rng.normal(0.0, 0.1, size=arr.shape)
    tokens = rng.standard_normal((n_tokens, config.dim)).astype("<f4")
    record = TokenFeatureRecord(label=1, tag="gradcheck", tokens=tokens)

    _, cache = tap_forward(params, record)
    analytic = tap_backward(params, cache, 1.0)

    def logit() -> float:
        return tap_forward(params, record)[0]

    numeric_grads: dict[str, np.ndarray] = {}
    for name, tensor in params.tensors().items():
        numeric_grads[name] = finite_difference_grad(logit, tensor, h)
    global_scale = max(
        max(np.abs(analytic.tensors[n]).max(), np.abs(numeric_grads[n]).max())
        for n in numeric_grads
    )
    floor = max(1e-12, 1e-3 * global_scale)
    per_tensor = {
        name: relative_error(analytic.tensors[name], numeric_grads[name], floor)
        for name in numeric_grads
    }

    if check_tokens:
        # float32 storage cannot hold the +-h perturbation accurately; audit
        # the token gradient through a float64 copy of the record instead.
        tokens64 = np.asarray(record.tokens, dtype=np.float64)
        rec64 = TokenFeatureRecord(label=1, tag="gradcheck", tokens=tokens64)

        def logit64() -> float:
            return tap_forward(params, rec64)[0]

        numeric = finite_difference_grad(logit64, tokens64, h)
        assert analytic.d_tokens is not None
        per_tensor["tokens"] = relative_error(analytic.d_tokens, numeric, floor)

    worst = max(per_tensor, key=per_tensor.get)
    return GradcheckResult(
        per_tensor=per_tensor,
        max_rel_err=per_tensor[worst],
        worst_tensor=worst,
    )
