"""Tunable attention pooling head over frozen encoder tokens.

The head turns one token matrix (cls row first) into a single detection logit:

1. layer-normalize all tokens, then cross-attend a learnable probe vector over
   them with multi-head scaled dot-product attention (the probe provides the
   query; the normalized tokens provide keys and values),
2. refine the pooled vector with a residual two-layer GELU MLP applied to its
   layer norm,
3. project the refined vector to the global-pooled ``gpl`` embedding,
4. classify the concatenation [raw cls token; gpl] with one affine layer.

There is no positional term anywhere, so the logit is invariant to permuting
the patch rows. The backward pass is exact; ``tap_backward`` returns the
gradient of the logit with respect to every parameter tensor (and the input
tokens).

Checkpoints use the TAPC container: magic ``TAPC``, u16 version, a
length-prefixed canonical-JSON config, then named float64 tensors. All
integers little-endian:

    u32 name length, name UTF-8, u8 ndim, u32 per axis, then float64 values.

Tensors are written in a fixed order, so save(load(file)) is byte-identical.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .featurestore import TokenFeatureRecord, atomic_write_bytes
from .linalg import (
    AffineCache,
    GeluCache,
    LnCache,
    ShapeError,
    SoftmaxCache,
    affine_backward,
    affine_forward,
    gelu,
    gelu_backward,
    layer_norm_backward,
    layer_norm_forward,
    require_finite,
    softmax_backward,
    softmax_rows,
)

CHECKPOINT_MAGIC = b"TAPC"
CHECKPOINT_VERSION = 1

PROBE_INIT_STD = 0.02


class CheckpointError(Exception):
    """Base class for TAPC container failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """Stored tensors disagree with the shapes declared by the config."""


# -- configs and parameters ----------------------------------------------


@dataclass(frozen=True)
class TapConfig:
    dim: int
    heads: int = 8
    mlp_hidden: int | None = None  # defaults to 4 * dim
    proj_dim: int | None = None    # defaults to dim
    seed: int = 0

    @property
    def mlp_hidden_resolved(self) -> int:
        return 4 * self.dim if self.mlp_hidden is None else self.mlp_hidden

    @property
    def proj_dim_resolved(self) -> int:
        return self.dim if self.proj_dim is None else self.proj_dim

    def validate(self) -> None:
        if self.dim < 1 or self.heads < 1:
            raise ValueError(f"dim and heads must be >= 1, got {self.dim}, {self.heads}")
        if self.dim % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if self.mlp_hidden_resolved < 1 or self.proj_dim_resolved < 1:
            raise ValueError("mlp_hidden and proj_dim must be >= 1")


@dataclass(frozen=True)
class LinearProbeConfig:
    """Config of the cls-only baseline: one affine layer on the raw cls token."""

    dim: int

    def validate(self) -> None:
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")


@dataclass
class TapParams:
    heads: int
    q: np.ndarray              # (D,) learnable probe
    ln_pool_gamma: np.ndarray  # (D,)
    ln_pool_beta: np.ndarray   # (D,)
    w_q: np.ndarray            # (D, D)
    b_q: np.ndarray            # (D,)
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln_mlp_gamma: np.ndarray   # (D,)
    ln_mlp_beta: np.ndarray    # (D,)
    w1: np.ndarray             # (D, M)
    b1: np.ndarray             # (M,)
    w2: np.ndarray             # (M, D)
    b2: np.ndarray             # (D,)
    w_proj: np.ndarray         # (D, P)
    b_proj: np.ndarray         # (P,)
    w_head: np.ndarray         # (D + P, 1)
    b_head: np.ndarray         # (1,)

    TENSOR_NAMES = (
        "q",
        "ln_pool_gamma", "ln_pool_beta",
        "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
        "ln_mlp_gamma", "ln_mlp_beta",
        "w1", "b1", "w2", "b2",
        "w_proj", "b_proj",
        "w_head", "b_head",
    )

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    @property
    def proj_dim(self) -> int:
        return self.b_proj.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        """Live views of every trainable tensor, in fixed order."""
        return {name: getattr(self, name) for name in self.TENSOR_NAMES}


@dataclass
class LinearProbeParams:
    w: np.ndarray  # (D, 1)
    b: np.ndarray  # (1,)

    TENSOR_NAMES = ("w", "b")

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.TENSOR_NAMES}


@dataclass
class TapGrads:
    """Gradient of the logit: one array per parameter tensor, plus d(tokens)."""

    tensors: dict[str, np.ndarray]
    d_tokens: np.ndarray | None = None


def _glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: TapConfig) -> TapParams:
    """Deterministic initialization from config.seed.

    Probe ~ Normal(0, 0.02^2); weight matrices Glorot-uniform; biases and LN
    beta zero; LN gamma one. Draw order is fixed, so equal seeds give bitwise
    equal parameters.
    """
    config.validate()
    d = config.dim
    m = config.mlp_hidden_resolved
    p = config.proj_dim_resolved
    rng = np.random.default_rng(config.seed)
    return TapParams(
        heads=config.heads,
        q=rng.normal(0.0, PROBE_INIT_STD, size=d),
        ln_pool_gamma=np.ones(d),
        ln_pool_beta=np.zeros(d),
        w_q=_glorot(rng, (d, d)),
        b_q=np.zeros(d),
        w_k=_glorot(rng, (d, d)),
        b_k=np.zeros(d),
        w_v=_glorot(rng, (d, d)),
        b_v=np.zeros(d),
        w_o=_glorot(rng, (d, d)),
        b_o=np.zeros(d),
        ln_mlp_gamma=np.ones(d),
        ln_mlp_beta=np.zeros(d),
        w1=_glorot(rng, (d, m)),
        b1=np.zeros(m),
        w2=_glorot(rng, (m, d)),
        b2=np.zeros(d),
        w_proj=_glorot(rng, (d, p)),
        b_proj=np.zeros(p),
        w_head=_glorot(rng, (d + p, 1)),
        b_head=np.zeros(1),
    )


def init_linear_probe(config: LinearProbeConfig) -> LinearProbeParams:
    """Zero-initialized affine probe (plain logistic regression on cls)."""
    config.validate()
    return LinearProbeParams(w=np.zeros((config.dim, 1)), b=np.zeros(1))


# -- forward / backward ----------------------------------------------------


@dataclass
class AttnCache:
    ln: LnCache
    q_aff: AffineCache
    k_aff: AffineCache
    v_aff: AffineCache
    o_aff: AffineCache
    softmax: SoftmaxCache
    qh: np.ndarray    # (H, dh) projected query, per head
    kh: np.ndarray    # (N, H, dh)
    vh: np.ndarray    # (N, H, dh)
    weights: np.ndarray  # (H, N) attention over tokens, rows sum to 1


@dataclass
class MlpCache:
    ln: LnCache
    a1: AffineCache
    g: GeluCache
    a2: AffineCache


@dataclass
class ForwardCache:
    tokens: np.ndarray  # (N, D) float64
    attn: AttnCache
    mlp: MlpCache
    proj_aff: AffineCache
    head_aff: AffineCache
    z: np.ndarray
    z_prime: np.ndarray
    gpl: np.ndarray
    concat: np.ndarray  # [cls; gpl], length D + P


def attention_pool(
    params: TapParams, tokens: np.ndarray
) -> tuple[np.ndarray, AttnCache]:
    """Pool all N tokens (cls row included) into one vector via the probe.

    Per head h of width dh = D/H: scores over tokens are
    (q W_q)_h . (LN(tokens) W_k)_h^T / sqrt(dh); weights are the row softmax;
    the head output is the weight-averaged (LN(tokens) W_v)_h. Heads are
    concatenated and mixed by W_o.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be 2-d, got shape {tokens.shape}")
    d = params.dim
    if tokens.shape[1] != d:
        raise ShapeError(f"tokens have dim {tokens.shape[1]}, parameters expect {d}")
    n = tokens.shape[0]
    h = params.heads
    dh = d // h

    xn, ln_cache = layer_norm_forward(tokens, params.ln_pool_gamma, params.ln_pool_beta)
    q_row, q_aff = affine_forward(params.q[None, :], params.w_q, params.b_q)
    k, k_aff = affine_forward(xn, params.w_k, params.b_k)
    v, v_aff = affine_forward(xn, params.w_v, params.b_v)

    qh = q_row.reshape(h, dh)
    kh = k.reshape(n, h, dh)
    vh = v.reshape(n, h, dh)
    scores = np.einsum("hd,nhd->hn", qh, kh) / math.sqrt(dh)
    weights, sm_cache = softmax_rows(scores)
    head_out = np.einsum("hn,nhd->hd", weights, vh)

    z_row, o_aff = affine_forward(head_out.reshape(1, d), params.w_o, params.b_o)
    cache = AttnCache(
        ln=ln_cache, q_aff=q_aff, k_aff=k_aff, v_aff=v_aff, o_aff=o_aff,
        softmax=sm_cache, qh=qh, kh=kh, vh=vh, weights=weights,
    )
    return z_row[0], cache


def attention_pool_backward(
    params: TapParams, cache: AttnCache, dz: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Adjoint of attention_pool; returns (parameter grads, d_tokens)."""
    d = params.dim
    h = params.heads
    dh = d // h
    n = cache.kh.shape[0]

    dhead_flat, dw_o, db_o = affine_backward(np.asarray(dz, dtype=np.float64)[None, :], cache.o_aff)
    dheads = dhead_flat.reshape(h, dh)

    dweights = np.einsum("hd,nhd->hn", dheads, cache.vh)
    dvh = np.einsum("hn,hd->nhd", cache.weights, dheads)
    dscores = softmax_backward(dweights, cache.softmax) / math.sqrt(dh)
    dqh = np.einsum("hn,nhd->hd", dscores, cache.kh)
    dkh = np.einsum("hn,hd->nhd", dscores, cache.qh)

    dq_row, dw_q, db_q = affine_backward(dqh.reshape(1, d), cache.q_aff)
    dxn_k, dw_k, db_k = affine_backward(dkh.reshape(n, d), cache.k_aff)
    dxn_v, dw_v, db_v = affine_backward(dvh.reshape(n, d), cache.v_aff)
    d_tokens, dgamma, dbeta = layer_norm_backward(dxn_k + dxn_v, cache.ln)

    grads = {
        "q": dq_row[0],
        "ln_pool_gamma": dgamma,
        "ln_pool_beta": dbeta,
        "w_q": dw_q, "b_q": db_q,
        "w_k": dw_k, "b_k": db_k,
        "w_v": dw_v, "b_v": db_v,
        "w_o": dw_o, "b_o": db_o,
    }
    return grads, d_tokens


def residual_mlp(params: TapParams, z: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """z' = z + W2 gelu(W1 LN(z) + b1) + b2."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (params.dim,):
        raise ShapeError(f"z must have shape ({params.dim},), got {z.shape}")
    u, ln_cache = layer_norm_forward(z[None, :], params.ln_mlp_gamma, params.ln_mlp_beta)
    h1, a1 = affine_forward(u, params.w1, params.b1)
    g, g_cache = gelu(h1)
    m, a2 = affine_forward(g, params.w2, params.b2)
    return z + m[0], MlpCache(ln=ln_cache, a1=a1, g=g_cache, a2=a2)


def residual_mlp_backward(
    params: TapParams, cache: MlpCache, dz_prime: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Adjoint of residual_mlp; returns (parameter grads, dz)."""
    dm = np.asarray(dz_prime, dtype=np.float64)[None, :]
    dg, dw2, db2 = affine_backward(dm, cache.a2)
    dh1 = gelu_backward(dg, cache.g)
    du, dw1, db1 = affine_backward(dh1, cache.a1)
    dz_ln, dgamma, dbeta = layer_norm_backward(du, cache.ln)
    dz = dz_prime + dz_ln[0]
    grads = {
        "ln_mlp_gamma": dgamma,
        "ln_mlp_beta": dbeta,
        "w1": dw1, "b1": db1,
        "w2": dw2, "b2": db2,
    }
    return grads, dz


def tap_forward(
    params: TapParams, record: TokenFeatureRecord
) -> tuple[float, ForwardCache]:
    """Full head: pooled z, refined z', gpl projection, [cls; gpl] classifier."""
    tokens = np.asarray(record.tokens, dtype=np.float64)
    z, attn_cache = attention_pool(params, tokens)
    require_finite(z, "attention_pool")
    z_prime, mlp_cache = residual_mlp(params, z)
    require_finite(z_prime, "residual_mlp")
    gpl_row, proj_aff = affine_forward(z_prime[None, :], params.w_proj, params.b_proj)
    gpl = gpl_row[0]
    require_finite(gpl, "projector")
    concat = np.concatenate([tokens[0], gpl])
    logit_row, head_aff = affine_forward(concat[None, :], params.w_head, params.b_head)
    logit = float(logit_row[0, 0])
    require_finite(logit_row, "classifier")
    cache = ForwardCache(
        tokens=tokens, attn=attn_cache, mlp=mlp_cache,
        proj_aff=proj_aff, head_aff=head_aff,
        z=z, z_prime=z_prime, gpl=gpl, concat=concat,
    )
    return logit, cache


def tap_backward(params: TapParams, cache: ForwardCache, dlogit: float) -> TapGrads:
    """Gradient of dlogit * logit w.r.t. every parameter and the tokens."""
    d = params.dim
    dconcat_row, dw_head, db_head = affine_backward(
        np.array([[float(dlogit)]]), cache.head_aff
    )
    dconcat = dconcat_row[0]
    d_cls = dconcat[:d]
    d_gpl = dconcat[d:]

    dzp_row, dw_proj, db_proj = affine_backward(d_gpl[None, :], cache.proj_aff)
    mlp_grads, dz = residual_mlp_backward(params, cache.mlp, dzp_row[0])
    attn_grads, d_tokens = attention_pool_backward(params, cache.attn, dz)

    d_tokens = d_tokens.copy()
    d_tokens[0] += d_cls

    tensors = dict(attn_grads)
    tensors.update(mlp_grads)
    tensors.update({
        "w_proj": dw_proj, "b_proj": db_proj,
        "w_head": dw_head, "b_head": db_head,
    })
    # emit in canonical parameter order
    ordered = {name: tensors[name] for name in TapParams.TENSOR_NAMES}
    return TapGrads(tensors=ordered, d_tokens=d_tokens)


def linear_forward(
    params: LinearProbeParams, record: TokenFeatureRecord
) -> tuple[float, np.ndarray]:
    """Affine probe on the raw cls token; the cache is the cls row itself."""
    cls_row = np.asarray(record.tokens[0], dtype=np.float64)
    if cls_row.shape[0] != params.dim:
        raise ShapeError(f"record dim {cls_row.shape[0]} != probe dim {params.dim}")
    logit = float(cls_row @ params.w[:, 0] + params.b[0])
    return logit, cls_row


def linear_backward(
    params: LinearProbeParams, cls_row: np.ndarray, dlogit: float
) -> TapGrads:
    return TapGrads(
        tensors={"w": dlogit * cls_row[:, None], "b": np.array([float(dlogit)])},
        d_tokens=None,
    )


def forward_logit(params: TapParams | LinearProbeParams, record: TokenFeatureRecord) -> float:
    if isinstance(params, TapParams):
        return tap_forward(params, record)[0]
    return linear_forward(params, record)[0]


# -- TAPC checkpoint container ---------------------------------------------


def _config_to_dict(config: TapConfig | LinearProbeConfig) -> dict:
    if isinstance(config, TapConfig):
        return {
            "head": "tap",
            "dim": config.dim,
            "heads": config.heads,
            "mlp_hidden": config.mlp_hidden_resolved,
            "proj_dim": config.proj_dim_resolved,
            "seed": config.seed,
        }
    return {"head": "linear", "dim": config.dim}


def _config_from_dict(d: dict) -> TapConfig | LinearProbeConfig:
    head = d.get("head")
    if head == "tap":
        return TapConfig(
            dim=int(d["dim"]),
            heads=int(d["heads"]),
            mlp_hidden=int(d["mlp_hidden"]),
            proj_dim=int(d["proj_dim"]),
            seed=int(d["seed"]),
        )
    if head == "linear":
        return LinearProbeConfig(dim=int(d["dim"]))
    raise CheckpointShapeError(f"unknown head kind {head!r}")


def expected_shapes(config: TapConfig | LinearProbeConfig) -> dict[str, tuple[int, ...]]:
    if isinstance(config, LinearProbeConfig):
        return {"w": (config.dim, 1), "b": (1,)}
    d = config.dim
    m = config.mlp_hidden_resolved
    p = config.proj_dim_resolved
    shapes: dict[str, tuple[int, ...]] = {
        "q": (d,),
        "ln_pool_gamma": (d,), "ln_pool_beta": (d,),
        "w_q": (d, d), "b_q": (d,), "w_k": (d, d), "b_k": (d,),
        "w_v": (d, d), "b_v": (d,), "w_o": (d, d), "b_o": (d,),
        "ln_mlp_gamma": (d,), "ln_mlp_beta": (d,),
        "w1": (d, m), "b1": (m,), "w2": (m, d), "b2": (d,),
        "w_proj": (d, p), "b_proj": (p,),
        "w_head": (d + p, 1), "b_head": (1,),
    }
    return shapes


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f8")
    name_b = name.encode("utf-8")
    parts = [struct.pack("<I", len(name_b)), name_b, struct.pack("<B", data.ndim)]
    for axis in data.shape:
        parts.append(struct.pack("<I", axis))
    parts.append(data.tobytes())
    return b"".join(parts)


def save_checkpoint(
    params: TapParams | LinearProbeParams,
    config: TapConfig | LinearProbeConfig,
    path: str | Path,
    opt_state: "object | None" = None,
) -> None:
    """Write a TAPC file; tensor order and config encoding are canonical.

    When an optimizer state is supplied its moment tensors are embedded under
    ``opt.m.*`` / ``opt.v.*`` names and the step counter lands in the config.
    """
    cfg = _config_to_dict(config)
    tensors = list(params.tensors().items())
    if opt_state is not None:
        cfg["opt_step"] = int(opt_state.step)
        for name, arr in opt_state.m.items():
            tensors.append((f"opt.m.{name}", arr))
        for name, arr in opt_state.v.items():
            tensors.append((f"opt.v.{name}", arr))
    cfg_bytes = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<H", CHECKPOINT_VERSION),
        struct.pack("<I", len(cfg_bytes)),
        cfg_bytes,
        struct.pack("<I", len(tensors)),
    ]
    chunks.extend(_pack_tensor(name, arr) for name, arr in tensors)
    atomic_write_bytes(Path(path), b"".join(chunks))


def _read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointTruncatedError(f"checkpoint ends inside {what}")
        out = data[pos : pos + n]
        pos += n
        return out

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"expected magic {CHECKPOINT_MAGIC!r}, got {magic!r}")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        cfg = json.loads(take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint config: {exc}") from exc
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "tensor rank"))
        shape = tuple(
            struct.unpack("<I", take(4, "tensor axis"))[0] for _ in range(ndim)
        )
        n_vals = int(np.prod(shape)) if shape else 1
        raw = take(n_vals * 8, f"tensor '{name}' data")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes in checkpoint")
    return cfg, tensors


def load_checkpoint(
    path: str | Path,
) -> tuple[TapParams | LinearProbeParams, TapConfig | LinearProbeConfig]:
    """Read a TAPC file back into (params, config), validating every shape."""
    cfg_dict, tensors = _read_container(path)
    config = _config_from_dict(cfg_dict)
    shapes = expected_shapes(config)
    fields: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise CheckpointShapeError(f"checkpoint is missing tensor '{name}'")
        if tensors[name].shape != shape:
            raise CheckpointShapeError(
                f"tensor '{name}' has shape {tensors[name].shape}, config declares {shape}"
            )
        fields[name] = tensors[name]
    extra = [n for n in tensors if n not in shapes and not n.startswith("opt.")]
    if extra:
        raise CheckpointShapeError(f"unexpected tensors in checkpoint: {extra}")
    if isinstance(config, LinearProbeConfig):
        return LinearProbeParams(**fields), config
    return TapParams(heads=config.heads, **fields), config


def read_optimizer_state(path: str | Path):
    """Reconstruct an embedded optimizer state, or None when absent."""
    from .optim import OptimizerState

    cfg_dict, tensors = _read_container(path)
    if "opt_step" not in cfg_dict:
        return None
    m = {
        name[len("opt.m."):]: arr
        for name, arr in tensors.items()
        if name.startswith("opt.m.")
    }
    v = {
        name[len("opt.v."):]: arr
        for name, arr in tensors.items()
        if name.startswith("opt.v.")
    }
    return OptimizerState(m=m, v=v, step=int(cfg_dict["opt_step"]))
