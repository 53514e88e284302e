"""Head forward/backward, invariants, and TAPC checkpoint container."""

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tapdetect.featurestore import TokenFeatureRecord
from tapdetect.gradcheck import gradcheck_tap
from tapdetect.linalg import ShapeError
from tapdetect.tap import (
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    LinearProbeConfig,
    LinearProbeParams,
    TapConfig,
    attention_pool,
    init_linear_probe,
    init_params,
    linear_forward,
    load_checkpoint,
    read_optimizer_state,
    residual_mlp,
    save_checkpoint,
    tap_backward,
    tap_forward,
)

CFG = TapConfig(dim=8, heads=2, mlp_hidden=16, proj_dim=8, seed=0)


def _record(tokens, label=0, tag="t"):
    return TokenFeatureRecord(label=label, tag=tag, tokens=np.asarray(tokens, dtype="<f4"))


def _random_params(cfg=CFG, seed=3, scale=0.3):
    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    for arr in params.tensors().values():
        arr += rng.normal(0.0, scale, size=arr.shape)
    return params


# -- reference implementations (straight-line, no shared code paths) --------


def ref_layer_norm(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        row = x[i].astype(np.float64)
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[i] = gamma * ((row - mu) / math.sqrt(var + eps)) + beta
    return out


def ref_attention(params, tokens):
    """Scaled dot-product cross-attention from a single query, per head."""
    d = params.q.shape[0]
    h = params.heads
    dh = d // h
    xn = ref_layer_norm(np.asarray(tokens, np.float64), params.ln_pool_gamma, params.ln_pool_beta)
    q_proj = params.q @ params.w_q + params.b_q
    k_proj = xn @ params.w_k + params.b_k
    v_proj = xn @ params.w_v + params.b_v
    out = np.zeros(d)
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        scores = np.array([q_proj[sl] @ k_proj[i, sl] for i in range(xn.shape[0])])
        scores = scores / math.sqrt(dh)
        e = np.exp(scores - scores.max())
        w = e / e.sum()
        out[sl] = sum(w[i] * v_proj[i, sl] for i in range(xn.shape[0]))
    return out @ params.w_o + params.b_o


def ref_mlp(params, z):
    u = ref_layer_norm(z[None, :], params.ln_mlp_gamma, params.ln_mlp_beta)[0]
    h1 = u @ params.w1 + params.b1
    from scipy.special import erf as _erf

    g = 0.5 * h1 * (1.0 + _erf(h1 / math.sqrt(2.0)))
    return z + g @ params.w2 + params.b2


def ref_full(params, record):
    z = ref_attention(params, record.tokens)
    zp = ref_mlp(params, z)
    gpl = zp @ params.w_proj + params.b_proj
    c = np.concatenate([np.asarray(record.tokens[0], np.float64), gpl])
    return float(c @ params.w_head[:, 0] + params.b_head[0])


# -- init -------------------------------------------------------------------


class TestInit:
    def test_same_seed_bitwise_identical(self):
        a = init_params(CFG)
        b = init_params(CFG)
        for (n1, t1), (n2, t2) in zip(a.tensors().items(), b.tensors().items()):
            assert n1 == n2
            assert t1.tobytes() == t2.tobytes()

    def test_biases_zero_gammas_one(self):
        p = init_params(CFG)
        for name in ("b_q", "b_k", "b_v", "b_o", "b1", "b2", "b_proj", "b_head",
                     "ln_pool_beta", "ln_mlp_beta"):
            assert not p.tensors()[name].any(), name
        assert (p.ln_pool_gamma == 1.0).all() and (p.ln_mlp_gamma == 1.0).all()

    def test_probe_std_near_002(self):
        p = init_params(TapConfig(dim=4096, heads=8, mlp_hidden=1, proj_dim=1, seed=12))
        std = p.q.std()
        assert 0.8 * 0.02 <= std <= 1.2 * 0.02

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            init_params(TapConfig(dim=8, heads=3))
        with pytest.raises(ValueError):
            init_params(TapConfig(dim=0, heads=1))
        with pytest.raises(ValueError):
            init_params(TapConfig(dim=8, heads=2, mlp_hidden=0))


# -- attention pool -----------------------------------------------------------


class TestAttentionPool:
    def test_single_token_attention_is_identity_weight(self):
        params = _random_params()
        tokens = np.random.default_rng(0).standard_normal((1, 8))
        z, cache = attention_pool(params, tokens)
        assert np.allclose(cache.weights, 1.0, atol=0)
        # z must equal W_o applied to the single value row
        xn = ref_layer_norm(tokens, params.ln_pool_gamma, params.ln_pool_beta)
        v = xn @ params.w_v + params.b_v
        assert np.allclose(z, v[0] @ params.w_o + params.b_o, atol=1e-12)

    def test_identical_rows_match_single_row(self):
        params = _random_params(seed=5)
        row = np.random.default_rng(1).standard_normal(8)
        z_many, _ = attention_pool(params, np.tile(row, (6, 1)))
        z_one, _ = attention_pool(params, row[None, :])
        assert np.allclose(z_many, z_one, atol=1e-12)

    def test_matches_reference_implementation(self):
        params = _random_params(seed=7)
        tokens = np.random.default_rng(2).standard_normal((7, 8))
        z, _ = attention_pool(params, tokens)
        assert np.abs(z - ref_attention(params, tokens)).max() < 1e-12

    def test_weights_sum_to_one(self):
        params = _random_params(seed=9)
        tokens = np.random.default_rng(3).standard_normal((13, 8))
        _, cache = attention_pool(params, tokens)
        assert cache.weights.shape == (2, 13)
        assert np.abs(cache.weights.sum(axis=1) - 1.0).max() <= 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            attention_pool(_random_params(), np.zeros((3, 5)))


class TestResidualMlp:
    def test_zero_mlp_is_identity(self):
        params = _random_params()
        params.w1[:] = 0
        params.w2[:] = 0
        params.b1[:] = 0
        params.b2[:] = 0
        z = np.random.default_rng(0).standard_normal(8)
        zp, _ = residual_mlp(params, z)
        assert np.array_equal(zp, z)

    def test_zero_input_bias_only(self):
        # z = 0: LN of a constant row is 0, gelu(b1=0 path) is 0, so z' = b2
        params = _random_params()
        params.w1[:] = 0
        params.b1[:] = 0
        params.b2[:] = np.arange(8.0)
        zp, _ = residual_mlp(params, np.zeros(8))
        assert np.allclose(zp, np.arange(8.0), atol=1e-15)

    def test_matches_reference(self):
        params = _random_params(seed=21)
        z = np.random.default_rng(4).standard_normal(8)
        zp, _ = residual_mlp(params, z)
        assert np.abs(zp - ref_mlp(params, z)).max() < 1e-12


class TestTapForward:
    def test_constant_head_bias(self):
        params = init_params(CFG)
        for name, arr in params.tensors().items():
            arr[:] = 0
        params.b_head[0] = 0.7
        rec = _record(np.random.default_rng(0).standard_normal((5, 8)))
        logit, _ = tap_forward(params, rec)
        assert logit == pytest.approx(0.7, abs=1e-15)

    def test_cls_only_ablation_matches_linear_probe(self):
        params = _random_params(seed=13)
        params.w_head[8:, 0] = 0.0  # mask the gpl block
        probe = LinearProbeParams(w=params.w_head[:8].copy(), b=params.b_head.copy())
        rng = np.random.default_rng(5)
        for _ in range(20):
            rec = _record(rng.standard_normal((6, 8)))
            tap_logit, _ = tap_forward(params, rec)
            lin_logit, _ = linear_forward(probe, rec)
            assert abs(tap_logit - lin_logit) < 1e-12

    def test_matches_composed_reference(self):
        params = _random_params(seed=17)
        rec = _record(np.random.default_rng(6).standard_normal((9, 8)))
        logit, _ = tap_forward(params, rec)
        assert abs(logit - ref_full(params, rec)) < 1e-12

    def test_nonfinite_intermediate_names_stage(self):
        from tapdetect.linalg import NumericalError

        params = _random_params(seed=19)
        params.w_proj[0, 0] = np.inf
        rec = _record(np.random.default_rng(7).standard_normal((4, 8)))
        with pytest.raises(NumericalError, match="projector"):
            tap_forward(params, rec)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(2, 24), seed=st.integers(0, 10**6))
    def test_permutation_invariance(self, n, seed):
        rng = np.random.default_rng(seed)
        params = _random_params(seed=seed % 97)
        tokens = rng.standard_normal((n, 8)).astype("<f4")
        logit, _ = tap_forward(params, _record(tokens))
        perm = rng.permutation(n - 1) + 1
        shuffled = np.concatenate([tokens[:1], tokens[perm]], axis=0)
        logit_p, _ = tap_forward(params, _record(shuffled))
        assert abs(logit - logit_p) < 1e-9


class TestTapBackward:
    def test_zero_cotangent(self):
        params = _random_params()
        rec = _record(np.random.default_rng(0).standard_normal((4, 8)))
        _, cache = tap_forward(params, rec)
        grads = tap_backward(params, cache, 0.0)
        for name, g in grads.tensors.items():
            assert not g.any(), name
        assert not grads.d_tokens.any()

    def test_head_bias_gradient_is_dlogit(self):
        params = _random_params(seed=2)
        rec = _record(np.random.default_rng(1).standard_normal((4, 8)))
        _, cache = tap_forward(params, rec)
        grads = tap_backward(params, cache, 1.7)
        assert grads.tensors["b_head"][0] == pytest.approx(1.7, abs=0)

    def test_full_gradcheck(self):
        res = gradcheck_tap(
            TapConfig(dim=8, heads=2, mlp_hidden=16, proj_dim=8, seed=0),
            n_tokens=9,
            seed=0,
        )
        assert res.max_rel_err < 1e-6, res.per_tensor

    def test_gradcheck_covers_every_tensor(self):
        res = gradcheck_tap(CFG, n_tokens=5, seed=1)
        missing = set(init_params(CFG).tensors()) - set(res.per_tensor)
        assert not missing
        assert "tokens" in res.per_tensor


# -- checkpoints --------------------------------------------------------------


class TestCheckpoints:
    def test_roundtrip_bitwise(self, tmp_path):
        params = _random_params(seed=23)
        path = tmp_path / "head.tapc"
        save_checkpoint(params, CFG, path)
        loaded, cfg = load_checkpoint(path)
        assert cfg == TapConfig(dim=8, heads=2, mlp_hidden=16, proj_dim=8, seed=0)
        for name, arr in params.tensors().items():
            assert arr.tobytes() == loaded.tensors()[name].tobytes(), name

    def test_resave_byte_identical(self, tmp_path):
        params = _random_params(seed=29)
        p1 = tmp_path / "a.tapc"
        p2 = tmp_path / "b.tapc"
        save_checkpoint(params, CFG, p1)
        loaded, cfg = load_checkpoint(p1)
        save_checkpoint(loaded, cfg, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_linear_probe_roundtrip(self, tmp_path):
        probe = init_linear_probe(LinearProbeConfig(dim=6))
        probe.w[:, 0] = np.arange(6.0)
        path = tmp_path / "probe.tapc"
        save_checkpoint(probe, LinearProbeConfig(dim=6), path)
        loaded, cfg = load_checkpoint(path)
        assert isinstance(loaded, LinearProbeParams)
        assert cfg == LinearProbeConfig(dim=6)
        assert np.array_equal(loaded.w, probe.w)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.tapc"
        save_checkpoint(_random_params(), CFG, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(data)
        with pytest.raises(CheckpointMagicError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "x.tapc"
        save_checkpoint(_random_params(), CFG, path)
        data = bytearray(path.read_bytes())
        data[4:6] = struct.pack("<H", 77)
        path.write_bytes(data)
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "x.tapc"
        save_checkpoint(_random_params(), CFG, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 9])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_edited_dim_header_shape_mismatch(self, tmp_path):
        path = tmp_path / "x.tapc"
        save_checkpoint(_random_params(), CFG, path)
        data = path.read_bytes()
        # config JSON is canonical, so the dim field appears verbatim
        edited = data.replace(b'"dim":8', b'"dim":4', 1)
        assert edited != data
        path.write_bytes(edited)
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path)

    def test_optimizer_state_roundtrip_bitwise(self, tmp_path):
        from tapdetect.optim import init_state

        params = _random_params(seed=31)
        state = init_state(params.tensors())
        rng = np.random.default_rng(8)
        for name in state.m:
            state.m[name] += rng.standard_normal(state.m[name].shape)
            state.v[name] += rng.random(state.v[name].shape)
        state.step = 41
        path = tmp_path / "with_state.tapc"
        save_checkpoint(params, CFG, path, opt_state=state)
        back = read_optimizer_state(path)
        assert back.step == 41
        for name in state.m:
            assert state.m[name].tobytes() == back.m[name].tobytes()
            assert state.v[name].tobytes() == back.v[name].tobytes()
        # params still load fine from a state-bearing checkpoint
        loaded, _ = load_checkpoint(path)
        assert loaded.q.tobytes() == params.q.tobytes()

    def test_state_absent_returns_none(self, tmp_path):
        path = tmp_path / "plain.tapc"
        save_checkpoint(_random_params(), CFG, path)
        assert read_optimizer_state(path) is None
