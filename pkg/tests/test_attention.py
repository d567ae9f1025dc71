import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxseq import tensor as T
from ctxseq.attention import (AttentionParams, FocusConfig, attend, attend_causal, causal_mask,
                              focused_scores, gaussian_window)
from ctxseq.errors import ConfigError, DimensionError
from ctxseq.metrics import attention_stats
from ctxseq.tensor import Tensor


def random_params(rng, d, value_proj=True, heads=1):
    mats = [Tensor(rng.normal(size=(d, d)) / math.sqrt(d), requires_grad=True) for _ in range(4)]
    if not value_proj:
        mats[2] = mats[3] = None
    return AttentionParams(*mats, n_heads=heads)


def reference_attention(q, k, v, pq, pk, pv=None, po=None, heads=1, mask=None, scaled=False):
    """Loop-by-loop reimplementation with no shared code."""
    n, d = q.shape
    m = k.shape[0]
    dh = d // heads
    qp, kp = q @ pq, k @ pk
    vp = v @ pv if pv is not None else v
    out = np.zeros((n, d))
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        for i in range(n):
            s = [sum(qp[i, c] * kp[j, c] for c in range(lo, hi)) for j in range(m)]
            if scaled:
                s = [x / math.sqrt(dh) for x in s]
            visible = [j for j in range(m) if mask is None or mask[i, j]]
            top = max(s[j] for j in visible)
            w = {j: math.exp(s[j] - top) for j in visible}
            z = sum(w.values())
            for j in visible:
                out[i, lo:hi] += (w[j] / z) * vp[j, lo:hi]
    return out @ po if po is not None else out


# ---------------------------------------------------------------------------
# plain attention
# ---------------------------------------------------------------------------

def test_dual_implementation_seed_7():
    rng = np.random.default_rng(7)
    q, k, v = rng.normal(size=(2, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    p = random_params(rng, 2, value_proj=False)
    out, rec = attend(Tensor(q), Tensor(k), Tensor(v), p)
    ref = reference_attention(q, k, v, p.P_Q.data, p.P_K.data)
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(rec.alpha.sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("heads,value_proj,scaled", [(1, True, False), (2, True, True), (4, False, False)])
def test_dual_implementation_random(seed, heads, value_proj, scaled):
    rng = np.random.default_rng(seed)
    n, m, d = rng.integers(1, 5), rng.integers(1, 6), 4
    q, k, v = rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.normal(size=(m, d))
    mask = rng.random((n, m)) < 0.7
    mask[:, 0] = True
    p = random_params(rng, d, value_proj, heads)
    out, _ = attend(Tensor(q), Tensor(k), Tensor(v), p, mask=mask, scaled_dot=scaled)
    arrays = [x.data if x is not None else None for x in (p.P_Q, p.P_K, p.P_V, p.P_O)]
    ref = reference_attention(q, k, v, *arrays, heads=heads, mask=mask, scaled=scaled)
    np.testing.assert_allclose(out.data, ref, rtol=1e-10, atol=1e-12)


def test_single_key_returns_its_value():
    rng = np.random.default_rng(0)
    p = random_params(rng, 3, value_proj=False)
    v = rng.normal(size=(1, 3))
    out, rec = attend(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(1, 3))), Tensor(v), p)
    np.testing.assert_allclose(out.data, np.repeat(v, 4, axis=0))
    np.testing.assert_array_equal(rec.alpha, np.ones((4, 1)))


def test_identical_keys_average_values():
    rng = np.random.default_rng(1)
    p = random_params(rng, 3, value_proj=False)
    key = rng.normal(size=(1, 3))
    v = rng.normal(size=(5, 3))
    out, _ = attend(Tensor(rng.normal(size=(2, 3))), Tensor(np.repeat(key, 5, axis=0)), Tensor(v), p)
    np.testing.assert_allclose(out.data, np.repeat(v.mean(axis=0, keepdims=True), 2, axis=0), atol=1e-12)


def test_shape_errors():
    rng = np.random.default_rng(2)
    p = random_params(rng, 4)
    with pytest.raises(DimensionError):
        attend(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))), p)
    with pytest.raises(DimensionError):
        attend(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))), p)
    with pytest.raises(DimensionError):
        AttentionParams(Tensor(np.ones((4, 4))), Tensor(np.ones((4, 3))))
    with pytest.raises(ConfigError):
        AttentionParams(Tensor(np.ones((4, 4))), Tensor(np.ones((4, 4))), n_heads=3)


@pytest.mark.parametrize("seed", range(20))
def test_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 4, heads=2)
    q, k = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 4)))
    w = rng.normal(size=(3, 4))

    def loss(x):
        out, _ = attend(q, x, x, p)
        return (out * w).sum()
    assert T.finite_diff_check(loss, Tensor(k.data.copy(), requires_grad=True)) < 1e-4
    assert T.finite_diff_check(lambda pq: (attend(q, k, k, AttentionParams(pq, p.P_K, p.P_V, p.P_O, 2))[0] * w).sum(),
                               Tensor(p.P_Q.data.copy(), requires_grad=True)) < 1e-4


# ---------------------------------------------------------------------------
# causal attention
# ---------------------------------------------------------------------------

def test_causal_toy_alpha():
    rng = np.random.default_rng(3)
    p = random_params(rng, 2)
    _, rec = attend_causal(Tensor(rng.normal(size=(3, 2))), p)
    alpha = rec.alpha
    assert np.array_equal(alpha[0], [1.0, 0.0, 0.0])
    assert np.all(np.triu(alpha, 1) == 0.0)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_causal_prefix_invariance(seed):
    rng = np.random.default_rng(seed)
    n, t = 6, int(rng.integers(0, 5))
    p = random_params(rng, 4, heads=2)
    x = rng.normal(size=(n, 4))
    y = x.copy()
    y[t + 1:] += rng.normal(size=(n - t - 1, 4))
    a, _ = attend_causal(Tensor(x), p)
    b, _ = attend_causal(Tensor(y), p)
    assert np.array_equal(a.data[:t + 1], b.data[:t + 1])


def test_causal_mask_shape():
    assert np.array_equal(causal_mask(3), [[1, 0, 0], [1, 1, 0], [1, 1, 1]])


# ---------------------------------------------------------------------------
# focused context attention
# ---------------------------------------------------------------------------

def test_focus_disabled_is_bit_identical():
    z = Tensor(np.random.default_rng(4).normal(size=(5, 5)))
    cfg = FocusConfig(tau=4.0, sigma=3.0)
    assert np.array_equal(focused_scores(z, cfg).data, T.softmax_rows(z).data)


def test_focus_vanishing_modifications():
    z = Tensor(np.random.default_rng(5).normal(size=(4, 4)))
    cfg = FocusConfig(tau=1.0, sigma=1e9, enable_temperature=True, enable_window=True)
    np.testing.assert_allclose(focused_scores(z, cfg).data, T.softmax_rows(z).data, atol=1e-15)


def test_temperature_32_is_nearly_one_hot():
    a = focused_scores(Tensor([[1.0, 2.0]]), FocusConfig(tau=32.0, enable_temperature=True)).data
    np.testing.assert_allclose(a, [[math.exp(-32) / (1 + math.exp(-32)), 1 / (1 + math.exp(-32))]], rtol=1e-12)


def test_window_matches_hand_formula():
    z = np.random.default_rng(6).normal(size=(4, 4))
    a = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    i, j = np.indices((4, 4))
    w = a * np.exp(-((i - j) ** 2) / 2.0 ** 2)
    expect = w / w.sum(axis=1, keepdims=True)
    got = focused_scores(Tensor(z), FocusConfig(sigma=2.0, enable_window=True)).data
    np.testing.assert_allclose(got, expect, rtol=1e-12)
    assert np.all(np.diag(gaussian_window(4, 4, 2.0)) == 1.0)


def test_focus_rejects_nonpositive():
    with pytest.raises(ConfigError):
        FocusConfig(tau=0.0)
    with pytest.raises(ConfigError):
        FocusConfig(sigma=-1.0)


def entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_entropy_decreases_with_temperature(seed):
    row = np.random.default_rng(seed).normal(size=(1, 7))
    ents = [entropy(focused_scores(Tensor(row), FocusConfig(tau=t, enable_temperature=True)).data)
            for t in (1, 2, 4, 32)]
    assert all(a > b for a, b in zip(ents, ents[1:]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([40.0, 80.0, 100.0]))
def test_window_raises_local_mass(seed, sigma):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 160))
    z = Tensor(rng.normal(size=(n, n)) * 3)
    plain = focused_scores(z, FocusConfig(sigma=sigma, enable_temperature=True, tau=2.0))
    windowed = focused_scores(z, FocusConfig(sigma=sigma, enable_temperature=True, enable_window=True, tau=2.0))
    labels = "S" * n
    for r in (1, 5, int(sigma // 2), int(sigma)):
        assert attention_stats([windowed.data], labels, r).win_attn >= attention_stats([plain.data], labels, r).win_attn - 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_focused_gradients(seed):
    rng = np.random.default_rng(seed)
    cfg = FocusConfig(tau=2.0, sigma=2.0, enable_temperature=True, enable_window=True)
    w = rng.normal(size=(5, 5))
    mask = np.ones((5, 5), dtype=bool)
    mask[:, 4] = False
    theta = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
    assert T.finite_diff_check(lambda s: (focused_scores(s, cfg, mask) * w).sum(), theta) < 1e-5
