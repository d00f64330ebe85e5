import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshalign.correlation import (
    CorrelationVolume,
    ccl,
    correlation_channels,
    correlation_volume,
    cost_volume,
    cost_volume_channels,
    feature_flow,
    scale_softmax,
)
from meshalign.features import FeatureMap, l2_normalize


def unit_map(rng, c, h, w, nonneg=False):
    data = rng.standard_normal((c, h, w))
    if nonneg:
        data = np.abs(data)
    return l2_normalize(FeatureMap(data))


def brute_correlation(fr, ft, k):
    """Direct patch-sum loop: one entry per (reference cell, target cell)."""
    c, h, w = fr.shape
    r = k // 2
    out = np.zeros((h, w, h * w))
    for yr in range(h):
        for xr in range(w):
            for idx in range(h * w):
                yt, xt = divmod(idx, w)
                acc = 0.0
                for j in range(-r, r + 1):
                    for i in range(-r, r + 1):
                        ya, xa, yb, xb = yr + j, xr + i, yt + j, xt + i
                        if 0 <= ya < h and 0 <= xa < w and 0 <= yb < h and 0 <= xb < w:
                            acc += sum(fr[ch, ya, xa] * ft[ch, yb, xb] for ch in range(c))
                out[yr, xr, idx] = acc
    return out


def brute_cost(fr, ft, radius):
    c, h, w = fr.shape
    side = 2 * radius + 1
    out = np.zeros((h, w, side * side))
    for y in range(h):
        for x in range(w):
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    if 0 <= y + dy < h and 0 <= x + dx < w:
                        out[y, x, (dy + radius) * side + dx + radius] = fr[:, y, x] @ ft[:, y + dy, x + dx]
    return out


@given(
    seed=st.integers(0, 2**16),
    c=st.integers(1, 6),
    h=st.integers(1, 6),
    w=st.integers(1, 6),
    k=st.sampled_from([1, 3, 5]),
)
def test_correlation_matches_brute_force(seed, c, h, w, k):
    rng = np.random.default_rng(seed)
    fr, ft = unit_map(rng, c, h, w), unit_map(rng, c, h, w)
    vol = correlation_volume(fr, ft, k)
    assert vol.kind == "raw" and vol.channels == h * w
    np.testing.assert_allclose(vol.data, brute_correlation(fr.data, ft.data, k), atol=1e-6)


def test_k1_distinct_one_hot_maps():
    h, w = 3, 4
    data = np.eye(h * w).reshape(h * w, h, w)
    f = FeatureMap(data, normalized=True)
    vol = correlation_volume(f, f, 1).data.reshape(h * w, h * w)
    np.testing.assert_allclose(vol, np.eye(h * w))
    assert np.all(vol.argmax(axis=1) == np.arange(h * w))


def test_k3_range_for_nonnegative_features(rng):
    for _ in range(10):
        fr, ft = unit_map(rng, 5, 7, 6, nonneg=True), unit_map(rng, 5, 7, 6, nonneg=True)
        vol = correlation_volume(fr, ft, 3).data
        assert vol.min() >= 0.0 and vol.max() <= 9.0 + 1e-12
    # signed features keep the magnitude bound
    fr, ft = unit_map(rng, 5, 7, 6), unit_map(rng, 5, 7, 6)
    assert np.abs(correlation_volume(fr, ft, 3).data).max() <= 9.0 + 1e-12


def test_correlation_input_errors(rng):
    a, b = unit_map(rng, 3, 4, 4), unit_map(rng, 3, 4, 5)
    with pytest.raises(ValueError):
        correlation_volume(a, b, 3)
    with pytest.raises(ValueError):
        correlation_volume(a, a, 2)
    with pytest.raises(ValueError):
        correlation_volume(FeatureMap(a.data), a, 3)
    with pytest.raises(ValueError):
        cost_volume(FeatureMap(a.data), a, 1)
    with pytest.raises(ValueError):
        cost_volume(a, a, -1)


def test_cost_volume_examples(rng):
    v = np.array([0.6, 0.8, 0.0])
    f = FeatureMap(np.broadcast_to(v[:, None, None], (3, 5, 5)).copy(), normalized=True)
    cv = cost_volume(f, f, 1)
    np.testing.assert_allclose(cv[..., 4], 1.0)
    fr, ft = unit_map(rng, 3, 5, 5), unit_map(rng, 3, 5, 5)
    np.testing.assert_allclose(cost_volume(fr, ft, 0)[..., 0], np.einsum("chw,chw->hw", fr.data, ft.data))
    np.testing.assert_allclose(cost_volume(fr, ft, 2), brute_cost(fr.data, ft.data, 2), atol=1e-6)


def test_softmax_examples():
    flat = CorrelationVolume(np.full((2, 2, 4), 3.0))
    for alpha in (0.5, 10.0, 100.0):
        np.testing.assert_allclose(scale_softmax(flat, alpha).data, 0.25)
    vec = CorrelationVolume(np.array([1.0, 0.9, 0.2, 0.5]).reshape(1, 1, 4))
    assert scale_softmax(vec, 100.0).data.max() >= 0.999
    big = CorrelationVolume(np.array([9.0, 0.0, -9.0]).reshape(1, 1, 3))
    p = scale_softmax(big, 1000.0)
    assert np.all(np.isfinite(p.data)) and p.kind == "probability"
    with pytest.raises(ValueError):
        scale_softmax(vec, 0.0)
    with pytest.raises(ValueError):
        scale_softmax(p, 10.0)


@given(seed=st.integers(0, 2**16), n=st.integers(2, 30))
def test_softmax_sharpens_monotonically(seed, n):
    raw = np.random.default_rng(seed).uniform(0, 9, n)
    top2 = np.sort(raw)[-2:]
    if top2[1] - top2[0] < 1e-9:
        return
    prev_max, prev_ent = -1.0, np.inf
    for alpha in (1.0, 5.0, 10.0, 50.0):
        p = scale_softmax(CorrelationVolume(raw.reshape(1, 1, n)), alpha).data.ravel()
        assert abs(p.sum() - 1) < 1e-9
        assert p.argmax() == raw.argmax()
        ent = -np.sum(p[p > 0] * np.log(p[p > 0]))
        assert p.max() >= prev_max - 1e-12
        assert ent <= prev_ent + 1e-9
        prev_max, prev_ent = p.max(), ent


def _one_hot(h, w, targets):
    p = np.zeros((h, w, h * w))
    for (r, c), k in targets.items():
        p[r, c, k] = 1.0
    return CorrelationVolume(p, kind="probability")


def test_flow_one_hot_cases():
    h, w = 3, 5
    own = {(r, c): r * w + c for r in range(h) for c in range(w)}
    assert np.all(feature_flow(_one_hot(h, w, own)).data == 0.0)
    moved = dict(own)
    moved[(1, 2)] = 1 * w + 4
    flow = feature_flow(_one_hot(h, w, moved))
    assert tuple(flow.data[1, 2]) == (2.0, 0.0)
    split = np.zeros((h, w, h * w))
    split[..., 0] = 1.0
    split[0, 0] = 0.0
    split[0, 0, 0] = split[0, 0, 2] = 0.5
    assert tuple(feature_flow(CorrelationVolume(split, "probability")).data[0, 0]) == (1.0, 0.0)
    with pytest.raises(ValueError):
        feature_flow(CorrelationVolume(split, "raw"))


@given(seed=st.integers(0, 2**16))
def test_flow_bounds(seed):
    rng = np.random.default_rng(seed)
    h, w = 4, 6
    p = rng.random((h, w, h * w))
    p /= p.sum(axis=-1, keepdims=True)
    flow = feature_flow(CorrelationVolume(p, "probability"))
    assert np.abs(flow.horizontal).max() <= w - 1 + 1e-12
    assert np.abs(flow.vertical).max() <= h - 1 + 1e-12


def test_ccl_equals_composition(rng):
    fr, ft = unit_map(rng, 4, 6, 7), unit_map(rng, 4, 6, 7)
    fused = ccl(fr, ft, 3, 10.0)
    composed = feature_flow(scale_softmax(correlation_volume(fr, ft, 3), 10.0))
    np.testing.assert_allclose(fused.data, composed.data, atol=1e-10)


def test_ccl_identical_maps_give_near_zero_flow(rng):
    f = unit_map(rng, 8, 10, 10)
    flow = ccl(f, f, 3, 10.0).data
    assert np.abs(flow[1:-1, 1:-1]).max() < 0.05


def test_ccl_recovers_circular_shift(rng):
    f = unit_map(rng, 8, 12, 12)
    shifted = FeatureMap(np.roll(f.data, 2, axis=2), normalized=True)
    flow = ccl(f, shifted, 3, 10.0).data
    interior = flow[1:-1, 1:-4]
    assert np.abs(interior[..., 0] - 2.0).max() < 0.1
    assert np.abs(interior[..., 1]).max() < 0.1


def test_ccl_zero_maps_give_center_of_mass_offsets():
    z = FeatureMap(np.zeros((3, 4, 5)), normalized=True)
    flow = ccl(z, z, 3, 10.0).data
    rows, cols = np.mgrid[0:4, 0:5]
    np.testing.assert_allclose(flow[..., 0], 2.0 - cols, atol=1e-12)
    np.testing.assert_allclose(flow[..., 1], 1.5 - rows, atol=1e-12)


def test_channel_formulas():
    assert cost_volume_channels(16) == 1089
    assert correlation_channels(16) == 256
    for n in (1, 8, 16, 32, 64, 1000):
        assert correlation_channels(n) / cost_volume_channels(n) < 0.25
