import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masked_llp.core import IntervalId
from masked_llp.detect import Detection, build_mask
from masked_llp.losses import LossMode
from masked_llp.nn import Network
from masked_llp.pipeline import sample_oracle_mask
from masked_llp.propnet import (
    ProportionParams,
    batch_loss_and_grad,
    downsample_mask,
    export_visualization,
    forward,
    forward_unmasked,
    predict,
    proportion_topology,
    ratio,
    train_proportion,
)
from masked_llp.synthgen import benchmark_samples


def constant_model(value_p=1.0, value_n=1.0, downsample=1):
    """All weights zero; the head bias sets softplus outputs to the given constants."""
    net = Network(proportion_topology(downsample))
    p = np.zeros(net.n_params)
    _, _, b_end = [sl for sl in net._slices if sl is not None][-1]
    p[b_end - 2] = math.log(math.expm1(value_p))
    p[b_end - 1] = math.log(math.expm1(value_n))
    return net.copy(p)


class TestForward:
    def test_unit_positive_map(self):
        net = constant_model(1.0, 1.0)
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[0, 0] = mask[1, 2] = mask[3, 3] = 1
        est = forward(net, np.random.default_rng(0).random((4, 4, 3)), mask)
        np.testing.assert_allclose(est.pos_map, 1.0, rtol=1e-15)
        assert est.s_p == pytest.approx(3.0, rel=1e-14)

    def test_ratio(self):
        r, deg = ratio(3.0, 1.0)
        assert r == 0.75 and not deg

    def test_empty_mask_is_degenerate(self):
        est = forward(Network(proportion_topology()), np.zeros((8, 8, 3)), np.zeros((8, 8)))
        assert est.degenerate and est.r_hat == 0.5

    def test_unmasked_equals_ones_mask(self):
        net = Network(proportion_topology(), seed=4)
        img = np.random.default_rng(1).random((16, 16, 3))
        a = forward_unmasked(net, img)
        b = forward(net, img, np.ones((16, 16)))
        assert (a.s_p, a.s_n, a.r_hat) == (b.s_p, b.s_n, b.r_hat)
        assert not a.degenerate

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mask shape"):
            forward(Network(proportion_topology()), np.zeros((8, 8, 3)), np.ones((8, 6)))

    def test_maps_are_downsampled_and_positive(self):
        est = forward_unmasked(Network(proportion_topology(2), seed=1), np.random.default_rng(2).random((16, 12, 3)))
        assert est.pos_map.shape == (8, 6)
        assert est.pos_map.min() > 0 and est.neg_map.min() > 0

    def test_predict_matches_forward(self):
        net = Network(proportion_topology(), seed=2)
        rng = np.random.default_rng(3)
        imgs = [rng.random((8, 8, 3)) for _ in range(5)]
        masks = [(rng.random((8, 8)) < 0.5).astype(np.uint8) for _ in range(5)]
        r, _ = predict(net, imgs, masks, batch=2)
        for i in range(5):
            assert r[i] == pytest.approx(forward(net, imgs[i], masks[i]).r_hat, rel=1e-12)

    def test_mask_max_pool(self):
        m = np.zeros((4, 4))
        m[1, 2] = 1
        np.testing.assert_array_equal(downsample_mask(m, 2), [[0, 1], [0, 0]])


def _toy_batch(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((2, 32, 32, 3))
    md = np.stack([downsample_mask((rng.random((32, 32)) < 0.4).astype(np.uint8), 2) for _ in range(2)])
    iv = [IntervalId.I0_1, IntervalId.I50_75]
    return x, md, iv


@pytest.mark.parametrize("mode", list(LossMode))
def test_batch_gradient_finite_differences(mode):
    net = Network(proportion_topology(), seed=5)
    x, md, iv = _toy_batch(5)
    _, grad, n = batch_loss_and_grad(net, x, md, iv, mode)
    assert n == 2
    rng = np.random.default_rng(0)
    h = 1e-5
    for i in rng.choice(net.n_params, 30, replace=False):
        e = np.zeros(net.n_params)
        e[i] = h
        lp = batch_loss_and_grad(net, x, md, iv, mode, net.params + e)[0]
        lm = batch_loss_and_grad(net, x, md, iv, mode, net.params - e)[0]
        fd = (lp - lm) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-4 * max(abs(fd), 1e-6)


@pytest.mark.invariant
def test_frozen_mask_contract():
    # a mask recomputed from detections and the same mask passed as data give identical gradients
    net = Network(proportion_topology(), seed=6)
    rng = np.random.default_rng(6)
    x = rng.random((2, 16, 16, 3))
    dets = [Detection(3, 4, 0.9), Detection(10, 11, 0.8), Detection(12, 2, 0.1)]
    stored = downsample_mask(build_mask(dets, 16, 3.0), 2)
    md1 = np.stack([stored, stored])
    md2 = np.stack([downsample_mask(build_mask(dets, 16, 3.0), 2) for _ in range(2)])
    g1 = batch_loss_and_grad(net, x, md1, [IntervalId.I1_25] * 2, LossMode.WFL)[1]
    g2 = batch_loss_and_grad(net, x, md2, [IntervalId.I1_25] * 2, LossMode.WFL)[1]
    assert g1.tobytes() == g2.tobytes()


def test_degenerate_samples_skipped():
    net = Network(proportion_topology(), seed=1)
    x = np.random.default_rng(0).random((2, 8, 8, 3))
    md = np.stack([np.zeros((4, 4)), np.ones((4, 4))])
    _, _, n = batch_loss_and_grad(net, x, md, [IntervalId.I0_1, IntervalId.I0_1], LossMode.PROP)
    assert n == 1


@pytest.fixture(scope="module")
def easy_small():
    samples = benchmark_samples("easy", 1, n_samples=40)
    return samples, [sample_oracle_mask(s, 3.0) for s in samples]


class TestTraining:
    def test_zero_epochs(self, easy_small):
        samples, masks = easy_small
        net, log_ = train_proportion(samples, masks, LossMode.WFL, ProportionParams(epochs=0, seed=3))
        assert net.digest() == Network(proportion_topology(), seed=3).digest()
        assert log_.rows == []

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            train_proportion([], [], LossMode.WFL, ProportionParams())

    def test_missing_mask(self, easy_small):
        samples, masks = easy_small
        with pytest.raises(ValueError, match="mask"):
            train_proportion(samples[:2], [masks[0], None], LossMode.WFL, ProportionParams())

    @pytest.mark.invariant
    def test_deterministic(self, easy_small):
        samples, masks = easy_small
        hp = ProportionParams(epochs=2, seed=1)
        a, _ = train_proportion(samples, masks, LossMode.WFL, hp)
        b, _ = train_proportion(samples, masks, LossMode.WFL, hp)
        assert a.digest() == b.digest()

    def test_wfl_drives_loss_down(self):
        samples = benchmark_samples("easy", 1, n_samples=100)
        masks = [sample_oracle_mask(s, 3.0) for s in samples]
        hp = ProportionParams(epochs=20, seed=0, val_fraction=0.0)
        x = np.stack([s.image for s in samples])
        md = np.stack([downsample_mask(m, 2) for m in masks])
        iv = [s.interval for s in samples]
        initial = batch_loss_and_grad(Network(proportion_topology(), seed=0), x, md, iv, LossMode.WFL)[0]
        net, log_ = train_proportion(samples, masks, LossMode.WFL, hp)
        final = batch_loss_and_grad(net, x, md, iv, LossMode.WFL)[0]
        assert final < 0.1 * initial
        assert log_.header == ("epoch", "train_loss", "val_loss", "stopped_early")


class TestVisualization:
    def test_outputs(self, tmp_path):
        net = Network(proportion_topology(2), seed=2)
        est = forward_unmasked(net, np.random.default_rng(0).random((16, 12, 3)))
        paths = export_visualization(est, tmp_path)
        side = json.loads(paths["sidecar"].read_text())
        assert abs(side["r_hat"] - side["s_p"] / (side["s_p"] + side["s_n"])) <= 1e-12
        assert side["degenerate"] is False
        for key in ("positive", "negative", "overlay"):
            assert paths[key].read_bytes().startswith(b"P6\n12 16\n")
        assert paths["mask"].read_bytes().startswith(b"P5\n12 16\n")

    def test_degenerate_sidecar(self, tmp_path):
        est = forward(Network(proportion_topology()), np.zeros((8, 8, 3)), np.zeros((8, 8)))
        paths = export_visualization(est, tmp_path)
        assert json.loads(paths["sidecar"].read_text())["degenerate"] is True


# ---------------------------------------------------------------- properties

maps = st.integers(0, 2**32 - 1)


@pytest.mark.invariant
@settings(max_examples=10000, deadline=None)
@given(maps)
def test_range_and_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    fp, fn = rng.exponential(size=(6, 6)), rng.exponential(size=(6, 6))
    m = (rng.random((6, 6)) < rng.random()).astype(float)
    r, deg = ratio((fp * m).sum(), (fn * m).sum())
    assert 0 <= r <= 1
    if m.any():
        assert 0 < r < 1 and not deg
    c = rng.uniform(1e-3, 1e3)
    r2, _ = ratio((c * fp * m).sum(), (c * fn * m).sum())
    assert r2 == pytest.approx(float(r), rel=1e-12, abs=1e-15)


@pytest.mark.invariant
@settings(max_examples=10000, deadline=None)
@given(maps)
def test_mask_growth_monotone(seed):
    rng = np.random.default_rng(seed)
    fp, fn = rng.exponential(size=(6, 6)), rng.exponential(size=(6, 6))
    m = (rng.random((6, 6)) < 0.4).astype(float)
    m[0, 0] = 1
    r, _ = ratio((fp * m).sum(), (fn * m).sum())
    grow = (fp > r * (fp + fn)) & (m == 0) & (rng.random((6, 6)) < 0.5)
    m2 = np.maximum(m, grow)
    r2, _ = ratio((fp * m2).sum(), (fn * m2).sum())
    assert r2 >= r - 1e-15


@pytest.mark.invariant
@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**16))
def test_model_estimate_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    net = Network(proportion_topology(), seed=seed)
    m = (rng.random((8, 8)) < 0.3).astype(np.uint8)
    est = forward(net, rng.random((8, 8, 3)), m)
    assert 0 <= est.r_hat <= 1
    assert est.degenerate == (not downsample_mask(m, 2).any())
