import csv

import numpy as np
import pytest

from masked_llp.core import INTERVAL_ORDER, INTERVALS, IntervalId
from masked_llp.losses import (
    EPS,
    LossMode,
    curve_gradient,
    loss_for_interval,
    plot_loss_curves,
    proportion_loss,
    weighted_focal_proportion_loss,
)

# mpmath, 40 digits: 0.375*ln(0.375/0.5) + 0.625*ln(0.625/0.5)
KL_0375_05 = 0.0315839424020
# times 0.125**2
WFL_0375_05_G2 = 0.000493499100031


def central_diff(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)


class TestProportionLoss:
    def test_identity(self):
        assert proportion_loss(0.5, 0.5) == (0.0, 0.0)

    def test_golden(self):
        loss, _ = proportion_loss(0.375, 0.5)
        assert loss == pytest.approx(KL_0375_05, abs=1e-13)

    def test_narrow_midpoint(self):
        assert proportion_loss(0.005, 0.005)[0] == pytest.approx(0.0, abs=1e-18)

    def test_zero_log_zero(self):
        loss, grad = proportion_loss(0.0, 0.2)
        assert loss == pytest.approx(-np.log(0.8))
        assert grad == pytest.approx(1 / 0.8)

    def test_clamped_endpoint_is_finite(self):
        loss, grad = proportion_loss(0.5, 0.0)
        assert np.isfinite(loss) and np.isfinite(grad)
        assert grad == pytest.approx(-0.5 / EPS + 0.5 / (1 - EPS))


class TestWeightedFocal:
    @pytest.mark.parametrize("r, rh", [(0.375, 0.5), (0.005, 0.9), (0.875, 0.1)])
    def test_gamma_zero_is_proportion_loss(self, r, rh):
        assert weighted_focal_proportion_loss(r, rh, 0.0) == proportion_loss(r, rh)

    def test_golden(self):
        loss, _ = weighted_focal_proportion_loss(0.375, 0.5, 2.0)
        assert loss == pytest.approx(WFL_0375_05_G2, abs=1e-15)
        assert loss == pytest.approx(0.125**2 * KL_0375_05, rel=1e-10)

    @pytest.mark.parametrize("gamma", [0.0, 0.5, 1.0, 2.0, 3.5])
    def test_zero_at_truth(self, gamma):
        loss, grad = weighted_focal_proportion_loss(0.625, 0.625, gamma)
        assert loss == 0.0
        assert grad == 0.0

    def test_negative_gamma_rejected(self):
        with pytest.raises(ValueError):
            weighted_focal_proportion_loss(0.5, 0.4, -1.0)

    def test_vectorised(self):
        rh = np.array([0.1, 0.5, 0.9])
        loss, grad = weighted_focal_proportion_loss(0.375, rh, 2.0)
        assert loss.shape == grad.shape == (3,)
        for i, x in enumerate(rh):
            assert loss[i] == weighted_focal_proportion_loss(0.375, x, 2.0)[0]


class TestLossForInterval:
    def test_narrow_bucket_wfl_is_prop(self):
        rh = np.linspace(0.001, 0.999, 101)
        a = loss_for_interval(IntervalId.I0_1, rh, LossMode.WFL)
        b = loss_for_interval(IntervalId.I0_1, rh, LossMode.PROP)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_wide_bucket_wfl_is_focal(self):
        rh = np.linspace(0.001, 0.999, 101)
        a = loss_for_interval(IntervalId.I25_50, rh, LossMode.WFL)
        b = loss_for_interval(IntervalId.I25_50, rh, LossMode.FOCAL_PROP)
        np.testing.assert_array_equal(a[0], b[0])

    @pytest.mark.parametrize("mode", list(LossMode))
    @pytest.mark.parametrize("iid", list(IntervalId))
    def test_zero_at_midpoint(self, mode, iid):
        assert loss_for_interval(iid, INTERVALS[iid].midpoint, mode)[0] == 0.0

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            loss_for_interval(IntervalId.I0_1, 0.3, "listnet")


class TestLossCurves:
    def test_csv_shape(self, tmp_path):
        written = plot_loss_curves(tmp_path)
        with open(written["csv"]) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 5 * 2 * 999
        assert {r["mode"] for r in rows} == {"FocalProp", "WFL"}
        assert {r["interval"] for r in rows} == {i.value for i in INTERVAL_ORDER}
        assert written["png"].exists()

    def test_ppm_rendering(self, tmp_path):
        written = plot_loss_curves(tmp_path, ppm=True)
        assert written["ppm"].read_bytes()[:2] == b"P6"

    def test_uniform_gamma_flattens_narrow_bucket(self):
        narrow = abs(curve_gradient(IntervalId.I0_1, LossMode.FOCAL_PROP, 0.03))
        neighbour = abs(curve_gradient(IntervalId.I1_25, LossMode.FOCAL_PROP, 0.03))
        assert narrow < neighbour

    def test_weighted_schedule_steepens_narrow_bucket(self):
        uniform = abs(curve_gradient(IntervalId.I0_1, LossMode.FOCAL_PROP, 0.03))
        weighted = abs(curve_gradient(IntervalId.I0_1, LossMode.WFL, 0.03))
        assert weighted > uniform
        # hand oracle: d/dr_hat KL(0.005 || r_hat) at 0.03 = -0.005/0.03 + 0.995/0.97
        assert weighted == pytest.approx(-0.005 / 0.03 + 0.995 / 0.97, rel=1e-12)


# ---------------------------------------------------------------- properties

RNG = np.random.default_rng(2024)


def _random_triples(n):
    r = RNG.uniform(0, 1, n)
    rh = RNG.uniform(1e-3, 1 - 1e-3, n)
    gamma = RNG.uniform(0, 4, n)
    return r, rh, gamma


@pytest.mark.invariant
def test_non_negative():
    r, rh, gamma = _random_triples(20_000)
    r = np.concatenate([r, [0.0, 1.0]])
    rh = np.concatenate([rh, [EPS, 1 - EPS]])
    gamma = np.concatenate([gamma, [2.0, 0.0]])
    loss, _ = weighted_focal_proportion_loss(r, rh, gamma)
    assert np.all(loss >= 0)


@pytest.mark.invariant
def test_zero_set():
    for iid in IntervalId:
        for mode in LossMode:
            rh = np.linspace(0.001, 0.999, 999)
            loss, _ = loss_for_interval(iid, rh, mode)
            at_zero = rh[loss == 0.0]
            assert np.all(np.abs(at_zero - INTERVALS[iid].midpoint) < 1e-12)


@pytest.mark.invariant
def test_focal_damping():
    r, rh, _ = _random_triples(10_000)
    wfl, _ = weighted_focal_proportion_loss(r, rh, 2.0)
    kl, _ = proportion_loss(r, rh)
    assert np.all(wfl <= kl)
    np.testing.assert_allclose(wfl, (r - rh) ** 2 * kl, rtol=1e-12, atol=0)


@pytest.mark.invariant
def test_gradients_match_finite_differences():
    r, rh, gamma = _random_triples(30_000)
    keep = np.abs(r - rh) >= 1e-3
    r, rh, gamma = r[keep][:10_000], rh[keep][:10_000], gamma[keep][:10_000]
    assert len(r) == 10_000
    h = 1e-6
    _, grad = weighted_focal_proportion_loss(r, rh, gamma)
    fd = central_diff(lambda x: weighted_focal_proportion_loss(r, x, gamma)[0], rh, h)
    rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-8)
    assert rel.max() <= 1e-5


@pytest.mark.invariant
def test_reduction_identities():
    from dataclasses import replace

    from masked_llp.core import get_interval

    rh = np.linspace(EPS, 1 - EPS, 200)
    for iid in IntervalId:
        iv = get_interval(iid)
        a = loss_for_interval(iv, rh, LossMode.PROP)
        b = weighted_focal_proportion_loss(iv.midpoint, rh, 0.0)
        np.testing.assert_array_equal(a[0], b[0])
        uniform = replace(iv, gamma=2.0)
        c = loss_for_interval(uniform, rh, LossMode.WFL)
        d = loss_for_interval(iv, rh, LossMode.FOCAL_PROP)
        assert np.max(np.abs(c[0] - d[0])) <= 1e-12
