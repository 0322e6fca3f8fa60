import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plumeflow.diffusion import RolloutPlan
from plumeflow.metrics import (
    MetricReport,
    all_metrics,
    evaluate_rollout,
    mae,
    mse,
    parse_report_csv,
    psnr,
    rmse,
    ssim,
    summary_table,
)


def ssim_direct(x, y, L, size=11, sigma=1.5):
    """Explicit double loop over window positions and window cells."""
    h, w = x.shape
    size = min(size, h, w)
    c = (size - 1) / 2.0
    wts = np.array([[math.exp(-((i - c) ** 2 + (j - c) ** 2) / (2 * sigma**2)) for j in range(size)]
                    for i in range(size)])
    wts /= wts.sum()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for r in range(h - size + 1):
        for s in range(w - size + 1):
            px = x[r:r + size, s:s + size]
            py = y[r:r + size, s:s + size]
            mx, my = (wts * px).sum(), (wts * py).sum()
            vx = (wts * (px - mx) ** 2).sum()
            vy = (wts * (py - my) ** 2).sum()
            cov = (wts * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


images = arrays(np.float64, (2, 12, 12), elements=st.floats(0, 1))


class TestPointwise:
    def test_simple_values(self):
        p, t = np.array([0.0, 2.0]), np.array([1.0, 0.0])
        assert mse(p, t) == 2.5
        assert mae(p, t) == 1.5
        assert rmse(p, t) == math.sqrt(2.5)

    def test_psnr_value_and_cap(self):
        p, t = np.zeros(4), np.full(4, 0.1)
        assert psnr(p, t, 1.0) == pytest.approx(20.0)
        assert psnr(t, t, 1.0) == 100.0
        with pytest.raises(ValueError):
            psnr(p, t, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse(np.zeros(3), np.zeros(4))

    @settings(max_examples=30, deadline=None)
    @given(images, images)
    def test_symmetry(self, a, b):
        for fn in (mse, mae, rmse):
            assert fn(a, b) == fn(b, a)
        assert ssim(a, b, 1.0) == pytest.approx(ssim(b, a, 1.0), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(images)
    def test_identity(self, a):
        m = all_metrics(a, a, 1.0)
        assert (m["MSE"], m["MAE"], m["RMSE"], m["PSNR"]) == (0.0, 0.0, 0.0, 100.0)
        assert m["SSIM"] == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(images, images)
    def test_ranges(self, a, b):
        s = ssim(a, b, 1.0)
        assert -1.0 <= s <= 1.0
        assert psnr(a, b, 1.0) >= 0.0


class TestSsim:
    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            x, y = rng.random((16, 16)), rng.random((16, 16))
            assert abs(ssim(x, y, 1.0) - ssim_direct(x, y, 1.0)) < 1e-6

    def test_matches_oracle_on_small_frames(self):
        rng = np.random.default_rng(1)
        x, y = rng.random((4, 8)), rng.random((4, 8))
        assert abs(ssim(x, y, 2.0) - ssim_direct(x, y, 2.0)) < 1e-6

    def test_constant_images(self):
        x, y = np.full((16, 16), 0.2), np.full((16, 16), 0.4)
        expected = (2 * 0.08 + 1e-4) / (0.04 + 0.16 + 1e-4)
        assert ssim(x, y, 1.0) == pytest.approx(expected, abs=1e-9)
        assert abs(ssim(x, y, 1.0) - 0.8005) <= 1e-3

    def test_large_offset_collapses(self):
        rng = np.random.default_rng(2)
        x = rng.random((16, 16))
        assert ssim(x, x + 50.0, 1.0) < 0.5

    def test_frames_averaged(self):
        rng = np.random.default_rng(3)
        x, y = rng.random((3, 16, 16)), rng.random((3, 16, 16))
        per = [ssim_direct(x[i], y[i], 1.0) for i in range(3)]
        assert ssim(x, y, 1.0) == pytest.approx(np.mean(per), abs=1e-9)

    def test_noise_monotonicity(self):
        rng = np.random.default_rng(4)
        truth = rng.random((16, 16))
        levels = [0.02, 0.05, 0.1, 0.2]
        stats = np.zeros((len(levels), 3))
        for _ in range(20):
            base = rng.standard_normal((16, 16))
            for i, a in enumerate(levels):
                p = truth + a * base
                stats[i] += (mse(p, truth), ssim(p, truth, 1.0), psnr(p, truth, 1.0))
        assert np.all(np.diff(stats[:, 0]) > 0)
        assert np.all(np.diff(stats[:, 1]) < 0)
        assert np.all(np.diff(stats[:, 2]) < 0)


class TestReport:
    def test_population_std(self):
        r = MetricReport()
        for v in (1.0, 3.0):
            r.add("saturation", 1, 2, {"MSE": v})
        assert r.aggregate("saturation", 1, "MSE") == (2.0, 1.0)

    def test_rollout_stages_cover_predicted_frames_only(self):
        plan = RolloutPlan(15, 2, 4)
        rng = np.random.default_rng(0)
        truth = rng.random((2, 23, 8, 8))
        pred = truth.copy()
        pred[:, :15] += 5.0  # context errors must be invisible
        pred[:, 21:] += 0.1  # only stage 4 sees this
        rep = evaluate_rollout({"saturation": pred}, {"saturation": truth}, plan, {"saturation": 1.0})
        rows = rep.rows()
        assert len(rows) == 4 * 5
        assert [rep.pred_frames[k] for k in (1, 2, 3, 4)] == [2, 4, 6, 8]
        for k in (1, 2, 3):
            assert rep.aggregate("saturation", k, "MSE") == (0.0, 0.0)
            assert rep.aggregate("saturation", k, "PSNR")[0] == 100.0
        assert rep.aggregate("saturation", 4, "MSE")[0] == pytest.approx(0.01 * 2 / 8)

    def test_csv_round_trip_and_table(self):
        rep = MetricReport()
        rep.add("pressure", 1, 2, {"MSE": 0.5, "SSIM": 0.9})
        rep.add("pressure", 1, 2, {"MSE": 0.25, "SSIM": 0.7})
        text = rep.to_csv()
        assert text.startswith("# units=normalized\nmethod,field,stage,pred_frames,metric,mean,std\n")
        rows = parse_report_csv(text)
        assert rows[0]["mean"] == 0.375 and rows[0]["std"] == 0.125
        assert rows[1]["metric"] == "SSIM" and rows[1]["mean"] == pytest.approx(0.8)
        table = summary_table(rows)
        assert "pressure" in table and "0.375000" in table

    def test_length_mismatch(self):
        plan = RolloutPlan(15, 2, 4)
        with pytest.raises(ValueError):
            evaluate_rollout({"s": np.zeros((1, 21, 4, 4))}, {"s": np.zeros((1, 21, 4, 4))}, plan, {"s": 1.0})
