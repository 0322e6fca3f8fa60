"""Reconstruction and image-quality metrics for rollout evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
METRICS = ("MSE", "MAE", "RMSE", "SSIM", "PSNR")
CSV_COLUMNS = ("method", "field", "stage", "pred_frames", "metric", "mean", "std")


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return pred, truth


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth) -> float:
    return math.sqrt(mse(pred, truth))


def psnr(pred, truth, data_range: float) -> float:
    if data_range <= 0:
        raise ValueError("data_range must be > 0")
    err = mse(pred, truth)
    if err < data_range**2 * 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(data_range**2 / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _valid_filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable weighted mean over every full window position of the last two axes."""
    k = len(g)
    out = correlate1d(img, g, axis=-1, mode="constant")
    out = correlate1d(out, g, axis=-2, mode="constant")
    lo = k // 2
    hi_h = img.shape[-2] - (k - 1 - lo)
    hi_w = img.shape[-1] - (k - 1 - lo)
    return out[..., lo:hi_h, lo:hi_w]


def ssim(pred, truth, data_range: float) -> float:
    """Mean single-scale SSIM over all window positions of all frames.

    Inputs are [..., H, W]; leading axes are treated as independent frames.
    Frames smaller than the 11x11 window use a ``min(11, H, W)`` window whose
    Gaussian weights are renormalized.
    """
    p, t = _pair(pred, truth)
    if p.ndim < 2:
        raise ValueError("ssim needs at least 2-D inputs")
    size = min(SSIM_WINDOW, *p.shape[-2:])
    g = gaussian_window(size)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_p = _valid_filter(p, g)
    mu_t = _valid_filter(t, g)
    var_p = _valid_filter(p * p, g) - mu_p**2
    var_t = _valid_filter(t * t, g) - mu_t**2
    cov = _valid_filter(p * t, g) - mu_p * mu_t
    num = (2 * mu_p * mu_t + c1) * (2 * cov + c2)
    den = (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
    return float(np.mean(num / den))


def all_metrics(pred, truth, data_range: float) -> dict[str, float]:
    m = mse(pred, truth)
    return {
        "MSE": m,
        "MAE": mae(pred, truth),
        "RMSE": math.sqrt(m),
        "SSIM": ssim(pred, truth, data_range),
        "PSNR": psnr(pred, truth, data_range),
    }


@dataclass
class MetricReport:
    """Per-sample metric values keyed by (field, stage, metric)."""

    method: str = "plumeflow"
    units: str = "normalized"
    pred_frames: dict[int, int] = field(default_factory=dict)
    values: dict[tuple[str, int, str], list[float]] = field(default_factory=dict)

    def add(self, field_name: str, stage: int, n_pred: int, metrics: dict[str, float]):
        self.pred_frames[stage] = n_pred
        for name, value in metrics.items():
            self.values.setdefault((field_name, stage, name), []).append(value)

    def aggregate(self, field_name: str, stage: int, metric: str) -> tuple[float, float]:
        """(mean, population std) across samples."""
        v = np.asarray(self.values[(field_name, stage, metric)], dtype=np.float64)
        return float(v.mean()), float(v.std(ddof=0))

    def rows(self) -> list[tuple]:
        out = []
        for (fld, stage, metric) in sorted(
            self.values, key=lambda k: (k[0], k[1], METRICS.index(k[2]))
        ):
            mean, std = self.aggregate(fld, stage, metric)
            out.append((self.method, fld, stage, self.pred_frames[stage], metric, mean, std))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# units={self.units}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows():
            w.writerow(row[:5] + (repr(row[5]), repr(row[6])))
        return buf.getvalue()


def parse_report_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append({
            "method": rec["method"],
            "field": rec["field"],
            "stage": int(rec["stage"]),
            "pred_frames": int(rec["pred_frames"]),
            "metric": rec["metric"],
            "mean": float(rec["mean"]),
            "std": float(rec["std"]),
        })
    return rows


def summary_table(rows: list[dict]) -> str:
    """Plain-text table, one line per (field, stage), metrics as mean ± std."""
    by_key: dict[tuple, dict] = {}
    for r in rows:
        by_key.setdefault((r["method"], r["field"], r["stage"], r["pred_frames"]), {})[r["metric"]] = (
            r["mean"], r["std"]
        )
    present = [m for m in METRICS if any(m in v for v in by_key.values())]
    header = f"{'method':<12} {'field':<11} {'stage':>5} {'pred':>4} " + " ".join(
        f"{m:>23}" for m in present
    )
    out = [header, "-" * len(header)]
    for (method, fld, stage, n_pred), vals in sorted(by_key.items()):
        cells = []
        for m in present:
            mean, std = vals.get(m, (float("nan"), float("nan")))
            cells.append(f"{mean:>11.6f} ± {std:<9.6f}")
        out.append(f"{method:<12} {fld:<11} {stage:>5} {n_pred:>4} " + " ".join(cells))
    return "\n".join(out) + "\n"


def evaluate_rollout(
    pred: dict[str, np.ndarray],
    truth: dict[str, np.ndarray],
    plan,
    data_ranges: dict[str, float],
    method: str = "plumeflow",
) -> MetricReport:
    """Stage-wise metrics over predicted frames only.

    ``pred`` / ``truth`` map a field name to arrays [N, F, ...] with
    ``F == plan.lengths[-1]``. Stage k covers frames ``[F_c, lengths[k])``.
    """
    report = MetricReport(method=method)
    for fld in pred:
        p, t = np.asarray(pred[fld]), np.asarray(truth[fld])
        if p.shape != t.shape:
            raise ValueError(f"{fld}: shape mismatch {p.shape} vs {t.shape}")
        if p.shape[1] != plan.lengths[-1]:
            raise ValueError(
                f"{fld}: clip length {p.shape[1]} != planned length {plan.lengths[-1]}"
            )
        for k, length in enumerate(plan.lengths):
            sl = slice(plan.context, length)
            for i in range(p.shape[0]):
                report.add(fld, k + 1, length - plan.context,
                           all_metrics(p[i, sl], t[i, sl], data_ranges[fld]))
    return report
