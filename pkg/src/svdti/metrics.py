"""Masked MSE, slice-wise SSIM, and PSNR between metric map sets.

Maps are expected pre-normalized (the trainer's per-metric scales) so the
three channels are commensurate. SSIM uses the standard 11x11 Gaussian
window (sigma 1.5, K1 = 0.01, K2 = 0.03) over valid window positions of
each axial (z) slice; masked-out voxels are zeroed first so nothing outside
the mask can influence any reported number.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionMismatchError, MetricMaps

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

METRIC_NAMES = ("fa", "md", "ad")


def _gaussian_window() -> np.ndarray:
    offsets = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(offsets**2) / (2.0 * SSIM_SIGMA**2))
    window = np.outer(g, g)
    return window / window.sum()


_WINDOW = _gaussian_window()


def _check_pair(pred: MetricMaps, gt: MetricMaps, mask: np.ndarray) -> np.ndarray:
    if pred.dims != gt.dims:
        raise DimensionMismatchError(
            f"prediction dims {pred.dims} do not match ground-truth dims {gt.dims}"
        )
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.dims:
        raise DimensionMismatchError(
            f"mask shape {mask.shape} does not match map dims {pred.dims}"
        )
    if not mask.any():
        raise ValueError("evaluation mask is empty")
    return mask


def _masked_mse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    diff = pred[mask] - gt[mask]
    return float(np.mean(diff * diff))


def mse(pred: MetricMaps, gt: MetricMaps, mask) -> dict:
    """Mean squared difference over masked-in voxels, per metric."""
    mask = _check_pair(pred, gt, mask)
    return {
        "fa": _masked_mse(pred.fa, gt.fa, mask),
        "md": _masked_mse(pred.md, gt.md, mask),
        "ad": _masked_mse(pred.ad, gt.ad, mask),
    }


def ssim(pred_slice: np.ndarray, gt_slice: np.ndarray, data_range: float) -> float:
    """Structural similarity of two 2D slices, mean over valid windows."""
    x = np.asarray(pred_slice, dtype=np.float64)
    y = np.asarray(gt_slice, dtype=np.float64)
    if x.ndim != 2 or x.shape != y.shape:
        raise ValueError(f"slices must be equal-shape 2D arrays, got {x.shape} and {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(
            f"slice shape {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    if not (np.isfinite(data_range) and data_range > 0):
        raise ValueError(f"data_range must be finite and > 0, got {data_range}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def windows(a: np.ndarray) -> np.ndarray:
        view = np.lib.stride_tricks.sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
        return np.tensordot(view, _WINDOW, axes=([2, 3], [0, 1]))

    mu_x = windows(x)
    mu_y = windows(y)
    xx = windows(x * x) - mu_x * mu_x
    yy = windows(y * y) - mu_y * mu_y
    xy = windows(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim_volume(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                data_range: float) -> float:
    """Mean SSIM over axial (z) slices that intersect the mask.

    Masked-out voxels are zeroed in both volumes first, so the result is
    insensitive to anything stored outside the mask.
    """
    p = np.where(mask, pred, 0.0)
    g = np.where(mask, gt, 0.0)
    values = [
        ssim(p[:, :, k], g[:, :, k], data_range)
        for k in range(p.shape[2])
        if mask[:, :, k].any()
    ]
    if not values:
        raise ValueError("evaluation mask is empty")
    return float(np.mean(values))


def psnr(pred: np.ndarray, gt: np.ndarray, data_range: float, mask) -> float:
    """10 * log10(data_range^2 / masked MSE); +inf when the MSE is 0."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("evaluation mask is empty")
    if not (np.isfinite(data_range) and data_range > 0):
        raise ValueError(f"data_range must be finite and > 0, got {data_range}")
    err = _masked_mse(np.asarray(pred, dtype=np.float64),
                      np.asarray(gt, dtype=np.float64), mask)
    if err == 0.0:
        return np.inf
    return float(10.0 * np.log10(data_range**2 / err))


@dataclass(frozen=True)
class EvalReport:
    """Per-metric and pooled MSE / SSIM / PSNR plus the ranges used.

    Each of ``mse_values``, ``ssim_values``, ``psnr_values`` maps
    fa / md / ad / all to a float; "all" is the arithmetic mean of the
    three metrics (so an infinite PSNR propagates into the pool).
    """

    mse_values: dict
    ssim_values: dict
    psnr_values: dict
    data_ranges: dict
    voxel_count: int

    def to_dict(self) -> dict:
        psnr_out = {}
        psnr_inf = {}
        for key, value in self.psnr_values.items():
            infinite = bool(np.isinf(value))
            psnr_inf[key] = infinite
            psnr_out[key] = None if infinite else value
        return {
            "mse": dict(self.mse_values),
            "ssim": dict(self.ssim_values),
            "psnr": psnr_out,
            "psnr_is_infinite": psnr_inf,
            "data_ranges": dict(self.data_ranges),
            "voxel_count": self.voxel_count,
        }


def evaluate(pred: MetricMaps, gt: MetricMaps, mask) -> EvalReport:
    """All nine numbers plus pooled means, masked to ``mask``.

    Expects maps already normalized to commensurate scales. The per-metric
    data range is the ground-truth max minus min within the mask; a
    constant ground-truth map falls back to a range of 1 so the stabilizer
    constants stay defined.
    """
    mask = _check_pair(pred, gt, mask)
    mse_values, ssim_values, psnr_values, ranges = {}, {}, {}, {}
    for name in METRIC_NAMES:
        p = getattr(pred, name)
        g = getattr(gt, name)
        inside = g[mask]
        rng = float(inside.max() - inside.min())
        if rng == 0.0:
            rng = 1.0
        ranges[name] = rng
        mse_values[name] = _masked_mse(p, g, mask)
        ssim_values[name] = ssim_volume(p, g, mask, rng)
        psnr_values[name] = psnr(p, g, rng, mask)
    for table in (mse_values, ssim_values, psnr_values):
        table["all"] = float(np.mean([table[n] for n in METRIC_NAMES]))
    return EvalReport(
        mse_values=mse_values,
        ssim_values=ssim_values,
        psnr_values=psnr_values,
        data_ranges=ranges,
        voxel_count=int(mask.sum()),
    )


def aggregate_reports(reports) -> dict:
    """Mean and standard deviation of each number across several reports.

    Infinite PSNR entries poison their mean (reported as null downstream)
    and are flagged; this mirrors averaging over evaluation units.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {}
    for field_name in ("mse_values", "ssim_values", "psnr_values"):
        keys = getattr(reports[0], field_name).keys()
        stat = {}
        for key in keys:
            values = np.array([getattr(r, field_name)[key] for r in reports])
            stat[key] = {"mean": float(values.mean()), "std": float(values.std())}
        out[field_name.replace("_values", "")] = stat
    out["n_reports"] = len(reports)
    return out
