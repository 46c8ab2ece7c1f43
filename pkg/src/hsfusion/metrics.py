"""Fusion and segmentation quality measures.

All image metrics take single-plane float images in [0, 1]. The torch variant of
SSIM is the differentiable twin used inside the training losses; it uses the same
window and constants so the two agree to floating-point precision.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.signal import correlate2d

from .errors import DegenerateInput, LabelRangeError, SizeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _plane(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[..., 0]
    if x.ndim != 2:
        raise SizeError(f"expected a single image plane, got shape {x.shape}")
    return x


def _same_shape(*planes):
    shapes = {p.shape for p in planes}
    if len(shapes) != 1:
        raise SizeError(f"shape mismatch: {sorted(shapes)}")


def ssim_map(a, b) -> np.ndarray:
    a, b = _plane(a), _plane(b)
    _same_shape(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise SizeError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()

    def filt(x):
        return correlate2d(x, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows (sigma 1.5)."""
    return float(ssim_map(a, b).mean())


def ssimx(fused, ir, vis_y) -> float:
    return ssim(fused, ir) + ssim(fused, vis_y)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DegenerateInput("correlation undefined for a constant image")
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float((da * da).sum()) * float((db * db).sum()))
    if denom == 0.0:
        raise DegenerateInput("correlation undefined for a constant image")
    return float((da * db).sum()) / denom


def cc(fused, ir, vis_y) -> float:
    f, i, v = _plane(fused), _plane(ir), _plane(vis_y)
    _same_shape(f, i, v)
    return (_pearson(f, i) + _pearson(f, v)) / 2


def mse(a, b) -> float:
    a, b = _plane(a), _plane(b)
    _same_shape(a, b)
    return float(((a - b) ** 2).mean())


def psnr(fused, ir, vis_y) -> float:
    """PSNR in dB against the mean of the two source MSEs; identical inputs give 100 dB."""
    f, i, v = _plane(fused), _plane(ir), _plane(vis_y)
    _same_shape(f, i, v)
    m = (mse(f, i) + mse(f, v)) / 2
    if m == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / m))


# -- fusion artifacts ---------------------------------------------------------

@dataclass(frozen=True)
class NabfParams:
    """Constants of the gradient transfer model (Petrovic; artifact form by Shreyamsha Kumar).

    Gradients are measured on the 0..255 scale with Sobel kernels divided by 8,
    so ``edge_threshold`` is in grey levels.
    """

    edge_threshold: float = 2.0
    weight_exponent: float = 1.5
    strength_gain: float = 0.9999
    strength_slope: float = 19.0
    strength_mid: float = 0.5
    orient_gain: float = 0.9995
    orient_slope: float = 22.0
    orient_mid: float = 0.5


_SOBEL_V = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8
_SOBEL_H = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64) / 8


def _edges(x: np.ndarray):
    gv = ndimage.correlate(x, _SOBEL_V, mode="mirror")
    gh = ndimage.correlate(x, _SOBEL_H, mode="mirror")
    strength = np.sqrt(gv ** 2 + gh ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        angle = np.arctan(gv / gh)
    angle[(gv == 0) & (gh == 0)] = 0.0
    return strength, angle


def _transfer(g_src, a_src, g_f, a_f, p: NabfParams):
    ratio = np.zeros_like(g_src)
    ok = (g_src != 0) & (g_f != 0)
    ratio[ok] = np.where(g_src > g_f, g_f / np.where(ok, g_src, 1), g_src / np.where(ok, g_f, 1))[ok]
    orient = np.abs(np.abs(a_src - a_f) - np.pi / 2) * 2 / np.pi
    q_g = p.strength_gain / (1 + np.exp(-p.strength_slope * (ratio - p.strength_mid)))
    q_a = p.orient_gain / (1 + np.exp(-p.orient_slope * (orient - p.orient_mid)))
    return np.sqrt(q_g * q_a)


def nabf(fused, ir, vis_y, params: NabfParams = NabfParams()) -> float:
    """Fraction of source edge strength turned into fusion artifacts (lower is better)."""
    f, a, b = (_plane(x) * 255.0 for x in (fused, ir, vis_y))
    _same_shape(f, a, b)
    g_a, ang_a = _edges(a)
    g_b, ang_b = _edges(b)
    g_f, ang_f = _edges(f)
    q_af = _transfer(g_a, ang_a, g_f, ang_f, params)
    q_bf = _transfer(g_b, ang_b, g_f, ang_f, params)
    w_a = np.where(g_a >= params.edge_threshold, g_a ** params.weight_exponent, 0.0)
    w_b = np.where(g_b >= params.edge_threshold, g_b ** params.weight_exponent, 0.0)
    total = float((w_a + w_b).sum())
    if total == 0.0:
        raise DegenerateInput("no source edges above threshold")
    artifact = (g_f > g_a) & (g_f > g_b)
    return float((artifact * ((1 - q_af) * w_a + (1 - q_bf) * w_b)).sum()) / total


# -- segmentation -------------------------------------------------------------

def confusion(pred, truth, n: int) -> np.ndarray:
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise SizeError("prediction and truth differ in size")
    for name, x in (("prediction", pred), ("truth", truth)):
        if x.size and (x.min() < 0 or x.max() >= n):
            raise LabelRangeError(f"{name} values outside [0, {n})")
    return np.bincount(truth * n + pred, minlength=n * n).reshape(n, n)


def iou_from_confusion(conf: np.ndarray):
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    per_class = np.full(conf.shape[0], np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    return per_class, float(per_class[present].mean()) if present.any() else float("nan")


def miou(pred, truth, n: int):
    """Per-class IoU (NaN for classes absent from both maps) and their mean."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise SizeError(f"prediction {pred.shape} vs truth {truth.shape}")
    return iou_from_confusion(confusion(pred.astype(np.int64), truth.astype(np.int64), n))


@dataclass
class MetricReport:
    ssimx: float
    cc: float
    psnr: float
    nabf: float
    per_class_iou: Optional[list] = field(default=None)
    miou: Optional[float] = None


def _or_nan(fn, *args) -> float:
    try:
        return fn(*args)
    except DegenerateInput:
        return float("nan")


def evaluate_pair(fused, ir, vis_y) -> MetricReport:
    """Fusion metrics for one pair; degenerate measures come back as NaN."""
    return MetricReport(
        ssimx=ssimx(fused, ir, vis_y),
        cc=_or_nan(cc, fused, ir, vis_y),
        psnr=psnr(fused, ir, vis_y),
        nabf=_or_nan(nabf, fused, ir, vis_y),
    )


REPORT_COLUMNS = ("id", "ssimx", "cc", "psnr", "nabf")


def write_report(path, rows, with_miou: bool = False) -> dict:
    """Write one CSV row per (id, MetricReport) plus a trailing ``mean`` row.

    NaN entries are excluded from the column means. Returns the summary.
    """
    cols = list(REPORT_COLUMNS) + (["miou"] if with_miou else [])
    summary = {}
    for c in cols[1:]:
        vals = np.array([getattr(r, c) for _, r in rows], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        summary[c] = float(vals.mean()) if vals.size else float("nan")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for id_, r in rows:
            w.writerow([id_] + [repr(float(getattr(r, c))) for c in cols[1:]])
        w.writerow(["mean"] + [repr(summary[c]) for c in cols[1:]])
    return summary


# -- differentiable twins -----------------------------------------------------

def ssim_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over batch, channels and valid windows of (B, C, H, W) tensors in [0, 1]."""
    if a.shape != b.shape:
        raise SizeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise SizeError(f"image {tuple(a.shape[-2:])} smaller than the SSIM window")
    c = a.shape[1]
    # the Gaussian window is separable: two 1-D passes instead of one 11x11 pass
    g = np.exp(-((np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2) ** 2) / (2 * SSIM_SIGMA ** 2))
    g = torch.as_tensor(g / g.sum(), dtype=a.dtype, device=a.device)
    col = g.view(1, 1, SSIM_WINDOW, 1).expand(c, 1, SSIM_WINDOW, 1)
    row = g.view(1, 1, 1, SSIM_WINDOW).expand(c, 1, 1, SSIM_WINDOW)

    def filt(x):
        return F.conv2d(F.conv2d(x, col, groups=c), row, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean()

