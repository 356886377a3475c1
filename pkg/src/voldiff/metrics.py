"""Image-quality and anomaly-localization metrics for volumes."""

from __future__ import annotations

import json
import math

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import InvalidArgument, InvalidMaskError, ShapeError, UndefinedMetricError

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PRO_FPR_LIMIT = 0.3


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    a, b = _pair(a, b)
    if not data_range > 0:
        raise InvalidArgument("data_range must be positive")
    # exactly rounded sum, so the value does not depend on voxel order
    mse = math.fsum(((a - b) ** 2).ravel()) / a.size
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    # separable weighted sums restricted to fully contained windows
    out = x
    for axis in range(3):
        out = ndimage.correlate1d(out, k, axis=axis, mode="constant")
    pad = len(k) // 2
    return out[tuple(slice(pad, n - pad) for n in out.shape)]


def _ssim_terms(a, b, data_range):
    if any(n < SSIM_WINDOW for n in a.shape):
        raise InvalidArgument(f"volume {a.shape} smaller than the {SSIM_WINDOW}^3 window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    k = gaussian_kernel()
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a ** 2
    var_b = _filter_valid(b * b, k) - mu_b ** 2
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim3d(a, b, data_range: float) -> float:
    """Mean local SSIM over all fully contained 7^3 Gaussian (sigma 1.5) windows."""
    a, b = _pair(a, b)
    lum, cs = _ssim_terms(a, b, data_range)
    return float(np.mean(lum * cs))


def _downsample(x: np.ndarray) -> np.ndarray:
    d, h, w = (n // 2 * 2 for n in x.shape)
    x = x[:d, :h, :w]
    return x.reshape(d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(1, 3, 5))


def ms_ssim_scales(shape, max_scales: int = len(MS_SSIM_WEIGHTS)) -> int:
    n, m = min(shape), 0
    while m < max_scales and n >= SSIM_WINDOW:
        m += 1
        n //= 2
    return m


def ms_ssim3d(a, b, data_range: float, weights=MS_SSIM_WEIGHTS) -> float:
    """Multi-scale SSIM with 2x average-pool pyramids.

    The scale count is limited by the smallest extent (each level must still hold a
    7^3 window); the weights are truncated to that count and renormalized. Contrast
    terms are clamped at zero before the fractional powers.
    """
    a, b = _pair(a, b)
    m = ms_ssim_scales(a.shape, len(weights))
    if m == 0:
        raise InvalidArgument(f"volume {a.shape} too small for MS-SSIM")
    w = np.asarray(weights[:m], dtype=np.float64)
    w = w / w.sum()
    if m == 1:
        return ssim3d(a, b, data_range)
    out = 1.0
    for j in range(m):
        lum, cs = _ssim_terms(a, b, data_range)
        if j == m - 1:
            val = max(float(np.mean(lum * cs)), 0.0)
        else:
            val = max(float(np.mean(cs)), 0.0)
            a, b = _downsample(a), _downsample(b)
        out *= val ** w[j]
    return float(out)


def _binary(x, name):
    x = np.asarray(x)
    if not np.isin(x, (0, 1)).all():
        raise InvalidMaskError(f"{name} must be binary")
    return x.astype(bool)


def dice(a, b) -> float:
    a, b = _binary(a, "a"), _binary(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _binary(labels, "labels").ravel()
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


CONNECTIVITY_6 = ndimage.generate_binary_structure(3, 1)


def pro_curve(abs_maps, gt_masks):
    """(fpr, pro, thresholds) for every distinct score used as a `score >= th` threshold.

    The curve starts at the empty detection (th = +inf). Components are 6-connected and
    labelled per volume; the false-positive rate pools all volumes.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in abs_maps]
    masks = [_binary(g, "gt_masks") for g in gt_masks]
    weights, scores, negs = [], [], []
    n_comp = 0
    labelled = []
    for m, g in zip(maps, masks):
        if m.shape != g.shape:
            raise ShapeError(f"map {m.shape} vs mask {g.shape}")
        lab, n = ndimage.label(g, structure=CONNECTIVITY_6)
        sizes = np.bincount(lab.ravel(), minlength=n + 1)
        labelled.append((lab, sizes))
        n_comp += n
    if n_comp == 0:
        raise UndefinedMetricError("PRO needs at least one ground-truth component")
    for m, (lab, sizes) in zip(maps, labelled):
        flat = lab.ravel()
        w = np.zeros(flat.shape)
        pos = flat > 0
        w[pos] = 1.0 / (n_comp * sizes[flat[pos]])
        weights.append(w)
        scores.append(m.ravel())
        negs.append(~pos)
    w, sc, neg = np.concatenate(weights), np.concatenate(scores), np.concatenate(negs)
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise UndefinedMetricError("PRO needs background voxels")
    order = np.argsort(-sc, kind="stable")
    sc, w, neg = sc[order], w[order], neg[order]
    cum_pro = np.cumsum(w)
    cum_fp = np.cumsum(neg)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[sc[1:] != sc[:-1], True])
    fpr = np.r_[0.0, cum_fp[ends] / n_neg]
    pro = np.r_[0.0, cum_pro[ends]]
    thresholds = np.r_[np.inf, sc[ends]]
    return fpr, pro, thresholds


def integrate_pro(fpr, pro, fpr_limit: float = PRO_FPR_LIMIT) -> float:
    """Trapezoid area under pro(fpr) on [0, fpr_limit], divided by fpr_limit."""
    fpr, pro = np.asarray(fpr, float), np.asarray(pro, float)
    area = 0.0
    for i in range(1, len(fpr)):
        x0, x1, y0, y1 = fpr[i - 1], fpr[i], pro[i - 1], pro[i]
        if x0 >= fpr_limit:
            break
        if x1 > fpr_limit:
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
            x1 = fpr_limit
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area / fpr_limit


def pro(abs_maps, gt_masks, fpr_limit: float = PRO_FPR_LIMIT) -> float:
    """Normalized area under the per-region-overlap curve up to `fpr_limit`."""
    if isinstance(abs_maps, np.ndarray) and abs_maps.ndim == 3:
        abs_maps, gt_masks = [abs_maps], [gt_masks]
    fpr, overlap, _ = pro_curve(abs_maps, gt_masks)
    return integrate_pro(fpr, overlap, fpr_limit)


def metric_record(metric: str, value: float, case_id: str, **params) -> dict:
    return {"metric": metric, "value": value, "case_id": case_id, "params": params}


def write_report(path, records) -> None:
    def clean(v):
        # JSON has no infinity; keep the PSNR sentinel readable
        return str(v) if isinstance(v, float) and not math.isfinite(v) else v
    rows = [{**r, "value": clean(r["value"])} for r in records]
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
