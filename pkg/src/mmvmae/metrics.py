"""Evaluation metrics: PSNR, SSIM, BraTS region composition, Dice, and the
multi-class classification report (accuracy, macro-F1, MCC).

Everything here is a pure function; reconstruction metrics expect inputs
already mapped to [0, 1] (see ``to_metric_space``), never raw model-space
z-scored volumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ValidationError


def to_metric_space(reference: np.ndarray, candidate: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map both volumes with the reference's min/max affine transform so the
    reference spans [0, 1]; the candidate is clipped to that range."""
    reference = np.asarray(reference, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    lo, hi = reference.min(), reference.max()
    span = hi - lo if hi > lo else 1.0
    ref = (reference - lo) / span
    cand = np.clip((candidate - lo) / span, 0.0, 1.0)
    return ref, cand


def psnr(reference: np.ndarray, candidate: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); +inf for identical inputs."""
    reference = np.asarray(reference, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if reference.shape != candidate.shape:
        raise ValidationError(f"shape mismatch {reference.shape} vs {candidate.shape}")
    if peak <= 0:
        raise ValidationError("peak must be positive")
    mse = float(np.mean((reference - candidate) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(reference: np.ndarray, candidate: np.ndarray, window: int = 7,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Structural similarity with a uniform cubic window, averaged over all
    fully-inside window positions; sample-covariance normalization."""
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(candidate, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ValidationError(f"dims {x.shape} smaller than the {window}^3 SSIM window")

    np_win = window**x.ndim
    cov_norm = np_win / (np_win - 1)
    ux = uniform_filter(x, size=window)
    uy = uniform_filter(y, size=window)
    uxx = uniform_filter(x * x, size=window)
    uyy = uniform_filter(y * y, size=window)
    uxy = uniform_filter(x * y, size=window)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))

    pad = (window - 1) // 2
    interior = tuple(slice(pad, d - pad) for d in x.shape)
    return float(s[interior].mean())


@dataclass
class RegionMasks:
    """BraTS composite regions: enhancing tumor, tumor core, whole tumor."""

    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray


def compose_regions(labelmap: np.ndarray) -> RegionMasks:
    """ET = {4}, TC = {1, 4}, WT = {1, 2, 4}; rejects unknown codes."""
    labelmap = np.asarray(labelmap)
    bad = set(np.unique(labelmap)) - {0, 1, 2, 4}
    if bad:
        raise ValidationError(f"labelmap contains unknown codes: {sorted(bad)}")
    et = labelmap == 4
    tc = et | (labelmap == 1)
    wt = tc | (labelmap == 2)
    return RegionMasks(et=et, tc=tc, wt=wt)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks count as perfect agreement."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    for arr in (a, b):
        vals = np.unique(arr)
        if not np.isin(vals, (0, 1)).all():
            raise ValidationError("dice expects binary masks")
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


@dataclass
class ClassificationReport:
    confusion: np.ndarray  # (classes, classes), rows = truth, cols = prediction
    accuracy: float
    f1_macro: float
    mcc: float


def confusion_matrix(predictions, labels, n_classes: int = 3) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ValidationError("predictions/labels must be 1D of equal length")
    if len(labels) == 0:
        raise ValidationError("empty classification input")
    if (labels < 0).any() or (labels >= n_classes).any():
        raise ValidationError(f"labels must lie in 0..{n_classes - 1}")
    if (predictions < 0).any() or (predictions >= n_classes).any():
        raise ValidationError(f"predictions must lie in 0..{n_classes - 1}")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (labels, predictions), 1)
    return conf


def mcc_from_confusion(conf: np.ndarray) -> float:
    """Multi-class Matthews correlation (Gorodkin's R_K) from a confusion
    matrix; 0 when either marginal is degenerate (e.g. constant predictor)."""
    conf = np.asarray(conf, dtype=np.float64)
    s = conf.sum()
    c = np.trace(conf)
    t = conf.sum(axis=1)  # per-class truth counts
    p = conf.sum(axis=0)  # per-class prediction counts
    cov_tp = c * s - float(t @ p)
    den_p = s * s - float(p @ p)
    den_t = s * s - float(t @ t)
    if den_p <= 0 or den_t <= 0:
        return 0.0
    return cov_tp / math.sqrt(den_p * den_t)


def classification_report(predictions, labels, n_classes: int = 3) -> ClassificationReport:
    conf = confusion_matrix(predictions, labels, n_classes)
    total = conf.sum()
    accuracy = float(np.trace(conf)) / total
    f1s = []
    for k in range(n_classes):
        tp = conf[k, k]
        fp = conf[:, k].sum() - tp
        fn = conf[k, :].sum() - tp
        denom = 2 * tp + fp + fn
        f1s.append(2.0 * tp / denom if denom else 0.0)
    return ClassificationReport(
        confusion=conf,
        accuracy=accuracy,
        f1_macro=float(np.mean(f1s)),
        mcc=mcc_from_confusion(conf),
    )
