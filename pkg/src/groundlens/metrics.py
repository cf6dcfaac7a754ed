"""Phrase-grounding metrics: box rasterisation, IoU/mIoU, AUC-ROC, CNR.

CNR is evaluated exactly: region sums and sums of squares are accumulated as
integers (every float is an integer multiple of a power of two) and only the
final square root is rounded, so results do not depend on summation order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError, InvalidGroundTruthError, UndefinedMetricError

log = logging.getLogger(__name__)

MIOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
METRIC_NAMES = ("miou", "auc_roc", "cnr", "abs_cnr")


@dataclass(frozen=True)
class GroundTruthMask:
    grid: np.ndarray  # bool H x W
    boxes: tuple[tuple[int, int, int, int], ...]
    warnings: tuple[str, ...] = ()


def rasterize_bboxes(boxes, height: int, width: int) -> GroundTruthMask:
    """Union of half-open rectangles ``[x, x+w) x [y, y+h)``, clamped to the image."""
    grid = np.zeros((height, width), dtype=bool)
    warnings = []
    kept = []
    for box in boxes:
        x, y, w, h = (int(v) for v in box)
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + w, width), min(y + h, height)
        if (x0, y0, x1, y1) != (x, y, x + w, y + h):
            warnings.append(f"box {box} clamped to image {height}x{width}")
        if x1 <= x0 or y1 <= y0:
            warnings.append(f"box {box} has zero area, skipped")
            continue
        grid[y0:y1, x0:x1] = True
        kept.append((x, y, w, h))
    for msg in warnings:
        log.warning(msg)
    if not kept:
        raise InvalidGroundTruthError("no box with positive area")
    return GroundTruthMask(grid, tuple(kept), tuple(warnings))


def _mask(gt) -> np.ndarray:
    return gt.grid if isinstance(gt, GroundTruthMask) else np.asarray(gt, dtype=bool)


def _pair(h, gt):
    h = np.asarray(h)
    m = _mask(gt)
    if h.shape != m.shape:
        raise DimensionError(f"heatmap {h.shape} and ground truth {m.shape} differ")
    return h, m


def iou_counts(h, gt, thr: float) -> tuple[int, int]:
    h, m = _pair(h, gt)
    # compare in float64: a float32 comparison would round thr first (0.2 -> 0.2000000029)
    pred = np.asarray(h, dtype=np.float64) > float(thr)
    return int(np.count_nonzero(pred & m)), int(np.count_nonzero(pred | m))


def iou_at_threshold(h, gt, thr: float) -> float:
    """``|{h > thr} & gt| / |{h > thr} | gt|``; an empty union scores 0."""
    inter, union = iou_counts(h, gt, thr)
    return inter / union if union else 0.0


def per_threshold_iou(h, gt) -> tuple[float, ...]:
    return tuple(iou_at_threshold(h, gt, thr) for thr in MIOU_THRESHOLDS)


def miou(h, gt) -> float:
    """Mean IoU over :data:`MIOU_THRESHOLDS`, averaged exactly then rounded once."""
    total = Fraction(0)
    for thr in MIOU_THRESHOLDS:
        inter, union = iou_counts(h, gt, thr)
        if union:
            total += Fraction(inter, union)
    return float(total / len(MIOU_THRESHOLDS))


def auc_roc(h, gt) -> float:
    """Pixelwise ROC AUC via the Mann-Whitney U statistic with midranks."""
    h, m = _pair(h, gt)
    scores = np.asarray(h, dtype=np.float64).ravel()
    labels = m.ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC-ROC needs both positive and negative pixels")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _scaled_ints(values: np.ndarray) -> tuple[list[int], list[int]]:
    mant, expo = np.frexp(values.astype(np.float64))
    ints = (mant * float(1 << 53)).astype(np.int64)
    return ints.tolist(), (expo - 53).tolist()


def _moments(ints, exps, base: int) -> tuple[int, int, int]:
    s = q = 0
    for m, e in zip(ints, exps):
        sh = e - base
        s += m << sh
        q += (m * m) << (2 * sh)
    return len(ints), s, q


def _sqrt_fraction(x: Fraction) -> float:
    if x == 0:
        return 0.0
    p, q = x.numerator, x.denominator
    k = max(0, (220 + q.bit_length() - p.bit_length()) // 2 + 1)
    return float(Fraction(math.isqrt((p << (2 * k)) // q), 1 << k))


def _cnr_fraction(h, gt) -> tuple[Fraction, Fraction]:
    """Exact ``(mu_A - mu_B, var_A + var_B)`` with population variances."""
    h, m = _pair(h, gt)
    vals = np.asarray(h, dtype=np.float64)
    if not np.isfinite(vals).all():
        raise UndefinedMetricError("heatmap contains non-finite values")
    inside, outside = vals[m], vals[~m]
    if inside.size == 0 or outside.size == 0:
        raise UndefinedMetricError("CNR needs pixels both inside and outside the boxes")
    ia, ea = _scaled_ints(inside)
    ib, eb = _scaled_ints(outside)
    base = min(min(ea), min(eb))
    na, sa, qa = _moments(ia, ea, base)
    nb, sb, qb = _moments(ib, eb, base)
    # the common 2**base scale cancels in the ratio
    diff = Fraction(sa * nb - sb * na, na * nb)
    var = Fraction(na * qa - sa * sa, na * na) + Fraction(nb * qb - sb * sb, nb * nb)
    return diff, var


def cnr(h, gt) -> float:
    """``(mu_in - mu_out) / sqrt(var_in + var_out)``, population variances."""
    diff, var = _cnr_fraction(h, gt)
    if var == 0:
        raise UndefinedMetricError("CNR undefined: both regions have zero variance")
    mag = _sqrt_fraction(diff * diff / var)
    return -mag if diff < 0 else mag


def abs_cnr(h, gt) -> float:
    return abs(cnr(h, gt))


@dataclass
class MetricsRecord:
    sample_id: str
    label: str
    miou: float
    auc_roc: float
    cnr: float
    abs_cnr: float
    per_threshold_iou: tuple[float, ...]
    flags: tuple[str, ...] = ()


def evaluate_heatmap(h, gt, sample_id: str = "", label: str = "") -> MetricsRecord:
    """All metrics for one image; undefined values become NaN and are flagged."""
    flags = ["gt_adjusted"] if isinstance(gt, GroundTruthMask) and gt.warnings else []
    ious = per_threshold_iou(h, gt)
    if any(iou_counts(h, gt, thr)[1] == 0 for thr in MIOU_THRESHOLDS):
        flags.append("empty_union")
    try:
        auc = auc_roc(h, gt)
    except UndefinedMetricError:
        auc = math.nan
        flags.append("auc_undefined")
    try:
        c = cnr(h, gt)
    except UndefinedMetricError:
        c = math.nan
        flags.append("cnr_undefined")
    return MetricsRecord(sample_id, label, miou(h, gt), auc, c, abs(c), ious, tuple(flags))


@dataclass
class PathologySummary:
    label: str
    n: int
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    excluded: int = 0


def _mean_std(values: list[float]) -> tuple[float, float]:
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return math.nan, math.nan
    mean = math.fsum(vals) / len(vals)
    if len(vals) == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    return mean, math.sqrt(var)


def summarize(records, label_order=None, excluded=None) -> list[PathologySummary]:
    """Per-label mean and sample std, then an unweighted macro ``Avg`` row.

    The macro row averages label means (each label counts once regardless of
    its size); its std is the sample std of those label means. Labels with
    no records are omitted (their exclusions still count in the macro row).
    """
    excluded = dict(excluded or {})
    groups: dict[str, list[MetricsRecord]] = {}
    for rec in sorted(records, key=lambda r: r.sample_id):
        groups.setdefault(rec.label, []).append(rec)
    order = [lab for lab in (label_order or []) if lab in groups or excluded.get(lab)]
    order += sorted(lab for lab in set(groups) | set(excluded) if lab not in order)
    out = []
    for lab in order:
        recs = groups.get(lab, [])
        if not recs:
            log.warning("label %s has no evaluated samples; omitted", lab)
            continue
        summary = PathologySummary(lab, len(recs), excluded=excluded.get(lab, 0))
        for name in METRIC_NAMES:
            summary.mean[name], summary.std[name] = _mean_std([getattr(r, name) for r in recs])
        out.append(summary)
    if out:
        avg = PathologySummary("Avg", sum(s.n for s in out), excluded=sum(excluded.values()))
        for name in METRIC_NAMES:
            avg.mean[name], avg.std[name] = _mean_std([s.mean[name] for s in out])
        out.append(avg)
    return out
