"""Slow, independent reference implementations used only by the tests."""

import math
from decimal import Decimal, getcontext
from fractions import Fraction

import numpy as np


def matmul_loop(a, b):
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for p in range(k):
                acc = np.float32(acc + np.float32(a[i, p] * b[p, j]))
            out[i, j] = acc
    return out


def softmax_ref(row, scale=1.0):
    xs = [scale * float(v) for v in row]
    hi = max(xs)
    es = [math.exp(x - hi) for x in xs]
    tot = math.fsum(es)
    return [e / tot for e in es]


def alpha_bar_ref(T, beta_start, beta_end, style):
    out = [1.0]
    for i in range(T):
        f = i / (T - 1) if T > 1 else 0.0
        if style == "linear":
            beta = beta_start + f * (beta_end - beta_start)
        else:
            r = math.sqrt(beta_start) + f * (math.sqrt(beta_end) - math.sqrt(beta_start))
            beta = r * r
        out.append(out[-1] * (1.0 - beta))
    return out


def raster_ref(boxes, height, width):
    cells = set()
    for x, y, w, h in boxes:
        for r in range(max(y, 0), min(y + h, height)):
            for c in range(max(x, 0), min(x + w, width)):
                cells.add((r, c))
    return cells


def iou_ref(h, gt, thr):
    """Set-enumeration IoU; ``gt`` is a boolean array."""
    pred = {(r, c) for r in range(h.shape[0]) for c in range(h.shape[1]) if float(h[r, c]) > thr}
    truth = {(r, c) for r in range(gt.shape[0]) for c in range(gt.shape[1]) if gt[r, c]}
    union = pred | truth
    return Fraction(len(pred & truth), len(union)) if union else Fraction(0)


def miou_ref(h, gt):
    return float(sum(iou_ref(h, gt, t) for t in (0.1, 0.2, 0.3, 0.4, 0.5)) / 5)


def auc_ref(h, gt):
    """Pairwise Mann-Whitney comparison of every positive against every negative."""
    v = np.asarray(h, dtype=np.float64).ravel()
    m = np.asarray(gt, dtype=bool).ravel()
    pos, neg = v[m], v[~m]
    wins = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def cnr_ref(h, gt):
    """Direct evaluation with exact rationals and a 60-digit square root.

    Returns ``None`` when both regions have zero variance.
    """
    vals = [[Fraction(float(x)) for x in row] for row in np.asarray(h)]
    gt = np.asarray(gt, dtype=bool)
    a = [vals[r][c] for r in range(gt.shape[0]) for c in range(gt.shape[1]) if gt[r, c]]
    b = [vals[r][c] for r in range(gt.shape[0]) for c in range(gt.shape[1]) if not gt[r, c]]
    mu_a, mu_b = sum(a) / len(a), sum(b) / len(b)
    var_a = sum((x - mu_a) ** 2 for x in a) / len(a)
    var_b = sum((x - mu_b) ** 2 for x in b) / len(b)
    if var_a + var_b == 0:
        return None
    getcontext().prec = 60
    diff = mu_a - mu_b
    num = Decimal(diff.numerator) / Decimal(diff.denominator)
    var = var_a + var_b
    den = (Decimal(var.numerator) / Decimal(var.denominator)).sqrt()
    return float(num / den)


def otsu_ref(h):
    """Exhaustive search over the 256 thresholds ``k/256`` on the 256-bin histogram.

    Pixel bins are computed with exact rationals; the between-class variance
    ``w0 w1 (mu0 - mu1)^2`` is maximised with ties going to the smaller ``k``.
    Returns ``(threshold, degenerate)``.
    """
    counts = [0] * 256
    for v in np.asarray(h, dtype=np.float64).ravel():
        f = min(max(Fraction(float(v)), Fraction(0)), Fraction(1))
        k = math.ceil(f * 256) - 1
        counts[min(max(k, 0), 255)] += 1
    n = sum(counts)
    best_k, best = 0, Fraction(0)
    for k in range(256):
        bg = counts[:k]
        n0 = sum(bg)
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = Fraction(sum(i * c for i, c in enumerate(bg)), n0)
        mu1 = Fraction(sum(i * c for i, c in enumerate(counts) if i >= k), n1)
        var = Fraction(n0, n) * Fraction(n1, n) * (mu0 - mu1) ** 2
        if var > best:
            best_k, best = k, var
    if best == 0:
        return 0.0, True
    return best_k / 256, False


def fuzz_metric_instance(rng):
    """Random heatmap and box set on a grid of at most 32x32."""
    hh, ww = (int(v) for v in rng.integers(2, 33, size=2))
    kind = rng.integers(0, 3)
    if kind == 0:
        h = rng.random((hh, ww))
    elif kind == 1:
        # coarse levels produce many ties
        h = rng.integers(0, 6, size=(hh, ww)) / 5.0
    else:
        h = np.where(rng.random((hh, ww)) < 0.5, 0.0, rng.random((hh, ww)))
    h = h.astype(np.float32)
    boxes = []
    for _ in range(int(rng.integers(1, 4))):
        x, y = int(rng.integers(0, ww)), int(rng.integers(0, hh))
        boxes.append((x, y, int(rng.integers(1, ww - x + 1)), int(rng.integers(1, hh - y + 1))))
    return h, boxes
