"""Frozen independent oracles the implementation is checked against.

These are deliberately written with different algorithms than the library
(Monte-Carlo sampling instead of polygon clipping, O(n^2) scans instead of
vectorized passes, closed-form normal equations instead of QR) so that
agreement is evidence, not tautology.
"""

import math

import numpy as np


def mc_iou_bev(a, b, n_samples: int, rng: np.random.Generator) -> float:
    """Monte-Carlo BEV IoU: uniform points over the joint bounding rectangle."""
    from uncfuse.geometry import corners_bev

    ca, cb = corners_bev(a), corners_bev(b)
    lo = np.minimum(ca.min(axis=0), cb.min(axis=0))
    hi = np.maximum(ca.max(axis=0), cb.max(axis=0))
    pts = lo + rng.random((n_samples, 2)) * (hi - lo)
    in_a = _in_footprint(pts, a)
    in_b = _in_footprint(pts, b)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    return inter / union if union else 0.0


def mc_iou_3d(a, b, n_samples: int, rng: np.random.Generator) -> float:
    """Monte-Carlo 3D IoU: uniform points over the joint bounding volume."""
    from uncfuse.geometry import corners_bev

    ca, cb = corners_bev(a), corners_bev(b)
    lo = np.minimum(ca.min(axis=0), cb.min(axis=0))
    hi = np.maximum(ca.max(axis=0), cb.max(axis=0))
    z_lo = min(a.z_bottom, b.z_bottom)
    z_hi = max(a.z_bottom + a.height, b.z_bottom + b.height)
    pts = lo + rng.random((n_samples, 2)) * (hi - lo)
    z = z_lo + rng.random(n_samples) * (z_hi - z_lo)
    in_a = _in_footprint(pts, a) & (z >= a.z_bottom) & (z <= a.z_bottom + a.height)
    in_b = _in_footprint(pts, b) & (z >= b.z_bottom) & (z <= b.z_bottom + b.height)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    return inter / union if union else 0.0


def _in_footprint(pts, box) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= 0.5 * box.length) & (np.abs(v) <= 0.5 * box.width)


def brute_force_nms(boxes, scores, iou_thresh, pair_iou) -> list:
    """O(n^2) reference suppression; returns kept indices in score order."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if pair_iou(boxes[i], boxes[j]) > iou_thresh:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def brute_force_ap(flags, n_gt: int):
    """All-point interpolated AP by explicit O(n^2) precision-envelope scan.

    flags: ranked booleans (True = TP). AP is the sum over TP ranks of the
    max precision at any rank >= that rank, accumulated left to right and
    normalized once by n_gt (so covering every GT scores exactly 1.0).
    """
    if n_gt == 0:
        return None if len(flags) == 0 else 0.0
    n = len(flags)
    tp_cum = []
    running = 0
    for f in flags:
        running += 1 if f else 0
        tp_cum.append(running)
    ap = 0.0
    for i in range(n):
        if not flags[i]:
            continue
        best = 0.0
        for j in range(i, n):
            prec = tp_cum[j] / (j + 1)
            if prec > best:
                best = prec
        ap += best
    return ap / n_gt


def brute_force_forty_point_ap(flags, n_gt: int):
    """40-point interpolated AP: mean of max precision at recall >= r."""
    if n_gt == 0:
        return None if len(flags) == 0 else 0.0
    n = len(flags)
    running = 0
    prec, rec = [], []
    for i, f in enumerate(flags):
        running += 1 if f else 0
        prec.append(running / (i + 1))
        rec.append(running / n_gt)
    total = 0.0
    for k in range(1, 41):
        r = k / 40.0
        best = 0.0
        for i in range(n):
            if rec[i] >= r and prec[i] > best:
                best = prec[i]
        total += best
    return total / 40.0


def brute_force_match(det_boxes, gt_boxes, pair_iou, thresh):
    """Greedy matching reference: scan dets in order, best unmatched GT wins."""
    matched = [False] * len(gt_boxes)
    flags = []
    for det in det_boxes:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gt_boxes):
            if matched[j]:
                continue
            o = pair_iou(det, gt)
            if o > best_iou:
                best_j, best_iou = j, o
        if best_j >= 0 and best_iou >= thresh:
            matched[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, matched.count(False)


def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences: (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def ols_line_fixture():
    """Hand-solved simple regression on 5 points via explicit normal equations.

    Data: x = 1..5, y = (2.1, 3.9, 6.2, 7.8, 10.1). Returns beta, standard
    errors, and t statistics for (intercept, slope), computed from the
    closed-form two-variable formulas rather than any matrix factorization.
    """
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    y = [2.1, 3.9, 6.2, 7.8, 10.1]
    n = 5
    sx = sum(x)
    sy = sum(y)
    sxy = sum(a * b for a, b in zip(x, y))
    sxx = sum(a * a for a in x)
    slope = (n * sxy - sx * sy) / (n * sxx - sx * sx)
    intercept = sy / n - slope * sx / n
    rss = sum((yi - (intercept + slope * xi)) ** 2 for xi, yi in zip(x, y))
    dof = n - 2
    sigma2 = rss / dof
    s_xx = sxx - sx * sx / n
    se_slope = math.sqrt(sigma2 / s_xx)
    se_intercept = math.sqrt(sigma2 * (1.0 / n + (sx / n) ** 2 / s_xx))
    return {
        "x": x, "y": y, "dof": dof,
        "beta": (intercept, slope),
        "se": (se_intercept, se_slope),
        "t": (intercept / se_intercept, slope / se_slope),
        "rss": rss,
    }


def pool_mean_oracle(grid_cells, x0, y0, res, lo, hi):
    """Direct-summation mean of cells whose centers land in [lo, hi) x [lo2, hi2)."""
    (x_lo, y_lo), (x_hi, y_hi) = lo, hi
    total = np.zeros(grid_cells.shape[2], dtype=np.float64)
    count = 0
    for i in range(grid_cells.shape[0]):
        cx = x0 + (i + 0.5) * res
        if not (x_lo <= cx < x_hi):
            continue
        for j in range(grid_cells.shape[1]):
            cy = y0 + (j + 0.5) * res
            if not (y_lo <= cy < y_hi):
                continue
            total += grid_cells[i, j]
            count += 1
    return total / count if count else total
