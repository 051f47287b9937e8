"""Uncertainty analysis: entropy and variance summaries of proposal
uncertainties, Sure/Unsure histograms, and OLS linear models with
orthogonal-polynomial ordinal coding, t-tests, and adjusted R-squared.

Implements its own Student-t CDF through the regularized incomplete beta
function (continued fraction) so the package stays self-contained; the
test suite checks it against an independent reference.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import AnalysisConfig
from .features import rasterize_bev
from .geometry import iou_bev
from .validation import as_float_array

ENTROPY_EPS = 1e-12


def shannon_entropy(score):
    """Two-class Shannon entropy in nats.

    H(s) = -s ln s - (1-s) ln(1-s), with s clamped to
    [1e-12, 1 - 1e-12]. Maximum ln 2 at s = 0.5.
    """
    s = np.clip(np.asarray(score, dtype=np.float64), ENTROPY_EPS, 1.0 - ENTROPY_EPS)
    h = -s * np.log(s) - (1.0 - s) * np.log(1.0 - s)
    if np.ndim(score) == 0:
        return float(h)
    return h


@dataclass(frozen=True)
class UncertaintyRecord:
    """One proposal matched to a ground truth (BEV IoU above threshold)."""

    frame_id: str
    proposal_id: int
    score: float
    entropy: float
    u_reg: float
    u_cls: float
    iou: float
    distance: float
    occlusion: int
    n_points: int
    unsure: bool


def collect_records(frames, model, score_floor: float = 0.01,
                    iou_thresh: float = 0.5) -> list:
    """Proposal uncertainties joined with ground-truth difficulty attributes.

    Runs the proposal network over every frame, keeps proposals with
    score > score_floor, and associates each with the ground truth of
    highest BEV IoU when that IoU exceeds iou_thresh. Association is
    per-proposal (one ground truth may anchor several records).
    """
    cfg = model.cfg
    records = []
    for frame in frames:
        grid = rasterize_bev(frame.points, cfg.world, cfg.features)
        props = model.proposals(grid)
        evidence = model.evidence(model.patches(grid))
        gts = list(frame.objects)
        for pid, prop in enumerate(props):
            if not evidence[prop.cell_index]:
                continue
            score = prop.score
            if score <= score_floor:
                continue
            if not gts:
                continue
            box = prop.box
            best_j, best_iou = -1, 0.0
            for j, obj in enumerate(gts):
                if abs(obj.box.cx - box.cx) > 8.0 or abs(obj.box.cy - box.cy) > 8.0:
                    continue
                o = iou_bev(box, obj.box)
                if o > best_iou:
                    best_j, best_iou = j, o
            if best_j < 0 or best_iou <= iou_thresh:
                continue
            obj = gts[best_j]
            records.append(UncertaintyRecord(
                frame_id=frame.frame_id, proposal_id=pid, score=float(score),
                entropy=float(shannon_entropy(score)),
                u_reg=float(np.sum(np.exp(prop.reg_log_var))),
                u_cls=float(np.exp(prop.logit_log_var)),
                iou=float(best_iou), distance=float(obj.distance),
                occlusion=int(obj.occlusion), n_points=int(obj.n_points),
                unsure=bool(obj.unsure)))
    return records


@dataclass
class HistogramPair:
    """Shared-edge density histograms of one field, split Sure vs Unsure."""

    field: str
    edges: np.ndarray
    density_sure: np.ndarray
    density_unsure: np.ndarray
    n_sure: int
    n_unsure: int

    @property
    def sure_empty(self) -> bool:
        return self.n_sure == 0

    @property
    def unsure_empty(self) -> bool:
        return self.n_unsure == 0


def histogram_by_label(records, field_name: str, n_bins: int) -> HistogramPair:
    """Density histograms over shared bin edges for Sure and Unsure groups.

    An empty group yields all-zero densities and is flagged through the
    *_empty properties.
    """
    if n_bins < 2:
        raise ValueError("histogram_by_label: n_bins must be >= 2")
    vals = np.array([getattr(r, field_name) for r in records], dtype=np.float64)
    unsure = np.array([r.unsure for r in records], dtype=bool)
    if len(vals) == 0:
        edges = np.linspace(0.0, 1.0, n_bins + 1)
        zeros = np.zeros(n_bins)
        return HistogramPair(field_name, edges, zeros, zeros.copy(), 0, 0)
    lo, hi = float(vals.min()), float(vals.max())
    if hi <= lo:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, n_bins + 1)
    sure_vals = vals[~unsure]
    unsure_vals = vals[unsure]
    d_sure = (np.histogram(sure_vals, bins=edges, density=True)[0]
              if len(sure_vals) else np.zeros(n_bins))
    d_unsure = (np.histogram(unsure_vals, bins=edges, density=True)[0]
                if len(unsure_vals) else np.zeros(n_bins))
    return HistogramPair(field_name, edges, d_sure, d_unsure,
                         int(len(sure_vals)), int(len(unsure_vals)))


def orthogonal_poly_contrasts(levels) -> np.ndarray:
    """Orthogonal polynomial contrast vectors for ordinal levels.

    Gram-Schmidt orthonormalization of powers 1..k-1 of the centered
    level scores. Returns a (k-1, k) array whose rows are mutually
    orthonormal and orthogonal to the all-ones vector.
    """
    scores = as_float_array(levels, "levels", ndim=1)
    k = len(scores)
    if k < 2:
        raise ValueError("orthogonal_poly_contrasts: need at least 2 levels")
    if len(np.unique(scores)) != k:
        raise ValueError("orthogonal_poly_contrasts: levels must be distinct")
    centered = scores - scores.mean()
    basis = [np.ones(k) / math.sqrt(k)]
    rows = []
    for power in range(1, k):
        v = centered ** power
        for b in basis:
            v = v - np.dot(v, b) * b
        # Second pass stabilizes near-parallel high powers.
        for b in basis:
            v = v - np.dot(v, b) * b
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise ValueError("orthogonal_poly_contrasts: degenerate level spacing")
        v = v / norm
        basis.append(v)
        rows.append(v)
    return np.array(rows)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified
    Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) via the continued fraction, using the symmetry
    I_x(a,b) = 1 - I_{1-x}(b,a) for fast convergence."""
    if not (a > 0 and b > 0):
        raise ValueError("regularized_incomplete_beta: a, b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_cdf(t: float, df: float) -> float:
    """P(T <= t) for Student's t with df degrees of freedom.

    Uses the identity P(T <= t) = 1 - I_x(df/2, 1/2)/2 for t >= 0 with
    x = df/(df + t^2), and symmetry for t < 0.
    """
    if df <= 0:
        raise ValueError("student_t_cdf: df must be positive")
    t = float(t)
    if t != t:
        raise ValueError("student_t_cdf: t is NaN")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x)
    return 1.0 - tail if t > 0 else tail


@dataclass
class FitReport:
    """OLS fit summary: coefficients with SE/t/p plus fit quality."""

    names: list
    beta: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p_values: np.ndarray
    r2: float
    adj_r2: float
    n: int
    p: int
    rss: float


def ols_fit(X, y, names=None) -> FitReport:
    """Ordinary least squares through the QR decomposition.

    X includes the intercept column; p counts the non-intercept
    predictors, so the residual dof is n - p - 1 = n - ncols.
    sigma2 = RSS/dof, SE_j = sqrt(sigma2 [(X'X)^-1]_jj), t_j = beta_j/SE_j,
    two-sided p from the Student-t CDF. Rank deficiency raises an error
    naming the collinear columns.
    """
    X = as_float_array(X, "X", ndim=2)
    y = as_float_array(y, "y", ndim=1)
    n, ncols = X.shape
    if len(y) != n:
        raise ValueError("ols_fit: X and y row counts differ")
    p = ncols - 1
    if n <= ncols:
        raise ValueError("ols_fit: need n > p + 1 observations")
    if names is None:
        names = [f"x{j}" for j in range(ncols)]
    names = list(names)
    if len(names) != ncols:
        raise ValueError("ols_fit: names length must match column count")

    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    scale = diag.max() if diag.size else 0.0
    bad = [names[j] for j in range(ncols) if diag[j] < 1e-10 * max(scale, 1.0)]
    if bad:
        raise ValueError(f"ols_fit: rank-deficient design, collinear columns: "
                         f"{', '.join(bad)}")
    beta = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ beta
    rss = float(resid @ resid)
    dof = n - ncols
    sigma2 = rss / dof
    r_inv = np.linalg.inv(R)
    xtx_inv = r_inv @ r_inv.T
    se = np.sqrt(sigma2 * np.diag(xtx_inv))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.inf * np.sign(beta))
    p_vals = np.array([2.0 * student_t_cdf(-abs(tj), dof) if math.isfinite(tj)
                       else 0.0 for tj in t])
    ybar = y.mean()
    tss = float(np.sum((y - ybar) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    adj_r2 = 1.0 - (1.0 - r2) * (n - 1) / dof
    return FitReport(names=names, beta=beta, se=se, t=t, p_values=p_vals,
                     r2=float(r2), adj_r2=float(adj_r2), n=n, p=p, rss=rss)


@dataclass
class AnalysisBundle:
    """Fits and histograms for the uncertainty-vs-difficulty analysis."""

    fits: dict
    histograms: dict
    summary: dict
    flags: list = field(default_factory=list)


HISTOGRAM_FIELDS = ("u_reg", "u_cls", "entropy")


def build_design(records, cfg: AnalysisConfig):
    """Design matrix: intercept, distance, occlusion contrasts over the
    observed levels, (log1p) point count, and the unsure indicator."""
    n = len(records)
    dist = np.array([r.distance for r in records])
    occ = np.array([r.occlusion for r in records])
    pts = np.array([r.n_points for r in records], dtype=np.float64)
    unsure = np.array([1.0 if r.unsure else 0.0 for r in records])

    cols = [np.ones(n), dist]
    names = ["intercept", "distance"]
    flags = []
    levels = np.unique(occ)
    if len(levels) >= 2:
        contrasts = orthogonal_poly_contrasts(levels.astype(np.float64))
        level_pos = {int(v): i for i, v in enumerate(levels)}
        idx = np.array([level_pos[int(v)] for v in occ])
        for ci in range(contrasts.shape[0]):
            cols.append(contrasts[ci][idx])
            names.append(f"occlusion_poly{ci + 1}")
    else:
        flags.append("occlusion constant: contrast columns omitted")
    if cfg.log_points:
        cols.append(np.log1p(pts))
        names.append("log1p_n_points")
    else:
        cols.append(pts)
        names.append("n_points")
    if 0.0 < unsure.mean() < 1.0:
        cols.append(unsure)
        names.append("unsure")
    else:
        flags.append("single unsure label: unsure predictor omitted")
    return np.column_stack(cols), names, flags


def analyze(records, cfg: AnalysisConfig | None = None) -> AnalysisBundle:
    """Fit the two uncertainty models and build the group histograms.

    Responses are u_reg and u_cls; predictors are distance, occlusion
    contrasts, point count, and the unsure indicator (dropped with a flag
    when only one label is present). Predictors are unstandardized.
    """
    cfg = cfg or AnalysisConfig()
    if not records:
        raise ValueError("analyze: records must be nonempty")
    X, names, flags = build_design(records, cfg)
    fits = {}
    for response in ("u_reg", "u_cls"):
        y = np.array([getattr(r, response) for r in records])
        fits[response] = ols_fit(X, y, names)
    histograms = {f: histogram_by_label(records, f, cfg.n_bins)
                  for f in HISTOGRAM_FIELDS}
    sure = [r for r in records if not r.unsure]
    unsure = [r for r in records if r.unsure]

    def group_means(rows):
        if not rows:
            return {}
        return {f: float(np.mean([getattr(r, f) for r in rows]))
                for f in HISTOGRAM_FIELDS}

    summary = {
        "n_records": len(records),
        "n_sure": len(sure),
        "n_unsure": len(unsure),
        "mean_sure": group_means(sure),
        "mean_unsure": group_means(unsure),
        "predictors": names,
        "standardized": False,
        "flags": flags,
    }
    return AnalysisBundle(fits=fits, histograms=histograms, summary=summary,
                          flags=flags)


def write_fit_csv(fit: FitReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["term", "beta", "se", "t", "p"])
        for j, name in enumerate(fit.names):
            w.writerow([name, repr(float(fit.beta[j])), repr(float(fit.se[j])),
                        repr(float(fit.t[j])), repr(float(fit.p_values[j]))])


def write_histogram_csv(hist: HistogramPair, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "density_sure", "density_unsure"])
        for i in range(len(hist.density_sure)):
            w.writerow([repr(float(hist.edges[i])), repr(float(hist.edges[i + 1])),
                        repr(float(hist.density_sure[i])),
                        repr(float(hist.density_unsure[i]))])


def write_analysis_summary(bundle: AnalysisBundle, path):
    payload = dict(bundle.summary)
    payload["fits"] = {
        resp: {
            "terms": fit.names,
            "beta": [float(b) for b in fit.beta],
            "se": [float(s) for s in fit.se],
            "t": [float(t) for t in fit.t],
            "p": [float(p) for p in fit.p_values],
            "r2": fit.r2,
            "adj_r2": fit.adj_r2,
            "n": fit.n,
        }
        for resp, fit in bundle.fits.items()
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
