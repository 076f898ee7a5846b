"""2-D projection of embeddings for geometry reports.

PCA is the exact top-2 eigenprojection of the sample covariance. The
t-SNE implementation follows the standard symmetric formulation with a
student-t low-dimensional kernel: perplexity calibration by per-point
binary search, an early-exaggeration phase with momentum, then plain
gradient descent with backtracking line search, which makes the KL
objective non-increasing once exaggeration ends.
"""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass

import numpy as np
from scipy.stats import gaussian_kde
from sklearn.base import BaseEstimator

from .errors import DataError, NumericError
from .validation import as_float_array

EXAGGERATION = 12.0
_P_FLOOR = 1e-12


def pca_project(X, n_components: int = 2):
    """Exact top eigenprojection; returns (points, components, eigenvalues)."""
    X = as_float_array(X, "embeddings", ndim=2)
    if X.shape[0] < 2:
        raise DataError("PCA needs at least 2 points")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / X.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    components = vecs[:, order]
    return centered @ components, components, vals[order]


def _conditional_p(distances_sq: np.ndarray, perplexity: float) -> np.ndarray:
    """Per-point Gaussian affinities calibrated to the target perplexity."""
    m = distances_sq.shape[0]
    target = np.log(perplexity)
    p = np.zeros((m, m))
    for i in range(m):
        d = np.delete(distances_sq[i], i)
        lo, hi = 1e-20, 1e20
        beta = 1.0
        for _ in range(64):
            w = np.exp(-d * beta)
            sum_w = w.sum()
            if sum_w <= 0:
                hi = beta
                beta = (lo + hi) / 2
                continue
            h = np.log(sum_w) + beta * (d * w).sum() / sum_w
            if abs(h - target) < 1e-7:
                break
            if h > target:
                lo = beta
            else:
                hi = beta
            beta = (lo + hi) / 2
        row = np.exp(-d * beta)
        row /= row.sum()
        p[i, np.arange(m) != i] = row
    return p


def _kl_and_grad(p: np.ndarray, y: np.ndarray, compute_grad: bool = True):
    diff = y[:, None, :] - y[None, :, :]
    dist_sq = (diff ** 2).sum(axis=2)
    inv = 1.0 / (1.0 + dist_sq)
    np.fill_diagonal(inv, 0.0)
    q = inv / inv.sum()
    q = np.maximum(q, _P_FLOOR)
    kl = float((p * (np.log(np.maximum(p, _P_FLOOR)) - np.log(q))).sum())
    if not compute_grad:
        return kl, None
    pq = (p - q) * inv
    grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)
    return kl, grad


def tsne_project(X, perplexity: float = 30.0, n_iter: int = 1000, seed: int = 0,
                 learning_rate: float = 100.0):
    """Symmetric t-SNE to 2-D; returns (points, kl_trace, exaggeration_end)."""
    X = as_float_array(X, "embeddings", ndim=2)
    m = X.shape[0]
    if m < 4:
        raise DataError("t-SNE needs at least 4 points")
    if perplexity >= (m - 1) / 3:
        raise DataError(
            f"perplexity {perplexity} infeasible for {m} points; "
            f"needs < (m - 1) / 3 = {(m - 1) / 3:.1f}")
    sq = np.sum(X ** 2, axis=1)
    dist_sq = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
    cond = _conditional_p(dist_sq, perplexity)
    p = (cond + cond.T) / (2.0 * m)
    p = np.maximum(p, _P_FLOOR)
    p /= p.sum()

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(m, 2))
    exag_end = min(250, max(1, n_iter // 4))
    velocity = np.zeros_like(y)
    kl_trace: list[float] = []

    p_ex = p * EXAGGERATION
    p_ex /= p_ex.sum()
    for it in range(min(exag_end, n_iter)):
        _, grad = _kl_and_grad(p_ex, y)
        velocity = 0.5 * velocity - learning_rate * grad
        y = y + velocity
        kl_trace.append(_kl_and_grad(p, y, compute_grad=False)[0])

    step = learning_rate
    kl, grad = _kl_and_grad(p, y)
    for it in range(exag_end, n_iter):
        accepted = False
        for _ in range(40):
            y_new = y - step * grad
            kl_new, grad_new = _kl_and_grad(p, y_new)
            if kl_new <= kl:
                y, kl, grad = y_new, kl_new, grad_new
                step *= 1.1
                accepted = True
                break
            step /= 2.0
        if not accepted:  # at a stationary point within float precision
            pass
        kl_trace.append(kl)
    if not np.all(np.isfinite(y)):
        raise NumericError("t-SNE diverged to non-finite coordinates")
    return y, kl_trace, exag_end


def project_embeddings(embeddings, labels, method: str = "tsne",
                       perplexity: float = 30.0, n_iter: int = 1000, seed: int = 0,
                       groups=None):
    """Project to 2-D and return (points, csv_text, kl_trace)."""
    embeddings = as_float_array(embeddings, "embeddings", ndim=2)
    labels = list(labels)
    if len(labels) != embeddings.shape[0]:
        raise DataError("labels and embeddings are misaligned")
    groups = list(groups) if groups is not None else labels
    if method == "pca":
        points, _, _ = pca_project(embeddings)
        kl_trace: list[float] = []
    elif method == "tsne":
        points, kl_trace, _ = tsne_project(embeddings, perplexity=perplexity,
                                           n_iter=n_iter, seed=seed)
    else:
        raise DataError(f"unknown projection method {method!r}")
    buf = _io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["x", "y", "label", "group"])
    for (x, yv), lab, grp in zip(points, labels, groups):
        writer.writerow([f"{x:.6f}", f"{yv:.6f}", lab, grp])
    return points, buf.getvalue(), kl_trace


def kde_grids(points: np.ndarray, groups, grid_size: int = 32) -> dict:
    """Per-group 2-D kernel density grids (Scott's-rule bandwidth)."""
    points = as_float_array(points, "points", ndim=2)
    groups = np.asarray(list(groups))
    pad = 0.05 * (points.max(axis=0) - points.min(axis=0) + 1e-9)
    lo = points.min(axis=0) - pad
    hi = points.max(axis=0) + pad
    xs = np.linspace(lo[0], hi[0], grid_size)
    ys = np.linspace(lo[1], hi[1], grid_size)
    mesh = np.stack(np.meshgrid(xs, ys), axis=0).reshape(2, -1)
    out = {"x_grid": xs.tolist(), "y_grid": ys.tolist(), "groups": {}}
    for group in dict.fromkeys(groups.tolist()):
        pts = points[groups == group]
        entry: dict = {"count": int(pts.shape[0])}
        if pts.shape[0] < 3 or np.linalg.matrix_rank(np.cov(pts.T)) < 2:
            entry["density"] = None
            entry["note"] = "too few or degenerate points for a KDE"
        else:
            kde = gaussian_kde(pts.T)  # Scott's rule by default
            entry["density"] = kde(mesh).reshape(grid_size, grid_size).tolist()
        out["groups"][str(group)] = entry
    return out


@dataclass
class ProjectionResult:
    points: np.ndarray
    csv_text: str
    kl_trace: list[float]
    kde: dict


class EmbeddingProjector(BaseEstimator):
    """Estimator facade over the projection functions."""

    def __init__(self, method: str = "tsne", perplexity: float = 30.0,
                 n_iter: int = 1000, seed: int = 0):
        self.method = method
        self.perplexity = perplexity
        self.n_iter = n_iter
        self.seed = seed

    def fit_transform(self, X, y=None) -> np.ndarray:
        labels = y if y is not None else [""] * len(X)
        points, csv_text, kl_trace = project_embeddings(
            X, labels, method=self.method, perplexity=self.perplexity,
            n_iter=self.n_iter, seed=self.seed)
        self.csv_text_ = csv_text
        self.kl_trace_ = kl_trace
        return points
