"""Agglomerative clustering over pairwise similarity scores.

Average linkage on the raw scores: the pair of clusters with the highest
mean cross-pair similarity merges first, ties resolving to the smallest
(i, j) position pair, so runs are deterministic. Merging stops either at
a known cluster count or when the best merge falls below a threshold
calibrated on development sessions.

A secondary mode clusters the rows of the similarity matrix by negative
Euclidean distance instead of the scores themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator, ClusterMixin

from .errors import DataError
from .validation import check_similarity_matrix


def _row_distance_similarity(s: np.ndarray) -> np.ndarray:
    sq = np.sum(s ** 2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * s @ s.T, 0.0)
    return -np.sqrt(d2)


def merge_sequence(similarity: np.ndarray, linkage_input: str = "scores"):
    """Run average-linkage merging down to one cluster.

    Returns a list of (score, position_i, position_j, labels_before_merge is
    implicit) triples; replaying the first ``t`` merges with
    :func:`labels_after` reconstructs any intermediate partition.
    """
    s = check_similarity_matrix(similarity)
    if linkage_input == "row-distance":
        s = _row_distance_similarity(s)
    elif linkage_input != "scores":
        raise DataError(f"unknown linkage_input {linkage_input!r}")
    m = s.shape[0]
    cross = s.copy().astype(np.float64)
    sizes = np.ones(m)
    members = [[i] for i in range(m)]
    merges: list[tuple[float, int, int]] = []
    while len(members) > 1:
        k = len(members)
        avg = cross / np.outer(sizes, sizes)
        np.fill_diagonal(avg, -np.inf)
        flat = int(np.argmax(avg))  # row-major: first max is lexicographic smallest
        i, j = divmod(flat, k)
        if i > j:
            i, j = j, i
        merges.append((float(avg[i, j]), i, j))
        cross[i, :] += cross[j, :]
        cross[:, i] += cross[:, j]
        cross[i, i] = 0.0  # unused: diagonal is masked
        sizes[i] += sizes[j]
        members[i] = members[i] + members[j]
        cross = np.delete(np.delete(cross, j, axis=0), j, axis=1)
        sizes = np.delete(sizes, j)
        del members[j]
    return merges


def labels_after(m: int, merges, n_merges: int) -> np.ndarray:
    """First-occurrence-ordered labels after replaying ``n_merges`` merges."""
    members = [[i] for i in range(m)]
    for _, i, j in merges[:n_merges]:
        members[i] = members[i] + members[j]
        del members[j]
    assignment = np.empty(m, dtype=int)
    for cid, cluster in enumerate(members):
        for idx in cluster:
            assignment[idx] = cid
    labels = np.empty(m, dtype=int)
    relabel: dict[int, int] = {}
    for idx in range(m):
        cid = assignment[idx]
        if cid not in relabel:
            relabel[cid] = len(relabel)
        labels[idx] = relabel[cid]
    return labels


def ahc(similarity, n_clusters: int | None = None, threshold: float | None = None,
        linkage_input: str = "scores") -> np.ndarray:
    """Cluster segments from a symmetric similarity matrix.

    Exactly one stopping rule applies: merge down to ``n_clusters``, or
    merge while the best average similarity is >= ``threshold``.
    """
    s = check_similarity_matrix(similarity)
    m = s.shape[0]
    if (n_clusters is None) == (threshold is None):
        raise DataError("specify exactly one of n_clusters and threshold")
    if n_clusters is not None:
        if not 1 <= n_clusters:
            raise DataError("n_clusters must be >= 1")
        if n_clusters > m:
            raise DataError(f"n_clusters={n_clusters} exceeds {m} segments")
    if m == 1:
        return np.zeros(1, dtype=int)
    merges = merge_sequence(s, linkage_input=linkage_input)
    if n_clusters is not None:
        n_merges = m - n_clusters
    else:
        n_merges = len(merges)
        for t, (score, _, _) in enumerate(merges):
            if score < threshold:
                n_merges = t
                break
    return labels_after(m, merges, n_merges)


class AgglomerativeScoreClustering(BaseEstimator, ClusterMixin):
    """Estimator facade over :func:`ahc`."""

    def __init__(self, n_clusters: int | None = None, threshold: float | None = None,
                 linkage_input: str = "scores"):
        self.n_clusters = n_clusters
        self.threshold = threshold
        self.linkage_input = linkage_input

    def fit(self, X, y=None):
        self.labels_ = ahc(X, n_clusters=self.n_clusters, threshold=self.threshold,
                           linkage_input=self.linkage_input)
        return self

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).labels_


def segment_confusion(pred_labels, ref_labels) -> float:
    """Fraction of segments misassigned under the optimal label mapping."""
    pred = np.asarray(pred_labels)
    ref = np.asarray(ref_labels)
    if pred.shape != ref.shape:
        raise DataError("prediction/reference label lengths differ")
    pu, pi = np.unique(pred, return_inverse=True)
    ru, ri = np.unique(ref, return_inverse=True)
    contingency = np.zeros((len(pu), len(ru)), dtype=np.int64)
    np.add.at(contingency, (pi, ri), 1)
    rows, cols = linear_sum_assignment(-contingency)
    matched = contingency[rows, cols].sum()
    return 1.0 - matched / len(pred)


@dataclass
class CalibrationResult:
    threshold: float
    error: float
    grid: list[float]
    errors: list[float]


def calibrate_threshold(dev_sessions, n_grid: int = 64,
                        linkage_input: str = "scores") -> CalibrationResult:
    """Grid-search a stopping threshold on (similarity, reference-labels) pairs.

    The objective is the mean segment-level confusion under the optimal
    speaker mapping; the grid spans the merge scores observed on the
    development sessions. Of equal-error thresholds the lowest wins.
    """
    dev_sessions = list(dev_sessions)
    if not dev_sessions:
        raise DataError("calibrate_threshold needs at least one dev session")
    prepared = []
    all_scores: list[float] = []
    for sim, ref_labels in dev_sessions:
        sim = check_similarity_matrix(sim)
        merges = merge_sequence(sim, linkage_input=linkage_input)
        prepared.append((sim.shape[0], merges, np.asarray(ref_labels)))
        all_scores.extend(score for score, _, _ in merges)
    if not all_scores:
        return CalibrationResult(0.0, _mean_confusion(prepared, 0.0), [0.0], [0.0])
    lo, hi = min(all_scores), max(all_scores)
    grid = list(np.linspace(lo, hi, n_grid)) if hi > lo else [lo]
    errors = [_mean_confusion(prepared, thr) for thr in grid]
    best = int(np.argmin(errors))
    return CalibrationResult(float(grid[best]), float(errors[best]),
                             [float(g) for g in grid], [float(e) for e in errors])


def _mean_confusion(prepared, threshold: float) -> float:
    errs = []
    for m, merges, ref in prepared:
        n_merges = len(merges)
        for t, (score, _, _) in enumerate(merges):
            if score < threshold:
                n_merges = t
                break
        errs.append(segment_confusion(labels_after(m, merges, n_merges), ref))
    return float(np.mean(errs))
