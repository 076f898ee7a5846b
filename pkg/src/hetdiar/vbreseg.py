"""Variational-Bayes resegmentation.

A diagonal-covariance UBM-GMM and a low-rank eigenvoice subspace over its
mean supervector provide a per-frame generative speaker model. Starting
from an initial diarization, the resegmenter alternates exact coordinate
updates of (a) Gaussian posteriors over each speaker's subspace
coordinates and (b) frame-to-speaker responsibilities under an HMM prior
with self-loop probability ``loop_probability`` and a minimum-duration
state chain, so the evidence lower bound is non-decreasing. Zeroth and
first-order statistics are aggregated over ``downsampling_factor``
consecutive frames to cut cost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .errors import DataError, NumericError
from .io import read_container, write_container
from .metrics import DiarizationHypothesis, _merge_spans, _to_ms
from .validation import check_feature_matrix, check_positive

logger = logging.getLogger(__name__)

VB_MAGIC = b"HDVB"


class DiagonalUbm(BaseEstimator):
    """Diagonal-covariance GMM fitted with EM from a k-means start."""

    def __init__(self, n_components: int = 32, n_iter: int = 10, seed: int = 0,
                 kmeans_iter: int = 10):
        self.n_components = n_components
        self.n_iter = n_iter
        self.seed = seed
        self.kmeans_iter = kmeans_iter

    def fit(self, X, y=None):
        X = check_feature_matrix(X, "UBM features")
        n, dim = X.shape
        k = self.n_components
        if n < k:
            raise DataError(f"UBM needs at least {k} frames, got {n}")
        rng = np.random.default_rng(self.seed)
        var_floor = max(1e-10, 1e-6 * float(X.var(axis=0).mean()))

        means = X[rng.choice(n, size=k, replace=False)].copy()
        for _ in range(self.kmeans_iter):
            assign = np.argmin(
                ((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2), axis=1)
            for c in range(k):
                mask = assign == c
                if mask.any():
                    means[c] = X[mask].mean(axis=0)
        counts = np.bincount(assign, minlength=k).astype(np.float64)
        weights = np.maximum(counts, 1.0)
        weights /= weights.sum()
        variances = np.empty((k, dim))
        for c in range(k):
            mask = assign == c
            variances[c] = X[mask].var(axis=0) if mask.sum() > 1 else X.var(axis=0)
        variances = np.maximum(variances, var_floor)

        curve = []
        for _ in range(self.n_iter):
            log_post = np.log(weights) + _log_gauss_diag(X, means, variances)
            ll_rows = _logsumexp_rows(log_post)
            curve.append(float(ll_rows.sum()))
            gamma = np.exp(log_post - ll_rows[:, None])
            occ = gamma.sum(axis=0)
            empty = occ < 1e-6
            if empty.any():
                best = int(np.argmax(occ))
                for c in np.nonzero(empty)[0]:
                    logger.warning("UBM component %d empty; re-seeding from %d", c, best)
                    means[c] = means[best] + 1e-3 * np.sqrt(variances[best])
                    variances[c] = variances[best]
                    weights[c] = weights[best] / 2
                    weights[best] /= 2
                weights /= weights.sum()
                continue
            weights = occ / n
            means = (gamma.T @ X) / occ[:, None]
            variances = np.maximum((gamma.T @ (X ** 2)) / occ[:, None] - means ** 2,
                                   var_floor)
        log_post = np.log(weights) + _log_gauss_diag(X, means, variances)
        curve.append(float(_logsumexp_rows(log_post).sum()))

        self.weights_ = weights
        self.means_ = means
        self.variances_ = variances
        self.loglik_curve_ = curve
        return self

    @property
    def dim(self) -> int:
        return self.means_.shape[1]

    def frame_log_likelihood(self, X) -> np.ndarray:
        """Per-frame, per-component log w_k + log N(x; m_k, var_k)."""
        X = check_feature_matrix(X)
        return np.log(self.weights_) + _log_gauss_diag(X, self.means_, self.variances_)

    def predict_proba(self, X) -> np.ndarray:
        log_post = self.frame_log_likelihood(X)
        gamma = np.exp(log_post - _logsumexp_rows(log_post)[:, None])
        if not np.all(np.isfinite(gamma)):
            raise NumericError("non-finite UBM responsibilities")
        return gamma


def _log_gauss_diag(X, means, variances) -> np.ndarray:
    dim = X.shape[1]
    inv = 1.0 / variances
    const = -0.5 * (dim * np.log(2 * np.pi) + np.log(variances).sum(axis=1)
                    + (means ** 2 * inv).sum(axis=1))
    return const + X @ (means * inv).T - 0.5 * (X ** 2) @ inv.T


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def train_ubm(features, n_components: int, n_iter: int = 10, seed: int = 0) -> DiagonalUbm:
    frames = features.frames if hasattr(features, "frames") else features
    return DiagonalUbm(n_components=n_components, n_iter=n_iter, seed=seed).fit(frames)


def collect_stats(ubm: DiagonalUbm, frames) -> tuple[np.ndarray, np.ndarray]:
    """Zeroth/first-order sufficient statistics of one speaker's frames."""
    frames = frames.frames if hasattr(frames, "frames") else frames
    gamma = ubm.predict_proba(frames)
    return gamma.sum(axis=0), gamma.T @ frames


@dataclass
class EigenvoiceModel:
    """UBM plus a rank-R subspace of mean-supervector offsets."""

    ubm: DiagonalUbm
    bases_kdr: np.ndarray  # (K, D, R)

    @property
    def n_bases(self) -> int:
        return self.bases_kdr.shape[2]

    @property
    def bases(self) -> np.ndarray:
        """(K*D) x R eigenvoice matrix view."""
        k, d, r = self.bases_kdr.shape
        return self.bases_kdr.reshape(k * d, r)


def train_eigenvoices(ubm: DiagonalUbm, per_speaker_stats, n_bases: int,
                      n_iter: int = 10, seed: int = 0) -> EigenvoiceModel:
    """Maximum-likelihood eigenvoice estimation from per-speaker statistics."""
    stats = list(per_speaker_stats)
    n_speakers = len(stats)
    if n_bases < 1:
        raise DataError("need at least one eigenvoice basis")
    if n_bases > n_speakers:
        raise DataError(
            f"{n_bases} bases exceed the {n_speakers} available speakers")
    k, d = ubm.means_.shape
    r = n_bases
    zeroth = np.stack([np.asarray(z, dtype=np.float64) for z, _ in stats])  # (S, K)
    first = np.stack([np.asarray(f, dtype=np.float64) for _, f in stats])  # (S, K, D)
    centered = first - zeroth[:, :, None] * ubm.means_[None, :, :]
    inv_var = 1.0 / ubm.variances_  # (K, D)

    rng = np.random.default_rng(seed)
    v = rng.normal(0.0, 0.01, size=(k, d, r))
    eye = np.eye(r)
    for _ in range(n_iter):
        gram = np.einsum("kdr,kd,kds->krs", v, inv_var, v)  # (K, R, R)
        lam = eye[None] + np.einsum("sk,krt->srt", zeroth, gram)
        b = np.einsum("kdr,kd,skd->sr", v, inv_var, centered)
        y = np.linalg.solve(lam, b)
        lam_inv = np.linalg.inv(lam)
        eyy = lam_inv + y[:, :, None] * y[:, None, :]
        numer = np.einsum("skd,sr->kdr", centered, y)
        denom = np.einsum("sk,srt->krt", zeroth, eyy) + 1e-10 * eye[None]
        v = np.linalg.solve(denom.transpose(0, 2, 1), numer.transpose(0, 2, 1))
        v = v.transpose(0, 2, 1)
    return EigenvoiceModel(ubm=ubm, bases_kdr=v)


@dataclass
class VbParams:
    min_duration: int = 1
    loop_probability: float = 0.9
    downsampling_factor: int = 25
    max_iterations: int = 10

    def __post_init__(self):
        check_positive(self.min_duration, "min_duration")
        check_positive(self.downsampling_factor, "downsampling_factor")
        if not 0 < self.loop_probability < 1:
            raise DataError("loop_probability must be in (0, 1)")
        if self.max_iterations < 0:
            raise DataError("max_iterations must be >= 0")


def _transition_matrix(n_speakers: int, dur: int, loop_prob: float) -> np.ndarray:
    n_states = n_speakers * dur
    a = np.zeros((n_states, n_states))
    for s in range(n_speakers):
        base = s * dur
        for p in range(dur - 1):
            a[base + p, base + p + 1] = 1.0
        last = base + dur - 1
        if n_speakers == 1:
            a[last, last] = 1.0
        else:
            a[last, last] = loop_prob
            for s2 in range(n_speakers):
                if s2 != s:
                    a[last, s2 * dur] = (1.0 - loop_prob) / (n_speakers - 1)
    return a


def _forward_backward(g: np.ndarray, loop_prob: float, dur: int):
    """Scaled forward-backward over the duration-expanded speaker chain.

    ``g`` holds per-block, per-speaker expected log-likelihoods. Returns
    (log evidence, per-block speaker posteriors).
    """
    nb, n_speakers = g.shape
    gmax = g.max(axis=1)
    emission = np.exp(np.clip(g - gmax[:, None], -700, 0))
    emission = np.repeat(emission, dur, axis=1)  # (nb, S*dur)
    a = _transition_matrix(n_speakers, dur, loop_prob)
    n_states = n_speakers * dur

    init = np.zeros(n_states)
    init[::dur] = 1.0 / n_speakers

    alpha = np.empty((nb, n_states))
    scale = np.empty(nb)
    cur = init * emission[0]
    scale[0] = cur.sum()
    if scale[0] <= 0:
        raise NumericError("forward pass underflowed at block 0")
    alpha[0] = cur / scale[0]
    for t in range(1, nb):
        cur = (alpha[t - 1] @ a) * emission[t]
        scale[t] = cur.sum()
        if scale[t] <= 0:
            raise NumericError(f"forward pass underflowed at block {t}")
        alpha[t] = cur / scale[t]

    beta = np.empty((nb, n_states))
    beta[-1] = 1.0
    for t in range(nb - 2, -1, -1):
        beta[t] = a @ (emission[t + 1] * beta[t + 1]) / scale[t + 1]

    post = alpha * beta
    post /= post.sum(axis=1, keepdims=True)
    post_speaker = post.reshape(nb, n_speakers, dur).sum(axis=2)
    log_evidence = float(np.log(scale).sum() + gmax.sum())
    return log_evidence, post_speaker


def _hypothesis_frames(init: DiarizationHypothesis, frame_shift_s: float, n_frames: int):
    """Frame labels (-1 silence), speaker order, and merged speech regions."""
    if not init.intervals:
        raise DataError("empty initialization hypothesis")
    speakers = init.speakers
    index = {spk: i for i, spk in enumerate(speakers)}
    shift_ms = int(round(frame_shift_s * 1000))
    labels = np.full(n_frames, -1, dtype=int)
    spans_ms = []
    for start, end, spk in init.intervals:
        s_ms, e_ms = _to_ms(start), _to_ms(end)
        spans_ms.append((s_ms, e_ms))
        lo = min(max(0, int(round(s_ms / shift_ms))), n_frames)
        hi = min(max(0, int(round(e_ms / shift_ms))), n_frames)
        seg = labels[lo:hi]
        seg[seg == -1] = index[spk]  # first interval wins on overlap
    regions = []
    for s_ms, e_ms in _merge_spans(spans_ms):
        lo = min(max(0, int(round(s_ms / shift_ms))), n_frames)
        hi = min(max(0, int(round(e_ms / shift_ms))), n_frames)
        regions.append((s_ms, e_ms, lo, hi))
    return labels, list(speakers), regions


def _aggregate_blocks(arr: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of ``factor`` rows (last block may be short)."""
    n = arr.shape[0]
    nb = (n + factor - 1) // factor
    pad = nb * factor - n
    if pad:
        arr = np.concatenate([arr, np.zeros((pad,) + arr.shape[1:])])
    return arr.reshape(nb, factor, *arr.shape[1:]).sum(axis=1)


def vb_resegment(features, init: DiarizationHypothesis, model: EigenvoiceModel,
                 params: VbParams, return_trace: bool = False):
    """Refine an initial diarization with VB updates on the original timeline."""
    frames = features.frames
    shift = features.frame_shift_s
    labels, speakers, regions = _hypothesis_frames(init, shift, frames.shape[0])
    if params.max_iterations == 0:
        result = DiarizationHypothesis(init.session_id, list(init.intervals))
        return (result, {"elbo": []}) if return_trace else result

    mask = labels >= 0
    speech = frames[mask]
    speech_labels = labels[mask]
    n = speech.shape[0]
    n_speakers = len(speakers)
    if n == 0:
        result = DiarizationHypothesis(init.session_id, list(init.intervals))
        return (result, {"elbo": []}) if return_trace else result

    ubm = model.ubm
    k, d, r = model.bases_kdr.shape
    inv_var = 1.0 / ubm.variances_
    gamma = ubm.predict_proba(speech)  # (n, K)
    frame_ll = ubm.frame_log_likelihood(speech)
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = np.where(gamma > 0, gamma * np.log(gamma), 0.0).sum(axis=1)
    const = (gamma * frame_ll).sum(axis=1) - entropy  # (n,)

    proj = np.zeros((n, r))
    for comp in range(k):
        weighted = gamma[:, comp:comp + 1] * (speech - ubm.means_[comp]) * inv_var[comp]
        proj += weighted @ model.bases_kdr[comp]

    f = params.downsampling_factor
    gamma_b = _aggregate_blocks(gamma, f)
    proj_b = _aggregate_blocks(proj, f)
    const_b = _aggregate_blocks(const[:, None], f)[:, 0]
    nb = gamma_b.shape[0]

    q = np.zeros((nb, n_speakers))
    for b in range(nb):
        votes = np.bincount(speech_labels[b * f:(b + 1) * f], minlength=n_speakers)
        q[b, int(np.argmax(votes))] = 1.0

    gram = np.einsum("kdr,kd,kds->krs", model.bases_kdr, inv_var, model.bases_kdr)
    eye = np.eye(r)
    elbo_trace: list[float] = []
    for _ in range(params.max_iterations):
        occ = q.T @ gamma_b  # (S, K)
        lam = eye[None] + np.einsum("sk,krt->srt", occ, gram)
        b_vec = q.T @ proj_b  # (S, R)
        y = np.linalg.solve(lam, b_vec)
        lam_inv = np.linalg.inv(lam)
        second = lam_inv + y[:, :, None] * y[:, None, :]
        psi = np.einsum("krt,srt->sk", gram, second)
        g = const_b[:, None] + proj_b @ y.T - 0.5 * gamma_b @ psi.T
        log_ev, q = _forward_backward(g, params.loop_probability, params.min_duration)
        if not np.all(np.isfinite(q)):
            raise NumericError("non-finite speaker responsibilities")
        sign, logdet = np.linalg.slogdet(lam)
        kl = 0.5 * float(np.sum(np.trace(lam_inv, axis1=1, axis2=2))
                         + np.sum(y ** 2) - n_speakers * r + logdet.sum())
        elbo_trace.append(log_ev - kl)

    block_labels = np.argmax(q, axis=1)
    speech_out = np.repeat(block_labels, f)[:n]
    full = np.full(frames.shape[0], -1, dtype=int)
    full[mask] = speech_out

    shift_ms = int(round(shift * 1000))
    intervals: list[tuple[float, float, str]] = []
    for s_ms, e_ms, lo, hi in regions:
        if hi <= lo:
            for start, end, spk in init.intervals:
                if _to_ms(start) >= s_ms and _to_ms(end) <= e_ms:
                    intervals.append((start, end, spk))
            continue
        run_label = full[lo]
        run_start_ms = s_ms
        for t in range(lo + 1, hi):
            if full[t] != run_label:
                boundary_ms = t * shift_ms
                intervals.append((run_start_ms / 1000, boundary_ms / 1000,
                                  speakers[run_label]))
                run_start_ms = boundary_ms
                run_label = full[t]
        intervals.append((run_start_ms / 1000, e_ms / 1000, speakers[run_label]))
    result = DiarizationHypothesis(init.session_id, intervals)
    return (result, {"elbo": elbo_trace}) if return_trace else result


def save_vb_model(path, model: EigenvoiceModel) -> None:
    k, d, r = model.bases_kdr.shape
    header = {"K": int(k), "D": int(d), "R": int(r)}
    tensors = [model.ubm.weights_, model.ubm.means_, model.ubm.variances_,
               model.bases_kdr.reshape(k * d, r)]
    write_container(path, VB_MAGIC, header, tensors, dtype="<f8")


def load_vb_model(path) -> EigenvoiceModel:
    header, tensors = read_container(path, VB_MAGIC, dtype="<f8", n_tensors=4)
    weights, means, variances, bases = tensors
    k, d, r = header["K"], header["D"], header["R"]
    if means.shape != (k, d) or bases.shape != (k * d, r):
        raise DataError("VB model header disagrees with tensor shapes")
    ubm = DiagonalUbm(n_components=k)
    ubm.weights_ = weights
    ubm.means_ = means
    ubm.variances_ = variances
    ubm.loglik_curve_ = []
    return EigenvoiceModel(ubm=ubm, bases_kdr=bases.reshape(k, d, r))
