"""Embedding preprocessing and two-covariance PLDA.

The preprocessor centers, whitens (eigendecomposition of the sample
covariance with a 1e-8 eigenvalue floor), and length-normalizes
embeddings. PLDA models a preprocessed embedding as ``x = V h + eps``
with speaker factor ``h ~ N(0, I_r)`` and residual ``eps ~ N(0, Sigma)``
(full covariance), trained by EM on per-speaker sufficient statistics.
Pair scores are exact same-vs-different-speaker log-likelihood ratios.
"""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import DataError, NumericError
from .io import read_container, write_container
from .validation import as_float_array

PLDA_MAGIC = b"HDPL"
EIGENVALUE_FLOOR = 1e-8


class EmbeddingPreprocessor(BaseEstimator, TransformerMixin):
    """Centering + whitening + length normalization."""

    def __init__(self, eigenvalue_floor: float = EIGENVALUE_FLOOR):
        self.eigenvalue_floor = eigenvalue_floor

    def fit(self, X, y=None):
        X = as_float_array(X, "embeddings", ndim=2)
        n, dim = X.shape
        if n < 2:
            raise DataError("preprocessor needs at least 2 embeddings")
        if n <= dim:
            warnings.warn(
                f"fitting a whitener on {n} samples of dimension {dim}; "
                "the sample covariance is rank-deficient", stacklevel=2)
        self.mean_ = X.mean(axis=0)
        centered = X - self.mean_
        cov = centered.T @ centered / n
        vals, vecs = np.linalg.eigh(cov)
        if np.max(vals) < self.eigenvalue_floor:
            warnings.warn("degenerate covariance; whitening floored", stacklevel=2)
        vals = np.maximum(vals, self.eigenvalue_floor)
        self.whitening_ = (vecs / np.sqrt(vals)).T
        return self

    def transform(self, X) -> np.ndarray:
        X = as_float_array(X, "embeddings")
        single = X.ndim == 1
        if single:
            X = X[None, :]
        w = (X - self.mean_) @ self.whitening_.T
        norms = np.linalg.norm(w, axis=1)
        if np.any(norms == 0):
            raise DataError("embedding equals the preprocessor mean; zero after centering")
        out = w / norms[:, None]
        return out[0] if single else out


def fit_preprocessor(embeddings) -> EmbeddingPreprocessor:
    return EmbeddingPreprocessor().fit(embeddings)


def preprocess(p: EmbeddingPreprocessor, v) -> np.ndarray:
    """Whiten and length-normalize one embedding vector."""
    return p.transform(np.asarray(v, dtype=np.float64))


def _group_stats(X: np.ndarray, speaker_ids):
    ids = np.asarray(speaker_ids)
    if ids.shape[0] != X.shape[0]:
        raise DataError("speaker_ids and embeddings are misaligned")
    uniq, inverse = np.unique(ids, return_inverse=True)
    counts = np.bincount(inverse).astype(np.float64)
    sums = np.zeros((len(uniq), X.shape[1]))
    np.add.at(sums, inverse, X)
    return uniq, counts, sums


class Plda(BaseEstimator):
    """Two-covariance PLDA estimator.

    Parameters
    ----------
    rank : int or None
        Speaker-subspace rank; ``None`` uses ``embed_dim // 2``.
    n_iter : int
        EM iterations. ``0`` keeps the scatter-based initialization.
    """

    def __init__(self, rank: int | None = None, n_iter: int = 10):
        self.rank = rank
        self.n_iter = n_iter

    def fit(self, X, y):
        X = as_float_array(X, "embeddings", ndim=2)
        n, dim = X.shape
        uniq, counts, sums = _group_stats(X, y)
        if len(uniq) < 2:
            raise DataError("PLDA training needs at least 2 speakers")
        if np.any(counts < 2):
            warnings.warn("some speakers have a single embedding; "
                          "within-speaker covariance will be weak", stacklevel=2)
        r = self.rank if self.rank is not None else dim // 2
        if not 1 <= r <= dim:
            raise DataError(f"rank must be in [1, {dim}], got {r}")

        second_moment = X.T @ X
        means = sums / counts[:, None]
        grand = X.mean(axis=0)
        between = ((means - grand).T * counts) @ (means - grand) / n
        within = (second_moment - (means.T * counts) @ means) / n

        vals, vecs = np.linalg.eigh(between)
        order = np.argsort(vals)[::-1][:r]
        loading = vecs[:, order] * np.sqrt(np.maximum(vals[order], EIGENVALUE_FLOOR))
        noise = within + 1e-6 * np.eye(dim)

        curve = []
        for _ in range(self.n_iter):
            ll, r_acc, c_acc = self._e_step(loading, noise, counts, sums, second_moment, n)
            curve.append(ll)
            try:
                loading = np.linalg.solve(r_acc.T, c_acc.T).T
            except np.linalg.LinAlgError as exc:
                raise NumericError(f"singular accumulator in PLDA M-step: {exc}") from exc
            noise = (second_moment - loading @ c_acc.T) / n
            noise = (noise + noise.T) / 2
        ll, _, _ = self._e_step(loading, noise, counts, sums, second_moment, n)
        curve.append(ll)

        self.loading_ = loading
        self.noise_cov_ = noise
        self.rank_ = r
        self.embed_dim_ = dim
        self.loglik_curve_ = curve
        return self

    @staticmethod
    def _e_step(loading, noise, counts, sums, second_moment, n):
        """Posterior speaker-factor moments plus the marginal log-likelihood."""
        dim, r = loading.shape
        try:
            noise_inv = np.linalg.inv(noise)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"singular noise covariance: {exc}") from exc
        sign, logdet_noise = np.linalg.slogdet(noise)
        if sign <= 0:
            raise NumericError("noise covariance is not positive definite")
        vt_ni = loading.T @ noise_inv  # r x dim
        gram = vt_ni @ loading  # r x r

        ll = -0.5 * n * dim * np.log(2 * np.pi) - 0.5 * n * logdet_noise
        ll -= 0.5 * float(np.sum(noise_inv * second_moment))
        r_acc = np.zeros((r, r))
        c_acc = np.zeros((dim, r))
        for count in np.unique(counts):
            mask = counts == count
            lam = np.eye(r) + count * gram
            lam_inv = np.linalg.inv(lam)
            g = sums[mask] @ vt_ni.T  # speakers x r
            h_mean = g @ lam_inv
            # sum over this group of n_i * (lam_inv + h h^T) and f h^T
            r_acc += count * (mask.sum() * lam_inv + h_mean.T @ h_mean)
            c_acc += sums[mask].T @ h_mean
            sign, logdet_lam = np.linalg.slogdet(lam)
            ll += -0.5 * mask.sum() * logdet_lam + 0.5 * float(np.sum(g * h_mean))
        return ll, r_acc, c_acc

    def score_matrix(self, X) -> np.ndarray:
        """Pairwise same/different-speaker log-likelihood ratios.

        For the joint Gaussian under the same-speaker hypothesis the
        2x2-block covariance inverts in closed form, giving
        ``LLR(x, y) = (x' L x + y' L y) / 2 + x' G y + c``.
        """
        X = as_float_array(X, "embeddings", ndim=2)
        if X.shape[1] != self.embed_dim_:
            raise DataError(f"embeddings have dim {X.shape[1]}, model expects "
                            f"{self.embed_dim_}")
        across = self.loading_ @ self.loading_.T
        total = across + self.noise_cov_  # marginal covariance of one embedding
        sum_cov = total + across
        diff_cov = self.noise_cov_
        total_inv = np.linalg.inv(total)
        sum_inv = np.linalg.inv(sum_cov)
        diff_inv = np.linalg.inv(diff_cov)

        quad = total_inv - 0.5 * (sum_inv + diff_inv)
        cross = 0.5 * (diff_inv - sum_inv)
        logdets = [np.linalg.slogdet(m) for m in (total, sum_cov, diff_cov)]
        if any(s <= 0 for s, _ in logdets):
            raise NumericError("PLDA covariances are not positive definite")
        const = logdets[0][1] - 0.5 * logdets[1][1] - 0.5 * logdets[2][1]

        diag = np.einsum("ij,jk,ik->i", X, quad, X)
        scores = 0.5 * (diag[:, None] + diag[None, :]) + X @ cross @ X.T + const
        if not np.all(np.isfinite(scores)):
            raise NumericError("non-finite PLDA scores")
        return (scores + scores.T) / 2

    def sample(self, rng, n_speakers: int, per_speaker: int):
        """Draw labeled embeddings from the generative model (for tests)."""
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        dim = self.embed_dim_
        chol = np.linalg.cholesky(self.noise_cov_)
        xs, ys = [], []
        for s in range(n_speakers):
            h = rng.standard_normal(self.rank_)
            eps = rng.standard_normal((per_speaker, dim)) @ chol.T
            xs.append(self.loading_ @ h + eps)
            ys.extend([s] * per_speaker)
        return np.vstack(xs), np.array(ys)


def fit_plda(embeddings, speaker_ids, rank: int | None = None, n_iter: int = 10) -> Plda:
    return Plda(rank=rank, n_iter=n_iter).fit(embeddings, speaker_ids)


def make_plda(loading: np.ndarray, noise_cov: np.ndarray) -> Plda:
    """Assemble a scoring-ready model from explicit parameters."""
    loading = as_float_array(loading, "loading", ndim=2)
    noise_cov = as_float_array(noise_cov, "noise_cov", ndim=2)
    model = Plda(rank=loading.shape[1], n_iter=0)
    model.loading_ = loading
    model.noise_cov_ = noise_cov
    model.rank_ = loading.shape[1]
    model.embed_dim_ = loading.shape[0]
    model.loglik_curve_ = []
    return model


def save_plda(path, preprocessor: EmbeddingPreprocessor, model: Plda) -> None:
    header = {"embed_dim": int(model.embed_dim_), "r": int(model.rank_)}
    tensors = [preprocessor.mean_, preprocessor.whitening_,
               model.loading_, model.noise_cov_]
    write_container(path, PLDA_MAGIC, header, tensors, dtype="<f8")


def load_plda(path) -> tuple[EmbeddingPreprocessor, Plda]:
    header, tensors = read_container(path, PLDA_MAGIC, dtype="<f8", n_tensors=4)
    mean, whitening, loading, noise = tensors
    if loading.shape != (header["embed_dim"], header["r"]):
        raise DataError("PLDA file header disagrees with tensor shapes")
    pre = EmbeddingPreprocessor()
    pre.mean_ = mean
    pre.whitening_ = whitening
    return pre, make_plda(loading, noise)
