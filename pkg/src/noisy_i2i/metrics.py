"""Evaluation metrics: FID, IS, KID and absolute Spearman correlation.

Everything here works on plain arrays so the estimators can be checked
against synthetic Gaussians independently of any feature extractor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidInputError

KID_SPLITS = 10
KID_SPLIT_SIZE = 50


class ConstantSeriesError(InvalidInputError):
    """Rank correlation is undefined for a constant series."""


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    source: str = "generated"  # "real-train" or "generated"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise InvalidInputError("embedding vectors must form an (n, d) matrix")

    def __len__(self):
        return self.vectors.shape[0]

    def gaussian(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) < 2:
            raise InvalidInputError("need at least 2 embeddings for a covariance")
        return self.vectors.mean(axis=0), np.atleast_2d(np.cov(self.vectors, rowvar=False))


@dataclass
class MetricsReport:
    epoch: int
    ca: float
    fid: float
    is_score: float
    kid: float
    kid_splits: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.ca <= 100.0:
            raise InvalidInputError(f"CA must lie in [0, 100], got {self.ca}")
        if self.fid < 0:
            raise InvalidInputError(f"FID must be nonnegative, got {self.fid}")

    def as_dict(self) -> dict:
        return asdict(self)


def _as_sets(*sets) -> list[EmbeddingSet]:
    return [s if isinstance(s, EmbeddingSet) else EmbeddingSet(s) for s in sets]


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _check_symmetric(a: np.ndarray, name: str) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"{name} must be a square matrix")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise InvalidInputError(f"{name} is not symmetric")


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """``||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`` via eigendecompositions.

    ``Tr((S1 S2)^(1/2))`` is computed as the sum of square roots of the
    eigenvalues of the symmetric ``S1^(1/2) S2 S1^(1/2)``, which shares its
    spectrum with ``S1 S2``; negative eigenvalues are clamped at 0.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, np.float64)), np.atleast_2d(np.asarray(sigma2, np.float64))
    _check_symmetric(s1, "sigma1")
    _check_symmetric(s2, "sigma2")
    if not (mu1.shape[0] == mu2.shape[0] == s1.shape[0] == s2.shape[0]):
        raise InvalidInputError("mean and covariance dimensions disagree")
    root1 = _sqrt_psd(s1)
    inner = root1 @ s2 @ root1
    eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_covmean = np.sqrt(np.clip(eig, 0, None)).sum()
    diff = mu1 - mu2
    value = diff @ diff + np.trace(s1) + np.trace(s2) - 2 * tr_covmean
    return float(max(value, 0.0))


def fid(real, gen) -> float:
    real, gen = _as_sets(real, gen)
    if real.vectors.shape[1] != gen.vectors.shape[1]:
        raise InvalidInputError("embedding dimensions disagree")
    return frechet_distance(*real.gaussian(), *gen.gaussian())


def inception_score(class_probs) -> float:
    """``exp(mean_i KL(p(y|x_i) || p(y)))`` with ``p(y)`` the row mean."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InvalidInputError("class probabilities must form a nonempty (n, c) matrix")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise InvalidInputError("every row must be a probability distribution")
    # extended precision keeps exp(log(c)) from landing one ulp off c
    q = p.astype(np.longdouble)
    marginal = q.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(q) - np.log(marginal)), 0.0)
    score = float(np.exp(terms.sum(axis=1).mean()))
    return float(np.clip(score, 1.0, p.shape[1]))


def polynomial_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = x.shape[0], y.shape[0]
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.sum() / (m * n))


def kid_splits(n_real: int, n_gen: int, num_splits: int, split_size: int, rng: np.random.Generator):
    """Index pairs ``(real_idx, gen_idx)`` for each split, drawn without replacement."""
    return [
        (rng.choice(n_real, split_size, replace=False), rng.choice(n_gen, split_size, replace=False))
        for _ in range(num_splits)
    ]


def kid(real, gen, num_splits: int = KID_SPLITS, split_size: int = KID_SPLIT_SIZE,
        rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
    """Mean unbiased MMD^2 (cubic polynomial kernel) over random splits."""
    real, gen = _as_sets(real, gen)
    if split_size < 2 or num_splits < 1:
        raise InvalidInputError("need split_size >= 2 and num_splits >= 1")
    if len(real) < split_size or len(gen) < split_size:
        raise InvalidInputError(
            f"need {split_size} samples per set, got {len(real)} real and {len(gen)} generated"
        )
    rng = rng if rng is not None else np.random.default_rng(0)
    values = np.array([
        mmd2_unbiased(real.vectors[ri], gen.vectors[gi])
        for ri, gi in kid_splits(len(real), len(gen), num_splits, split_size, rng)
    ])
    return float(values.mean()), values


def _average_ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="stable")
    sorted_a = a[order]
    ranks = np.empty(len(a))
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman_abs(series_a, series_b) -> float:
    """Absolute Spearman rank correlation, average ranks for ties."""
    a, b = np.asarray(series_a, np.float64), np.asarray(series_b, np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("series must be 1-d and of equal length")
    if a.size < 2:
        raise InvalidInputError("need at least 2 points")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ConstantSeriesError("rank correlation is undefined for a constant series")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    rho = (ra @ rb) / np.sqrt((ra @ ra) * (rb @ rb))
    return float(min(abs(rho), 1.0))
