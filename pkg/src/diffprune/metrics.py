"""Sample-quality metrics for generated feature sets."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .datasets import atomic_write_text
from .errors import InvalidArgumentError, NumericError, ShapeError

EIG_CLAMP = 1e-10


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(X) -> GaussianSummary:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise InvalidArgumentError("need at least 2 rows to estimate a covariance")
    mu = X.mean(0)
    C = X - mu
    cov = C.T @ C / (X.shape[0] - 1)
    return GaussianSummary(mu, 0.5 * (cov + cov.T))


def _psd_sqrt(S):
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    w = np.where(w < EIG_CLAMP, 0.0, w)
    return (V * np.sqrt(w)) @ V.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """Squared 2-Wasserstein distance between two Gaussians.

    ``Tr((Sa Sb)^{1/2})`` is computed as the sum of square roots of the
    eigenvalues of the symmetric matrix ``Sa^{1/2} Sb Sa^{1/2}``.
    """
    if a.dim != b.dim:
        raise ShapeError("gaussian dimension", a.dim, b.dim)
    for s in (a, b):
        if not (np.all(np.isfinite(s.mean)) and np.all(np.isfinite(s.covariance))):
            raise NumericError("non-finite Gaussian summary")
    ra = _psd_sqrt(a.covariance)
    M = ra @ b.covariance @ ra
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    tr_sqrt = np.sqrt(np.where(w < EIG_CLAMP, 0.0, w)).sum()
    dmu = a.mean - b.mean
    fd = float(dmu @ dmu + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


def fid(real, gen) -> float:
    return frechet_distance(fit_gaussian(real), fit_gaussian(gen))


def _kth_neighbour_radius(X, k):
    # query k+1 because every point is its own nearest neighbour
    dist, _ = cKDTree(X).query(X, k=k + 1)
    return dist[:, k]


def _coverage(points, centers, radii, chunk=1024):
    """Fraction of ``points`` inside at least one ball (centers[j], radii[j])."""
    inside = np.zeros(len(points), dtype=bool)
    cc = (centers * centers).sum(1)
    for s in range(0, len(points), chunk):
        P = points[s:s + chunk]
        d2 = (P * P).sum(1)[:, None] + cc[None, :] - 2.0 * P @ centers.T
        d2 = np.maximum(d2, 0.0)
        inside[s:s + chunk] = (d2 <= (radii * radii)[None, :] * (1 + 1e-12) + 1e-24).any(1)
    return float(inside.mean())


def knn_precision_recall(real, gen, k_nn: int = 3):
    """Manifold precision/recall with k-NN balls (radius = distance to the k-th neighbour)."""
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if real.shape[1] != gen.shape[1]:
        raise ShapeError("feature dimension", real.shape[1], gen.shape[1])
    if k_nn < 1 or k_nn >= len(real) or k_nn >= len(gen):
        raise InvalidArgumentError(f"k_nn={k_nn} must be in [1, min(n, m))")
    precision = _coverage(gen, real, _kth_neighbour_radius(real, k_nn))
    recall = _coverage(real, gen, _kth_neighbour_radius(gen, k_nn))
    return precision, recall


def f_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 0.0 if s == 0 else 2.0 * precision * recall / s


def vendi_score(X) -> float:
    """exp(entropy) of the spectrum of the cosine-similarity matrix divided by n.

    The nonzero eigenvalues of ``K / n = Z Z^T / n`` (``Z`` the row-normalised
    data) coincide with those of ``Z^T Z / n``, so the smaller Gram matrix is
    decomposed.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise InvalidArgumentError(f"row {int(zero[0])} has zero norm; cosine kernel undefined")
    Z = X / norms[:, None]
    G = (Z.T @ Z if Z.shape[1] < n else Z @ Z.T) / n
    lam = np.linalg.eigvalsh(0.5 * (G + G.T))
    lam = np.clip(lam, 0.0, None)
    lam = lam / lam.sum()
    nz = lam[lam > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


def inception_score(probs) -> float:
    """exp(mean_i KL(p(y|x_i) || p(y))) for a matrix of class probabilities."""
    P = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if np.any(P < 0) or not np.all(np.isfinite(P)):
        raise InvalidArgumentError("class probabilities must be finite and nonnegative")
    bad = np.flatnonzero(np.abs(P.sum(1) - 1.0) > 1e-8)
    if bad.size:
        raise InvalidArgumentError(f"row {int(bad[0])} does not sum to 1")
    marg = P.mean(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(P) - np.log(marg)), 0.0)
    return float(np.exp(terms.sum(1).mean()))


def memorization_distance(gen, train):
    """Distance from each generated row to its nearest training row; returns (mean, per-row)."""
    gen = np.atleast_2d(np.asarray(gen, dtype=np.float64))
    train = np.atleast_2d(np.asarray(train, dtype=np.float64))
    if len(train) < 1:
        raise InvalidArgumentError("empty training set")
    if gen.shape[1] != train.shape[1]:
        raise ShapeError("feature dimension", train.shape[1], gen.shape[1])
    dist, _ = cKDTree(train).query(gen, k=1)
    return float(dist.mean()), dist


ALL_METRICS = ("fid", "precision", "recall", "f_score", "vendi", "inception", "mem_distance")


@dataclass
class MetricsReport:
    fid: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    f_score: Optional[float] = None
    vendi: Optional[float] = None
    inception: Optional[float] = None
    mem_distance: Optional[float] = None
    config: dict = field(default_factory=dict)
    seed: int = 0

    def values(self) -> dict:
        return {k: getattr(self, k) for k in ALL_METRICS if getattr(self, k) is not None}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text) -> "MetricsReport":
        return cls(**json.loads(text))

    def save(self, path):
        atomic_write_text(path, self.to_json())


def evaluate(gen, reference, train=None, metrics=ALL_METRICS, k_nn=3, classifier=None, seed=0, config=None) -> MetricsReport:
    """Compute the requested metrics of ``gen`` against ``reference``.

    ``train`` is needed for ``mem_distance``; ``classifier`` (rows -> class
    probabilities) for ``inception``. Metrics whose inputs are missing are
    left as ``None``.
    """
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise InvalidArgumentError(f"unknown metrics {sorted(unknown)}")
    rep = MetricsReport(config=dict(config or {}), seed=seed)
    if "fid" in metrics:
        rep.fid = fid(reference, gen)
    if {"precision", "recall", "f_score"} & set(metrics):
        p, r = knn_precision_recall(reference, gen, k_nn)
        rep.precision, rep.recall, rep.f_score = p, r, f_score(p, r)
    if "vendi" in metrics:
        rep.vendi = vendi_score(gen)
    if "inception" in metrics and classifier is not None:
        rep.inception = inception_score(classifier(gen))
    if "mem_distance" in metrics and train is not None:
        rep.mem_distance = memorization_distance(gen, train)[0]
    return rep
