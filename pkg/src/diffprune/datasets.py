"""Synthetic generators, CSV ingestion and subset manifests."""
from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BoundsError, InvalidArgumentError, ParseError, ShapeError
from .seeding import stream


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus optional labels / embeddings.

    ``ids`` are the stable sample identifiers. A freshly generated or loaded
    dataset has ``ids == arange(n)``; a subset keeps the original ids of the
    rows it retained.
    """

    features: np.ndarray
    labels: Optional[np.ndarray] = None
    embeddings: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise InvalidArgumentError(f"features must be a non-empty n x d matrix, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidArgumentError("features contain non-finite values")
        object.__setattr__(self, "features", X)
        n = X.shape[0]
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (n,):
                raise ShapeError("labels", (n,), y.shape)
            object.__setattr__(self, "labels", y)
        if self.embeddings is not None:
            E = np.asarray(self.embeddings, dtype=np.float64)
            if E.ndim != 2 or E.shape[0] != n:
                raise ShapeError("embedding rows", n, E.shape[0] if E.ndim == 2 else E.shape)
            object.__setattr__(self, "embeddings", E)
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (n,):
            raise ShapeError("ids", (n,), ids.shape)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def label_count(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def clustering_space(self) -> np.ndarray:
        """External embeddings if attached, raw features otherwise."""
        return self.embeddings if self.embeddings is not None else self.features

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.features[rows],
            None if self.labels is None else self.labels[rows],
            None if self.embeddings is None else self.embeddings[rows],
            self.ids[rows],
        )


@dataclass(frozen=True)
class Mode:
    mean: np.ndarray
    std: float
    weight: float


def _as_modes(modes, d) -> list[Mode]:
    out = []
    for m in modes:
        if isinstance(m, Mode):
            mean, std, weight = m.mean, m.std, m.weight
        else:
            mean, std, weight = m
        mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (d,)).copy()
        out.append(Mode(mean, float(std), float(weight)))
    return out


def gen_gaussian_mixture(n: int, d: int, modes, seed: int) -> Dataset:
    """Draw ``n`` i.i.d. samples from an isotropic Gaussian mixture.

    ``modes`` is a sequence of ``(mean, std, weight)``; a scalar mean is
    broadcast to ``d`` dims. Labels are the generating mode index.
    """
    if n < 1 or d < 1:
        raise InvalidArgumentError(f"n and d must be positive (n={n}, d={d})")
    modes = _as_modes(modes, d)
    if not modes:
        raise InvalidArgumentError("at least one mode required")
    w = np.array([m.weight for m in modes])
    if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
        raise InvalidArgumentError(f"mode weights must be positive and sum to 1, got {w.tolist()}")
    if any(m.std <= 0 for m in modes):
        raise InvalidArgumentError("mode stddevs must be positive")
    rng = stream(seed, "data", "mixture")
    labels = rng.choice(len(modes), size=n, p=w / w.sum())
    means = np.stack([m.mean for m in modes])
    stds = np.array([m.std for m in modes])
    X = means[labels] + stds[labels, None] * rng.standard_normal((n, d))
    return Dataset(X, labels)


def ring_modes(k=8, radius=5.0, std=0.3, d=2, weights=None):
    """``k`` modes evenly spaced on a circle in the first two dims."""
    if d < 2:
        raise InvalidArgumentError("ring needs d >= 2")
    weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
    out = []
    for j in range(k):
        mean = np.zeros(d)
        a = 2 * np.pi * j / k
        mean[0], mean[1] = radius * np.cos(a), radius * np.sin(a)
        out.append(Mode(mean, std, float(weights[j])))
    return out


def skewed_modes(weights=(0.7, 0.1, 0.1, 0.1), radius=3.0, std=1.0, d=2):
    return ring_modes(len(weights), radius, std, d, weights)


def mixture_posterior(X, modes) -> np.ndarray:
    """Exact class posterior p(mode | x) of an isotropic mixture."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    modes = _as_modes(modes, X.shape[1])
    d = X.shape[1]
    logp = np.empty((X.shape[0], len(modes)))
    for j, m in enumerate(modes):
        sq = ((X - m.mean) ** 2).sum(1)
        logp[:, j] = math.log(m.weight) - d * math.log(m.std) - 0.5 * sq / m.std**2
    logp -= logp.max(1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(1, keepdims=True)


def gen_two_moons(n: int, noise_std: float, seed: int) -> Dataset:
    if n < 2 or n % 2:
        raise InvalidArgumentError(f"two moons needs a positive even n, got {n}")
    if noise_std < 0:
        raise InvalidArgumentError("noise_std must be >= 0")
    h = n // 2
    theta = np.linspace(0.0, np.pi, h)
    upper = np.stack([np.cos(theta), np.sin(theta)], 1)
    lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], 1)
    X = np.concatenate([upper, lower])
    if noise_std > 0:
        X = X + noise_std * stream(seed, "data", "moons").standard_normal(X.shape)
    return Dataset(X, np.repeat([0, 1], h))


def _read_numeric_csv(path, what):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{what} file {path} is empty", line=1) from None
        rows = []
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(row)}", line=lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ParseError(f"non-numeric cell in row {row!r}", line=lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", line=lineno)
            rows.append(vals)
    if not rows:
        raise ParseError(f"{what} file {path} has no data rows", line=2)
    return header, np.array(rows, dtype=np.float64)


def load_features_csv(path, has_labels: bool = False) -> Dataset:
    """Read a header + numeric-rows CSV; the last column is the label if ``has_labels``."""
    header, A = _read_numeric_csv(path, "features")
    if not has_labels:
        return Dataset(A)
    if A.shape[1] < 2:
        raise ParseError("labelled file needs at least one feature column", line=1)
    y = A[:, -1]
    bad = np.flatnonzero(y != np.round(y))
    if bad.size:
        raise ParseError("label is not an integer", line=int(bad[0]) + 2)
    return Dataset(A[:, :-1], y.astype(np.int64))


def save_features_csv(ds: Dataset, path, with_labels: bool = True):
    cols = [f"x{j}" for j in range(ds.d)]
    write_labels = with_labels and ds.labels is not None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols + (["label"] if write_labels else []))
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.features[i]]
            if write_labels:
                row.append(str(int(ds.labels[i])))
            w.writerow(row)


def attach_embeddings(ds: Dataset, path) -> Dataset:
    _, E = _read_numeric_csv(path, "embedding")
    if E.shape[0] != ds.n:
        raise ShapeError("embedding rows", ds.n, E.shape[0])
    return replace(ds, embeddings=E)


@dataclass(frozen=True)
class SubsetManifest:
    kept_ids: tuple
    pruning_ratio: float
    method_tag: str
    seed: int
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ids = sorted(set(int(i) for i in self.kept_ids))
        if len(ids) != len(self.kept_ids):
            raise InvalidArgumentError("kept_ids contains duplicates")
        if ids and ids[0] < 0:
            raise BoundsError(f"negative sample id {ids[0]}")
        if not 0.0 <= self.pruning_ratio < 1.0:
            raise InvalidArgumentError(f"pruning_ratio must be in [0,1), got {self.pruning_ratio}")
        object.__setattr__(self, "kept_ids", tuple(ids))

    def __len__(self):
        return len(self.kept_ids)

    def to_json(self) -> str:
        doc = {
            "kept_ids": list(self.kept_ids),
            "method_tag": self.method_tag,
            "pruning_ratio": self.pruning_ratio,
            "seed": self.seed,
        }
        if self.extra:
            doc["extra"] = self.extra
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SubsetManifest":
        try:
            doc = json.loads(text)
            return cls(
                tuple(doc["kept_ids"]),
                float(doc["pruning_ratio"]),
                str(doc["method_tag"]),
                int(doc["seed"]),
                doc.get("extra", {}),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed manifest: {exc}") from exc


def full_manifest(n: int, method_tag="unpruned", seed=0) -> SubsetManifest:
    return SubsetManifest(tuple(range(n)), 0.0, method_tag, seed)


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_manifest(m: SubsetManifest, path):
    atomic_write_text(path, m.to_json())


def load_manifest(path) -> SubsetManifest:
    return SubsetManifest.from_json(Path(path).read_text(encoding="utf-8"))


def apply_manifest(ds: Dataset, m: SubsetManifest) -> Dataset:
    """Rows of ``ds`` whose id is in the manifest, in ascending id order."""
    kept = np.asarray(m.kept_ids, dtype=np.int64)
    pos = {int(i): r for r, i in enumerate(ds.ids)}
    missing = [int(i) for i in kept if int(i) not in pos]
    if missing:
        raise BoundsError(f"manifest ids not present in dataset of size {ds.n}: {missing[:5]}")
    return ds.take([pos[int(i)] for i in kept])


def holdout_split(ds: Dataset, fraction: float, seed: int):
    """Seeded split into (train pool, reference). Train pool ids are reset to 0..m-1."""
    if not 0 < fraction < 1:
        raise InvalidArgumentError("holdout fraction must be in (0,1)")
    perm = stream(seed, "split").permutation(ds.n)
    n_ref = int(round(ds.n * fraction))
    ref_rows, train_rows = np.sort(perm[:n_ref]), np.sort(perm[n_ref:])
    train = ds.take(train_rows)
    train = replace(train, ids=np.arange(train.n))
    return train, ds.take(ref_rows)


def kept_count(n: int, pruning_ratio: float) -> int:
    """round(n * (1 - PR)) with halves rounded up."""
    return int(math.floor(n * (1.0 - pruning_ratio) + 0.5 + 1e-9))
