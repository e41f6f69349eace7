"""Per-sample importance scores, k-means clustering and subset selection.

Every score table follows one convention: a higher score means "kept first"
under direction ``top``. ``bottom`` is the inverse method and ``middle`` the
band between the two. Ties are always broken by ascending sample id.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datasets import Dataset, SubsetManifest, atomic_write_text, kept_count
from .diffusion import (
    DEFAULT_HIDDEN,
    LossTrace,
    TrainConfig,
    _Adam,
    batch_gradient,
    init_model,
    pretrain_trace,
    probe_grad_mean_dots,
    probe_grad_norms,
    probe_losses,
)
from .errors import InvalidArgumentError, NumericError, ParseError
from .seeding import derive_seed, stream

log = logging.getLogger(__name__)

DIRECTIONS = ("top", "bottom", "middle")
POLICIES = ("none", "proportional", "balanced")


@dataclass(frozen=True)
class ScoreTable:
    scores: np.ndarray
    method_tag: str
    seed: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise InvalidArgumentError("scores must be a non-empty vector")
        if not np.all(np.isfinite(s)):
            bad = int(np.flatnonzero(~np.isfinite(s))[0])
            raise NumericError(f"non-finite score for sample id {bad}")
        object.__setattr__(self, "scores", s)

    @property
    def n(self) -> int:
        return self.scores.size


@dataclass(frozen=True)
class SelectionSpec:
    method_tag: str
    pruning_ratio: float = 0.0
    direction: str = "top"
    cluster_policy: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise InvalidArgumentError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.cluster_policy not in POLICIES:
            raise InvalidArgumentError(f"cluster_policy must be one of {POLICIES}, got {self.cluster_policy!r}")
        if not 0.0 <= self.pruning_ratio < 1.0:
            raise InvalidArgumentError(f"pruning ratio must be in [0,1), got {self.pruning_ratio}")


# -- scorers ---------------------------------------------------------------


def score_random(n: int, seed: int) -> ScoreTable:
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    return ScoreTable(stream(seed, "score-random").random(n), "random", seed)


def score_monotonicity(trace) -> ScoreTable:
    """Number of epochs in which a sample's probe loss rose above the previous epoch's."""
    L = trace.losses if isinstance(trace, LossTrace) else np.asarray(trace, dtype=np.float64)
    if L.ndim != 2 or L.shape[1] < 2:
        raise InvalidArgumentError("loss trace needs at least 2 epochs")
    return ScoreTable((np.diff(L, axis=1) > 0).sum(1).astype(np.float64), "monotonicity")


def _probe_scores(fn, model, ds, noise, t, tag, chunk=4096):
    out = np.empty(ds.n)
    for s in range(0, ds.n, chunk):
        sl = slice(s, s + chunk)
        lab = None if (ds.labels is None or not model.label_count) else ds.labels[sl]
        try:
            out[sl] = fn(model, ds.features[sl], noise[sl], t, lab)
        except NumericError as exc:
            raise NumericError(f"{tag}: {exc} (sample ids {int(ds.ids[s])}..)") from exc
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise NumericError(f"{tag}: non-finite score for sample id {int(ds.ids[bad[0]])}")
    return out


def score_grand(model, ds: Dataset, noise, t: float) -> ScoreTable:
    """L2 norm of each sample's loss gradient w.r.t. all parameters at fixed ``t``."""
    return ScoreTable(_probe_scores(probe_grad_norms, model, ds, noise, t, "grand"), "grand", model.seed, {"t": t})


def score_el2n(model, ds: Dataset, noise, t: float) -> ScoreTable:
    return ScoreTable(_probe_scores(probe_losses, model, ds, noise, t, "el2n"), "el2n", model.seed, {"t": t})


def score_moso(ds: Dataset, cfg: TrainConfig, M: int = 4, seed: int = 0, hidden_sizes=DEFAULT_HIDDEN, noise=None) -> ScoreTable:
    """Gradient agreement ``<g_i, mean_j g_j>`` averaged over ``M`` surrogate models.

    Surrogate ``m`` is pretrained (``cfg.pretrain_epochs`` epochs) on an
    independent seeded random half of the dataset; gradients are then taken
    for every sample at ``cfg.probe_timestep`` with one fixed noise vector
    per sample.
    """
    if M < 1:
        raise InvalidArgumentError("need at least one surrogate")
    half = ds.n // 2
    if half < cfg.batch_size:
        raise InvalidArgumentError(f"surrogate subset of {half} samples is smaller than batch size {cfg.batch_size}")
    if noise is None:
        noise = stream(seed, "probe-noise").standard_normal((ds.n, ds.d))
    label_count = ds.label_count if ds.labels is not None else 0
    total = np.zeros(ds.n)
    for m in range(M):
        rows = np.sort(stream(seed, "moso-subset", m).choice(ds.n, size=half, replace=False))
        model = init_model(ds.d, hidden_sizes, label_count, seed=derive_seed(seed, "moso-init", m))
        sub_cfg = replace(cfg, seed=derive_seed(seed, "moso-train", m))
        surrogate = pretrain_trace(model, ds.take(rows), sub_cfg).final_model
        # one chunk: the mean gradient must span the whole dataset
        total += _probe_scores(probe_grad_mean_dots, surrogate, ds, noise, cfg.probe_timestep, "moso", chunk=ds.n)
    return ScoreTable(total / M, "moso", seed, {"surrogates": M, "t": cfg.probe_timestep})


def loo_risk_change(ds: Dataset, cfg: TrainConfig, seed: int = 0, hidden_sizes=DEFAULT_HIDDEN, eval_draws: int = 16) -> np.ndarray:
    """Brute-force moving-one-sample-out: retrain without each sample.

    ``change[i] = R_i(theta_without_i) - R_i(theta_full)`` where ``R_i`` is the
    mean flow-matching loss over all samples except ``i``, estimated with
    ``eval_draws`` fixed (t, noise) pairs per sample shared by every model.

    Training is full-batch Adam for ``cfg.steps`` steps from one shared
    initialisation; the per-step (t, noise) draw of every sample is shared by
    all ``n + 1`` runs so the only difference between runs is the removed
    sample.
    """
    n, d = ds.n, ds.d
    rng = stream(seed, "loo-eval")
    T_eval = rng.random((n, eval_draws))
    Z_eval = rng.standard_normal((n, eval_draws, d))
    label_count = ds.label_count if ds.labels is not None else 0
    labels = ds.labels if label_count else None
    init = init_model(d, hidden_sizes, label_count, seed=derive_seed(seed, "loo-init"))
    steps_rng = stream(seed, "loo-train")
    T_train = steps_rng.random((cfg.steps, n))
    Z_train = steps_rng.standard_normal((cfg.steps, n, d))

    def fit(mask):
        rows = np.flatnonzero(mask)
        lab = None if labels is None else labels[rows]
        opt = _Adam(init.flat(), cfg.learning_rate)
        model = init
        for s in range(cfg.steps):
            if cfg.lr_schedule == "linear":
                opt.lr = cfg.learning_rate * (1.0 - s / cfg.steps)
            _, g = batch_gradient(model, ds.features[rows], Z_train[s, rows], T_train[s, rows], lab)
            opt.step(g)
            model = model.with_flat(opt.theta)
        return model

    def per_sample_risk(model):
        X = np.repeat(ds.features, eval_draws, axis=0)
        lab = None if labels is None else np.repeat(labels, eval_draws)
        L = probe_losses(model, X, Z_eval.reshape(-1, d), T_eval.ravel(), lab)
        return L.reshape(n, eval_draws).mean(1)

    base = per_sample_risk(fit(np.ones(n, dtype=bool)))
    change = np.empty(n)
    for i in range(n):
        mask = np.arange(n) != i
        change[i] = per_sample_risk(fit(mask))[mask].mean() - base[mask].mean()
    return change


# -- k-means -----------------------------------------------------------------


@dataclass(frozen=True)
class ClusterModel:
    centers: np.ndarray
    assignment: np.ndarray
    distances: np.ndarray
    inertia: float
    inertia_history: tuple = ()
    seed: int = 0

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def to_json(self) -> str:
        return json.dumps({
            "centers": self.centers.tolist(),
            "assignment": self.assignment.tolist(),
            "inertia": self.inertia,
            "inertia_history": list(self.inertia_history),
            "seed": self.seed,
        }, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text, embeddings=None) -> "ClusterModel":
        try:
            doc = json.loads(text)
            C = np.array(doc["centers"], dtype=np.float64)
            a = np.array(doc["assignment"], dtype=np.int64)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed cluster model: {exc}") from exc
        if embeddings is not None:
            dist = np.linalg.norm(np.asarray(embeddings, dtype=np.float64) - C[a], axis=1)
        else:
            dist = np.full(a.size, np.nan)
        return cls(C, a, dist, float(doc["inertia"]), tuple(doc.get("inertia_history", ())), int(doc.get("seed", 0)))


def _sqdist(X, C):
    d2 = (X * X).sum(1)[:, None] + (C * C).sum(1)[None, :] - 2.0 * X @ C.T
    return np.maximum(d2, 0.0)


def assign_to_centers(X, centers) -> np.ndarray:
    """Index of the nearest center for each row (lowest index on ties)."""
    return np.argmin(_sqdist(np.asarray(X, dtype=np.float64), np.asarray(centers, dtype=np.float64)), axis=1)


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return X[chosen].copy()


def _assign_and_repair(X, C):
    a = assign_to_centers(X, C)
    k = C.shape[0]
    d2 = ((X - C[a]) ** 2).sum(1)
    for _ in range(k):
        sizes = np.bincount(a, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            break
        # farthest member of the largest cluster becomes the empty cluster's center
        big = int(np.argmax(sizes))
        members = np.flatnonzero(a == big)
        far = int(members[np.argmax(d2[members])])
        C[empty[0]] = X[far]
        a[far] = empty[0]
        d2[far] = 0.0
    return a, d2


def _lloyd(X, k, rng, max_iters, tol):
    C = _kmeanspp(X, k, rng)
    history = []
    for _ in range(max_iters):
        a, d2 = _assign_and_repair(X, C)
        history.append(float(d2.sum()))
        newC = np.stack([X[a == j].mean(0) for j in range(k)])
        shift = float(np.sqrt(((newC - C) ** 2).sum(1)).max())
        C = newC
        if shift < tol:
            break
    a, d2 = _assign_and_repair(X, C)
    history.append(float(d2.sum()))
    return C, a, history


def kmeans_fit(embeddings, k: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-8, n_init: int = 10) -> ClusterModel:
    """Lloyd's k-means with k-means++ seeding; best of ``n_init`` seeded restarts."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or not np.all(np.isfinite(X)):
        raise InvalidArgumentError("embeddings must be a finite n x e matrix")
    if not 1 <= k <= X.shape[0]:
        raise InvalidArgumentError(f"k={k} must be in [1, n={X.shape[0]}]")
    best = None
    for r in range(max(1, n_init)):
        C, a, hist = _lloyd(X, k, stream(seed, "kmeans", r), max_iters, tol)
        if best is None or hist[-1] < best[2][-1]:
            best = (C, a, hist)
    C, a, hist = best
    dist = np.linalg.norm(X - C[a], axis=1)
    return ClusterModel(C, a, dist, float((dist**2).sum()), tuple(hist), seed)


def score_cluster_distance(cm: ClusterModel) -> ScoreTable:
    """Negative distance to the assigned center: ``top`` is nearest, ``bottom`` furthest."""
    return ScoreTable(-cm.distances, "cluster", cm.seed, {"k": cm.k})


def cluster_histogram(assignment, k=None) -> np.ndarray:
    if isinstance(assignment, ClusterModel):
        return assignment.sizes
    a = np.asarray(assignment, dtype=np.int64)
    return np.bincount(a, minlength=0 if k is None else k)


# -- selection ---------------------------------------------------------------


def _ranked(ids, scores):
    """``ids`` ordered by score descending, then id ascending."""
    ids = np.asarray(ids)
    return ids[np.lexsort((ids, -np.asarray(scores)))]


def _pick(ranked, m, direction):
    if m <= 0:
        return ranked[:0]
    if direction == "top":
        return ranked[:m]
    if direction == "bottom":
        return ranked[len(ranked) - m:]
    start = (len(ranked) - m) // 2
    return ranked[start:start + m]


def select_by_score(table: ScoreTable, spec: SelectionSpec) -> SubsetManifest:
    if spec.cluster_policy != "none":
        raise InvalidArgumentError("select_by_score needs cluster_policy='none'")
    m = kept_count(table.n, spec.pruning_ratio)
    if m == 0:
        raise InvalidArgumentError(f"pruning ratio {spec.pruning_ratio} keeps zero of {table.n} samples")
    kept = _pick(_ranked(np.arange(table.n), table.scores), m, spec.direction)
    return SubsetManifest(tuple(kept.tolist()), spec.pruning_ratio, f"{spec.method_tag}-{spec.direction}", spec.seed)


def proportional_quotas(sizes, pruning_ratio) -> np.ndarray:
    """Largest-remainder apportionment of round(n (1-PR)) over clusters.

    Remainder ties go to the lower cluster index.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    raw = sizes * (1.0 - pruning_ratio)
    base = np.floor(raw + 1e-9).astype(np.int64)
    rem = np.round(raw - base, 9)
    extra = kept_count(int(sizes.sum()), pruning_ratio) - int(base.sum())
    order = np.lexsort((np.arange(sizes.size), -rem))
    q = base.copy()
    q[order[:extra]] += 1
    return np.minimum(q, sizes)


def _per_cluster(table, cm, quotas, direction):
    kept = []
    for c in range(cm.k):
        members = np.flatnonzero(cm.assignment == c)
        kept.append(_pick(_ranked(members, table.scores[members]), int(quotas[c]), direction))
    return np.concatenate(kept) if kept else np.array([], dtype=np.int64)


def select_proportional_clusters(table: ScoreTable, cm: ClusterModel, spec: SelectionSpec) -> SubsetManifest:
    if table.n != cm.assignment.size:
        raise InvalidArgumentError("score table and cluster model disagree on n")
    quotas = proportional_quotas(cm.sizes, spec.pruning_ratio)
    emptied = np.flatnonzero((quotas == 0) & (cm.sizes > 0))
    if emptied.size:
        log.warning("PR=%.3f prunes clusters %s completely", spec.pruning_ratio, emptied.tolist())
    kept = _per_cluster(table, cm, quotas, spec.direction)
    if kept.size == 0:
        raise InvalidArgumentError(f"pruning ratio {spec.pruning_ratio} keeps zero samples")
    tag = f"{spec.method_tag}-{spec.direction}-proportional"
    return SubsetManifest(tuple(kept.tolist()), spec.pruning_ratio, tag, spec.seed)


def select_balanced_clusters(cm: ClusterModel, direction: str = "top", seed: int = 0, method_tag: str = "cluster") -> SubsetManifest:
    """Keep ``s`` samples from every cluster, ``s`` being the smallest cluster size.

    The recorded pruning ratio is the discarded fraction ``1 - s k / n``.
    """
    if direction not in DIRECTIONS:
        raise InvalidArgumentError(f"direction must be one of {DIRECTIONS}")
    sizes = cm.sizes
    s = int(sizes.min())
    if s == 0:
        raise InvalidArgumentError("cluster model has an empty cluster")
    kept = _per_cluster(score_cluster_distance(cm), cm, np.full(cm.k, s), direction)
    pr = 1.0 - s * cm.k / sizes.sum()
    return SubsetManifest(tuple(kept.tolist()), pr, f"{method_tag}-{direction}-balanced", seed, {"per_cluster": s})


def select(table: ScoreTable, spec: SelectionSpec, cm: ClusterModel = None) -> SubsetManifest:
    if spec.cluster_policy == "none":
        return select_by_score(table, spec)
    if cm is None:
        raise InvalidArgumentError(f"cluster policy {spec.cluster_policy!r} needs a cluster model")
    if spec.cluster_policy == "proportional":
        return select_proportional_clusters(table, cm, spec)
    return select_balanced_clusters(cm, spec.direction, spec.seed, spec.method_tag)


# -- persistence ---------------------------------------------------------------


def save_score_table(table: ScoreTable, path):
    lines = [f"# method_tag={table.method_tag} seed={table.seed} config={json.dumps(table.config, sort_keys=True)}", "id,score"]
    lines += [f"{i},{float(s)!r}" for i, s in enumerate(table.scores)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_score_table(path) -> ScoreTable:
    path = Path(path)
    meta = {"method_tag": "unknown", "seed": 0, "config": {}}
    scores = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                head, _, cfg = body.partition(" config=")
                for kv in head.split():
                    k, _, v = kv.partition("=")
                    meta[k] = v
                if cfg:
                    meta["config"] = json.loads(cfg)
                continue
            if line == "id,score":
                continue
            parts = line.split(",")
            try:
                i, s = int(parts[0]), float(parts[1])
            except (ValueError, IndexError):
                raise ParseError(f"bad score row {line!r}", line=lineno) from None
            if i != len(scores):
                raise ParseError(f"ids must be 0..n-1 in order, got {i}", line=lineno)
            scores.append(s)
    if not scores:
        raise ParseError(f"score file {path} has no rows")
    return ScoreTable(np.array(scores), meta["method_tag"], int(meta["seed"]), meta["config"])


def save_cluster_model(cm: ClusterModel, path):
    atomic_write_text(path, cm.to_json())


def load_cluster_model(path, embeddings=None) -> ClusterModel:
    return ClusterModel.from_json(Path(path).read_text(encoding="utf-8"), embeddings)


def spearman(a, b) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    from scipy.stats import spearmanr

    r = spearmanr(a, b).statistic
    return float(r) if math.isfinite(r) else 0.0
