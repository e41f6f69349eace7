"""Experiment orchestration: pretrain -> score -> select -> train -> sample -> evaluate.

Run directory layout (``<root>/<config-hash>/``)::

    config.txt                      canonical config that produced the run
    scores/s<seed>/<method>.csv     score tables (shared by all PRs/directions)
    clusters/s<seed>.json           k-means model on the training pool
    cells/<cell-key>/manifest.json  selected subset
    cells/<cell-key>/model.json     trained velocity model
    cells/<cell-key>/samples.npy    generated samples
    cells/<cell-key>/report.json    metrics; its presence marks the cell done
    cells/<cell-key>/error.txt      written instead of report.json on failure
    curves/<metric>.csv             plot-ready curves
    balance/<cell-key>.csv          per-cluster pool/kept/generated histograms

Seed derivation: for replicate seed ``s`` the main model is initialised from
``stream(s, "init")``, trained with ``stream(s, "train")`` and sampled with
``stream(s, "sample")``, shared by every cell of that seed so cells differ
only in their training subset. Scorers use ``derive_seed(s, <purpose>)``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import datasets as dsm
from .datasets import Dataset, SubsetManifest, atomic_write_text, holdout_split, load_manifest, save_manifest
from .diffusion import DEFAULT_HIDDEN, TrainConfig, init_model, pretrain_trace, sample_ode, save_model, train
from .errors import InvalidArgumentError, ParseError
from .metrics import ALL_METRICS, MetricsReport, evaluate
from .pruning import (
    ClusterModel,
    ScoreTable,
    SelectionSpec,
    assign_to_centers,
    cluster_histogram,
    kmeans_fit,
    load_cluster_model,
    load_score_table,
    save_cluster_model,
    save_score_table,
    score_cluster_distance,
    score_el2n,
    score_grand,
    score_monotonicity,
    score_moso,
    score_random,
    select,
    select_balanced_clusters,
)
from .seeding import derive_seed

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "DIFFPRUNE_RUN_ROOT"
METHODS = ("random", "monotonicity", "grand", "el2n", "moso", "cluster")
PRETRAIN_FAMILY = ("monotonicity", "grand", "el2n")


def run_root(root=None) -> Path:
    return Path(root or os.environ.get(RUN_ROOT_ENV, "runs"))


@dataclass(frozen=True)
class MethodSpec:
    method: str
    direction: str = "top"
    cluster_policy: str = "none"

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "cluster" and self.cluster_policy == "none":
            object.__setattr__(self, "cluster_policy", "proportional")
        if self.method != "cluster" and self.cluster_policy != "none":
            raise InvalidArgumentError(f"cluster policy only applies to the cluster method, got {self}")
        SelectionSpec(self.method, 0.0, self.direction, self.cluster_policy)

    @property
    def tag(self) -> str:
        parts = [self.method, self.direction]
        if self.method == "cluster":
            parts.append(self.cluster_policy)
        return "-".join(parts)

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        parts = [p.strip() for p in text.strip().split(":")]
        return cls(*parts)

    def __str__(self):
        return ":".join([self.method, self.direction] + ([self.cluster_policy] if self.method == "cluster" else []))


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "ring8"  # ring8 | skewed4 | moons | csv
    n: int = 4096
    d: int = 2
    seed: int = 0
    std: Optional[float] = None
    radius: Optional[float] = None
    weights: Optional[tuple] = None
    noise_std: float = 0.05
    path: Optional[str] = None
    has_labels: bool = False
    embeddings: Optional[str] = None
    k: Optional[int] = None
    conditional: bool = False

    def modes(self):
        if self.kind == "ring8":
            return dsm.ring_modes(8, self.radius or 5.0, self.std or 0.3, self.d, self.weights)
        if self.kind == "skewed4":
            return dsm.skewed_modes(self.weights or (0.7, 0.1, 0.1, 0.1), self.radius or 3.0, self.std or 1.0, self.d)
        return None

    def build(self) -> Dataset:
        modes = self.modes()
        if modes is not None:
            ds = dsm.gen_gaussian_mixture(self.n, self.d, modes, self.seed)
        elif self.kind == "moons":
            ds = dsm.gen_two_moons(self.n, self.noise_std, self.seed)
        elif self.kind == "csv":
            if not self.path:
                raise InvalidArgumentError("dataset.kind=csv needs dataset.path")
            ds = dsm.load_features_csv(self.path, self.has_labels)
        else:
            raise InvalidArgumentError(f"unknown dataset kind {self.kind!r}")
        if self.embeddings:
            ds = dsm.attach_embeddings(ds, self.embeddings)
        return ds

    def cluster_count(self) -> int:
        if self.k:
            return int(self.k)
        modes = self.modes()
        if modes is not None:
            return len(modes)
        if self.kind == "moons":
            return 2
        raise InvalidArgumentError("dataset.k is required for file datasets")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    methods: tuple = (MethodSpec("random"),)
    prs: tuple = (0.0, 0.25, 0.5, 0.75, 0.9)
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden_sizes: tuple = DEFAULT_HIDDEN
    metrics: tuple = ALL_METRICS
    n_gen: int = 10000
    sample_steps: int = 50
    seeds: tuple = (0,)
    k_nn: int = 3
    moso_surrogates: int = 4
    holdout: float = 0.2
    workers: int = 1

    def __post_init__(self):
        prs = tuple(float(p) for p in self.prs)
        if not prs:
            raise InvalidArgumentError("at least one pruning ratio required")
        if any(not 0.0 <= p < 1.0 for p in prs):
            raise InvalidArgumentError(f"pruning ratios must lie in [0,1): {prs}")
        if any(b <= a for a, b in zip(prs, prs[1:])):
            raise InvalidArgumentError(f"pruning ratios must be strictly increasing: {prs}")
        object.__setattr__(self, "prs", prs)
        methods = tuple(m if isinstance(m, MethodSpec) else MethodSpec.parse(m) for m in self.methods)
        if not methods:
            raise InvalidArgumentError("at least one method required")
        object.__setattr__(self, "methods", methods)
        unknown = set(self.metrics) - set(ALL_METRICS)
        if unknown:
            raise InvalidArgumentError(f"unknown metrics {sorted(unknown)}")
        if not self.seeds:
            raise InvalidArgumentError("at least one seed required")

    # -- text format: one ``key = value`` per line, dotted section keys --

    def to_text(self, include_execution=True) -> str:
        lines = []
        for f in fields(DatasetSpec):
            v = getattr(self.dataset, f.name)
            if v is not None:
                lines.append(f"dataset.{f.name} = {_fmt(v)}")
        for f in fields(TrainConfig):
            if f.name != "seed":
                lines.append(f"train.{f.name} = {_fmt(getattr(self.train, f.name))}")
        lines += [
            f"model.hidden_sizes = {_fmt(self.hidden_sizes)}",
            f"methods = {', '.join(str(m) for m in self.methods)}",
            f"prs = {_fmt(self.prs)}",
            f"metrics = {_fmt(self.metrics)}",
            f"n_gen = {self.n_gen}",
            f"sample_steps = {self.sample_steps}",
            f"seeds = {_fmt(self.seeds)}",
            f"k_nn = {self.k_nn}",
            f"moso.surrogates = {self.moso_surrogates}",
            f"holdout = {_fmt(self.holdout)}",
        ]
        if include_execution:
            lines.append(f"workers = {self.workers}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError(f"expected 'key = value', got {line!r}", line=lineno)
            raw[key.strip()] = (value.strip(), lineno)
        ds_kw, tr_kw, top = {}, {}, {}
        ds_types = {f.name: f.type for f in fields(DatasetSpec)}
        tr_types = {f.name: f.type for f in fields(TrainConfig)}
        for key, (value, lineno) in raw.items():
            try:
                if key.startswith("dataset."):
                    name = key[8:]
                    if name not in ds_types:
                        raise KeyError(name)
                    ds_kw[name] = _parse(value, ds_types[name])
                elif key.startswith("train."):
                    name = key[6:]
                    if name not in tr_types:
                        raise KeyError(name)
                    tr_kw[name] = _parse(value, tr_types[name])
                elif key == "model.hidden_sizes":
                    top["hidden_sizes"] = tuple(int(v) for v in _split(value))
                elif key == "methods":
                    top["methods"] = tuple(MethodSpec.parse(v) for v in _split(value))
                elif key == "prs":
                    top["prs"] = tuple(float(v) for v in _split(value))
                elif key == "metrics":
                    top["metrics"] = tuple(_split(value))
                elif key == "seeds":
                    top["seeds"] = tuple(int(v) for v in _split(value))
                elif key == "moso.surrogates":
                    top["moso_surrogates"] = int(value)
                elif key in ("n_gen", "sample_steps", "k_nn", "workers"):
                    top[key] = int(value)
                elif key == "holdout":
                    top[key] = float(value)
                else:
                    raise KeyError(key)
            except KeyError:
                raise ParseError(f"unknown config key {key!r}", line=lineno) from None
            except ValueError as exc:
                raise ParseError(f"bad value for {key}: {exc}", line=lineno) from None
        return cls(dataset=DatasetSpec(**ds_kw), train=TrainConfig(**tr_kw), **top)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text(include_execution=False).encode("utf-8")).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _split(value):
    return [v.strip() for v in value.split(",") if v.strip()]


def _parse(value: str, typ):
    typ = str(typ)
    if value.lower() in ("none", ""):
        return None
    if "bool" in typ:
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return value.lower() in ("true", "1", "yes")
    if "tuple" in typ:
        return tuple(float(v) for v in _split(value))
    if "int" in typ:
        return int(value)
    if "float" in typ:
        return float(value)
    return value


@dataclass(frozen=True)
class CurvePoint:
    method_tag: str
    pr: float
    metric: str
    value: float
    seed: int


@dataclass(frozen=True)
class Cell:
    method: MethodSpec
    pr: Optional[float]  # None: balanced selection, ratio derived from cluster sizes
    seed: int
    matched_to: Optional[str] = None  # proportional cell paired with a balanced one

    @property
    def key(self) -> str:
        pr = "bal" if self.pr is None else f"{self.pr:.6g}"
        suffix = f"__match-{self.matched_to}" if self.matched_to else ""
        return f"{self.method.tag}__pr{pr}__s{self.seed}{suffix}"


@dataclass
class RunResult:
    run_dir: Path
    reports: dict
    curve_points: list
    failures: dict

    @property
    def ok(self) -> bool:
        return not self.failures


class Experiment:
    """Holds the dataset split and lazily computed shared scoring artifacts of one run."""

    def __init__(self, cfg: ExperimentConfig, root=None):
        self.cfg = cfg
        self.run_dir = run_root(root) / cfg.config_hash()
        full = cfg.dataset.build()
        self.train_pool, self.reference = holdout_split(full, cfg.holdout, cfg.dataset.seed)
        self._tables = {}
        self._clusters = {}

    @property
    def modes(self):
        return self.cfg.dataset.modes()

    def prepare(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / "config.txt"
        if not path.exists():
            atomic_write_text(path, self.cfg.to_text())

    def _train_cfg(self, seed):
        return replace(self.cfg.train, seed=seed)

    def _label_count(self):
        return self.train_pool.label_count if (self.cfg.dataset.conditional and self.train_pool.labels is not None) else 0

    # -- shared scoring artifacts --

    def cluster_model(self, seed) -> ClusterModel:
        if seed not in self._clusters:
            path = self.run_dir / "clusters" / f"s{seed}.json"
            emb = self.train_pool.clustering_space()
            if path.exists():
                cm = load_cluster_model(path, emb)
            else:
                cm = kmeans_fit(emb, self.cfg.dataset.cluster_count(), seed=derive_seed(seed, "kmeans"))
                save_cluster_model(cm, path)
            self._clusters[seed] = cm
        return self._clusters[seed]

    def score_table(self, method, seed) -> ScoreTable:
        key = (method, seed)
        if key in self._tables:
            return self._tables[key]
        path = self.run_dir / "scores" / f"s{seed}" / f"{method}.csv"
        if path.exists():
            self._tables[key] = load_score_table(path)
            return self._tables[key]
        ds, tcfg = self.train_pool, self.cfg.train
        if method == "random":
            tables = {"random": score_random(ds.n, derive_seed(seed, "random"))}
        elif method in PRETRAIN_FAMILY:
            # one pretraining phase feeds all three pretraining-based scorers
            pcfg = replace(tcfg, seed=derive_seed(seed, "pretrain"))
            model = init_model(ds.d, self.cfg.hidden_sizes, self._label_count(), seed=derive_seed(seed, "pretrain-init"))
            trace = pretrain_trace(model, ds, pcfg)
            fm, t = trace.final_model, trace.probe_timestep
            tables = {
                "monotonicity": score_monotonicity(trace),
                "grand": score_grand(fm, ds, trace.noise, t),
                "el2n": score_el2n(fm, ds, trace.noise, t),
            }
            for tab in tables.values():
                tab.config.update({"pretrain_seed": pcfg.seed, "pretrain_epochs": pcfg.pretrain_epochs, "shared_pretraining": True})
        elif method == "moso":
            tables = {"moso": score_moso(ds, tcfg, self.cfg.moso_surrogates, derive_seed(seed, "moso"), self.cfg.hidden_sizes)}
        elif method == "cluster":
            tables = {"cluster": score_cluster_distance(self.cluster_model(seed))}
        else:
            raise InvalidArgumentError(f"unknown method {method!r}")
        for name, tab in tables.items():
            save_score_table(tab, self.run_dir / "scores" / f"s{seed}" / f"{name}.csv")
            self._tables[(name, seed)] = tab
        return self._tables[key]

    # -- cells --

    def cells(self):
        out = []
        for seed in self.cfg.seeds:
            for m in self.cfg.methods:
                if m.cluster_policy == "balanced":
                    bal = Cell(m, None, seed)
                    out.append(bal)
                    out.append(Cell(replace(m, cluster_policy="proportional"), None, seed, matched_to=m.tag))
                else:
                    out.extend(Cell(m, pr, seed) for pr in self.cfg.prs)
        return out

    def manifest_for(self, cell: Cell) -> SubsetManifest:
        path = self.run_dir / "cells" / cell.key / "manifest.json"
        if path.exists():
            return load_manifest(path)
        m = cell.method
        if m.cluster_policy == "balanced":
            man = select_balanced_clusters(self.cluster_model(cell.seed), m.direction, cell.seed, m.method)
        else:
            pr = cell.pr
            if cell.matched_to:
                pr = select_balanced_clusters(self.cluster_model(cell.seed), m.direction, cell.seed).pruning_ratio
            table = self.score_table(m.method, cell.seed)
            cm = self.cluster_model(cell.seed) if m.method == "cluster" else None
            man = select(table, SelectionSpec(m.method, pr, m.direction, m.cluster_policy, cell.seed), cm)
        save_manifest(man, path)
        return man

    def classifier(self):
        modes = self.modes
        if modes is None:
            return None
        return lambda X: dsm.mixture_posterior(X, modes)

    def run_cell(self, cell: Cell) -> MetricsReport:
        cdir = self.run_dir / "cells" / cell.key
        report_path = cdir / "report.json"
        if report_path.exists():
            return MetricsReport.from_json(report_path.read_text(encoding="utf-8"))
        man = self.manifest_for(cell)
        tcfg = self._train_cfg(cell.seed)
        model = init_model(self.train_pool.d, self.cfg.hidden_sizes, self._label_count(), seed=cell.seed)
        model, losses = train(model, self.train_pool, man, tcfg)
        save_model(model, cdir / "model.json")
        gen = sample_ode(model, self.cfg.n_gen, self.cfg.sample_steps, seed=cell.seed)
        np.save(cdir / "samples.npy", gen)
        rep = evaluate(
            gen,
            self.reference.features,
            train=self.train_pool.features,
            metrics=self.cfg.metrics,
            k_nn=self.cfg.k_nn,
            classifier=self.classifier(),
            seed=cell.seed,
            config={
                "cell": cell.key,
                "method_tag": cell.method.tag,
                "pruning_ratio": man.pruning_ratio,
                "kept": len(man),
                "config_hash": self.cfg.config_hash(),
                "final_window_loss": float(losses[-1]),
            },
        )
        rep.save(report_path)
        err = cdir / "error.txt"
        if err.exists():
            err.unlink()
        return rep


def _cell_job(cfg_text, root, cell_key):
    exp = Experiment(ExperimentConfig.from_text(cfg_text), root)
    cell = {c.key: c for c in exp.cells()}[cell_key]
    return exp.run_cell(cell)


def _record_failure(run_dir, cell, exc):
    text = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))
    atomic_write_text(run_dir / "cells" / cell.key / "error.txt", text)
    log.error("cell %s failed: %s", cell.key, exc)


def run_experiment(cfg: ExperimentConfig, root=None) -> RunResult:
    """Run every (method, PR, seed) cell; completed cells are loaded, not recomputed.

    A failing cell is recorded in ``error.txt`` and the remaining cells still run.
    """
    exp = Experiment(cfg, root)
    exp.prepare()
    cells = exp.cells()
    reports, failures = {}, {}
    # manifests (and the shared scoring they need) are built sequentially
    ready = []
    for cell in cells:
        if (exp.run_dir / "cells" / cell.key / "report.json").exists():
            ready.append(cell)
            continue
        try:
            exp.manifest_for(cell)
            ready.append(cell)
        except Exception as exc:  # per-cell isolation
            failures[cell.key] = repr(exc)
            _record_failure(exp.run_dir, cell, exc)
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futs = {c.key: (c, pool.submit(_cell_job, cfg.to_text(), str(run_root(root)), c.key)) for c in ready}
            for key, (cell, fut) in futs.items():
                try:
                    reports[key] = fut.result()
                except Exception as exc:
                    failures[key] = repr(exc)
                    _record_failure(exp.run_dir, cell, exc)
    else:
        for cell in ready:
            try:
                reports[cell.key] = exp.run_cell(cell)
            except Exception as exc:
                failures[cell.key] = repr(exc)
                _record_failure(exp.run_dir, cell, exc)
    points = curve_points(reports)
    if reports:
        emit_curves(exp.run_dir)
    return RunResult(exp.run_dir, reports, points, failures)


def curve_points(reports) -> list:
    pts = []
    for rep in reports.values():
        for metric, value in rep.values().items():
            pts.append(CurvePoint(rep.config["method_tag"], float(rep.config["pruning_ratio"]), metric, float(value), int(rep.seed)))
    return sorted(pts, key=lambda p: (p.metric, p.method_tag, p.pr, p.seed))


def load_reports(run_dir) -> dict:
    run_dir = Path(run_dir)
    out = {}
    for path in sorted((run_dir / "cells").glob("*/report.json")):
        out[path.parent.name] = MetricsReport.from_json(path.read_text(encoding="utf-8"))
    return out


def emit_curves(run_dir) -> dict:
    """Write ``curves/<metric>.csv`` (method, pr, value, seed); returns metric -> path."""
    run_dir = Path(run_dir)
    reports = load_reports(run_dir)
    if not reports:
        raise InvalidArgumentError(f"no completed cells under {run_dir}")
    by_metric = {}
    for p in curve_points(reports):
        by_metric.setdefault(p.metric, []).append(p)
    paths = {}
    for metric, pts in by_metric.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "pr", "value", "seed"])
        for p in pts:
            w.writerow([p.method_tag, repr(p.pr), repr(p.value), p.seed])
        path = run_dir / "curves" / f"{metric}.csv"
        atomic_write_text(path, buf.getvalue())
        paths[metric] = path
    return paths


def read_curves(run_dir) -> list:
    pts = []
    for path in sorted((Path(run_dir) / "curves").glob("*.csv")):
        with path.open(encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                pts.append(CurvePoint(row["method"], float(row["pr"]), path.stem, float(row["value"]), int(row["seed"])))
    return sorted(pts, key=lambda p: (p.metric, p.method_tag, p.pr, p.seed))


def balance_report(run_dir, cm: ClusterModel = None) -> dict:
    """Per-cluster histograms of the training pool and of generated samples.

    Covers every cell that used proportional or balanced cluster selection.
    Generated samples are assigned to the nearest center of ``cm`` (default:
    the run's stored cluster model for the cell's seed), so the clustering
    must live in raw feature space. Returns cell key -> (pool_counts,
    kept_counts, gen_counts).
    """
    run_dir = Path(run_dir)
    if not (run_dir / "cells").is_dir():
        raise InvalidArgumentError(f"no run found at {run_dir}")
    out = {}
    for cdir in sorted((run_dir / "cells").iterdir()):
        if "-proportional__" not in cdir.name and "-balanced__" not in cdir.name:
            continue
        samples = cdir / "samples.npy"
        if not samples.exists():
            continue
        seed = int(cdir.name.split("__s")[1].split("__")[0])
        model = cm
        if model is None:
            model = load_cluster_model(run_dir / "clusters" / f"s{seed}.json")
        gen = np.load(samples)
        if gen.shape[1] != model.centers.shape[1]:
            raise InvalidArgumentError("cluster model was fit on external embeddings; generated samples cannot be assigned")
        pool_counts = cluster_histogram(model.assignment, model.k)
        kept = np.array(load_manifest(cdir / "manifest.json").kept_ids, dtype=np.int64)
        kept_counts = cluster_histogram(model.assignment[kept], model.k)
        gen_counts = cluster_histogram(assign_to_centers(gen, model.centers), model.k)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cluster", "pool_count", "kept_count", "gen_count"])
        for c in range(model.k):
            w.writerow([c, int(pool_counts[c]), int(kept_counts[c]), int(gen_counts[c])])
        atomic_write_text(run_dir / "balance" / f"{cdir.name}.csv", buf.getvalue())
        out[cdir.name] = (pool_counts, kept_counts, gen_counts)
    if not out:
        raise InvalidArgumentError(f"no cluster-selection cells with samples under {run_dir}")
    return out
