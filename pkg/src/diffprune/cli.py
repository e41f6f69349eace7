"""Command line entry point: ``diffprune <verb> ...``.

``sweep`` takes a ``key = value`` config file and/or one flag per config key
(``--dataset.kind skewed4 --prs 0,0.5 --methods random:top,el2n:bottom``).
The run root defaults to ``$DIFFPRUNE_RUN_ROOT`` (else ``./runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import datasets as dsm
from .diffusion import TrainConfig, init_model, load_model, sample_ode, save_model, train
from .errors import BoundsError, InvalidArgumentError, NumericError, ParseError, ShapeError
from .metrics import ALL_METRICS, evaluate
from .pruning import (
    SelectionSpec,
    load_cluster_model,
    load_score_table,
    save_score_table,
    select,
    select_balanced_clusters,
)
from .runner import (
    DatasetSpec,
    Experiment,
    ExperimentConfig,
    balance_report,
    emit_curves,
    run_experiment,
    run_root,
)

log = logging.getLogger("diffprune")


def config_keys() -> list:
    keys = [f"dataset.{f.name}" for f in fields(DatasetSpec)]
    keys += [f"train.{f.name}" for f in fields(TrainConfig) if f.name != "seed"]
    keys += ["model.hidden_sizes", "methods", "prs", "metrics", "n_gen", "sample_steps", "seeds", "k_nn", "moso.surrogates", "holdout", "workers"]
    return keys


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file; flags override it")
    for key in config_keys():
        p.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE")
    p.add_argument("--root", help="run root directory")


def _config_from_args(args) -> ExperimentConfig:
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    overrides = [f"{k[4:]} = {v}" for k, v in vars(args).items() if k.startswith("cfg:") and v is not None]
    return ExperimentConfig.from_text(text + "\n" + "\n".join(overrides))


def _load_dataset(path, has_labels):
    return dsm.load_features_csv(path, has_labels=has_labels)


def _load_points(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    # files written by generate-data carry a trailing label column
    return dsm.load_features_csv(path, has_labels=header[-1] == "label").features


# -- verbs ---------------------------------------------------------------------


def cmd_generate_data(args):
    spec = DatasetSpec(kind=args.kind, n=args.n, d=args.d, seed=args.seed, std=args.std, radius=args.radius,
                       weights=tuple(args.weights) if args.weights else None, noise_std=args.noise_std)
    ds = spec.build()
    dsm.save_features_csv(ds, args.out, with_labels=ds.labels is not None)
    print(f"wrote {ds.n} x {ds.d} samples to {args.out}")
    return 0


def cmd_score(args):
    cfg = _config_from_args(args)
    exp = Experiment(cfg, args.root)
    exp.prepare()
    table = exp.score_table(args.method, args.seed)
    path = exp.run_dir / "scores" / f"s{args.seed}" / f"{args.method}.csv"
    if args.out:
        save_score_table(table, args.out)
        path = args.out
    print(path)
    return 0


def cmd_select(args):
    cm = load_cluster_model(args.clusters, _load_dataset(args.data, False).clustering_space() if args.data else None) if args.clusters else None
    if args.cluster_policy == "balanced":
        if cm is None:
            raise InvalidArgumentError("balanced selection needs --clusters")
        man = select_balanced_clusters(cm, args.direction, args.seed, args.method_tag)
    else:
        table = load_score_table(args.scores)
        spec = SelectionSpec(args.method_tag or table.method_tag, args.pr, args.direction, args.cluster_policy, args.seed)
        man = select(table, spec, cm)
    dsm.save_manifest(man, args.out)
    print(f"kept {len(man)} ids ({man.method_tag}, PR={man.pruning_ratio:.4g}) -> {args.out}")
    return 0


def cmd_train(args):
    ds = _load_dataset(args.data, args.has_labels)
    man = dsm.load_manifest(args.manifest) if args.manifest else dsm.full_manifest(ds.n)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, learning_rate=args.learning_rate, seed=args.seed)
    hidden = tuple(int(h) for h in args.hidden_sizes.split(","))
    labels = ds.label_count if (args.conditional and ds.labels is not None) else 0
    model, losses = train(init_model(ds.d, hidden, labels, seed=args.seed), ds, man, cfg)
    save_model(model, args.out)
    print(f"trained on {len(man)} samples; windowed loss {losses[0]:.4f} -> {losses[-1]:.4f}; saved {args.out}")
    return 0


def cmd_sample(args):
    model = load_model(args.model)
    x = sample_ode(model, args.count, args.steps, seed=args.seed)
    if args.out.endswith(".npy"):
        np.save(args.out, x)
    else:
        dsm.save_features_csv(dsm.Dataset(x), args.out, with_labels=False)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def cmd_evaluate(args):
    gen = _load_points(args.samples)
    ref = _load_points(args.reference)
    tr = _load_points(args.train) if args.train else None
    metrics = tuple(args.metrics.split(",")) if args.metrics else ALL_METRICS
    rep = evaluate(gen, ref, tr, metrics=metrics, k_nn=args.k_nn, seed=args.seed)
    if args.out:
        rep.save(args.out)
    print(json.dumps({k: v for k, v in rep.values().items()}, indent=1, sort_keys=True))
    return 0


def cmd_sweep(args):
    cfg = _config_from_args(args)
    res = run_experiment(cfg, args.root)
    print(f"run dir: {res.run_dir}")
    print(f"cells ok: {len(res.reports)}  failed: {len(res.failures)}")
    for key, err in sorted(res.failures.items()):
        print(f"  FAILED {key}: {err}")
    return 0 if res.ok else 1


def _run_dir(args):
    if args.run_dir:
        return Path(args.run_dir)
    if args.config or any(k.startswith("cfg:") and v is not None for k, v in vars(args).items()):
        return run_root(args.root) / _config_from_args(args).config_hash()
    raise InvalidArgumentError("give --run-dir or the run's config")


def cmd_curves(args):
    for metric, path in sorted(emit_curves(_run_dir(args)).items()):
        print(f"{metric}: {path}")
    return 0


def cmd_balance_report(args):
    for key, (pool, kept, gen) in balance_report(_run_dir(args)).items():
        print(f"{key}: kept {kept.tolist()} generated {gen.tolist()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffprune", description="Data pruning for flow-matching diffusion models.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset as CSV")
    p.add_argument("--kind", default="ring8", choices=["ring8", "skewed4", "moons"])
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--std", type=float)
    p.add_argument("--radius", type=float)
    p.add_argument("--weights", type=float, nargs="+")
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("score", help="compute a score table for the training pool of a run")
    _add_config_flags(p)
    p.add_argument("--method", required=True, choices=["random", "monotonicity", "grand", "el2n", "moso", "cluster"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("select", help="turn a score table into a subset manifest")
    p.add_argument("--scores")
    p.add_argument("--pr", type=float, default=0.0)
    p.add_argument("--direction", default="top", choices=["top", "bottom", "middle"])
    p.add_argument("--cluster-policy", default="none", choices=["none", "proportional", "balanced"])
    p.add_argument("--clusters", help="cluster model JSON")
    p.add_argument("--data", help="CSV whose rows the cluster model was fit on")
    p.add_argument("--method-tag", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_select)

    p = sub.add_parser("train", help="train a velocity model on a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--has-labels", action="store_true")
    p.add_argument("--conditional", action="store_true")
    p.add_argument("--manifest")
    p.add_argument("--steps", type=int, default=TrainConfig.steps)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--hidden-sizes", default="128,128,128")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help=".npy or .csv")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("evaluate", help="metrics of generated samples against a reference set")
    p.add_argument("--samples", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--train")
    p.add_argument("--metrics", help="comma list, default all")
    p.add_argument("--k-nn", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="run every (method, PR, seed) cell of a config")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_sweep)

    for verb, fn, text in (("curves", cmd_curves, "write plot-ready curve CSVs"),
                           ("balance-report", cmd_balance_report, "per-cluster histograms of cluster-selection cells")):
        p = sub.add_parser(verb, help=text)
        p.add_argument("--run-dir")
        _add_config_flags(p)
        p.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (InvalidArgumentError, ParseError, ShapeError, BoundsError, NumericError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
