"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The trend criteria train real models and take several minutes in total.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from diffprune.datasets import gen_gaussian_mixture, skewed_modes
from diffprune.diffusion import TrainConfig, heun_integrate, init_model, per_sample_grad, per_sample_loss, pretrain_trace
from diffprune.metrics import GaussianSummary, f_score, fid, frechet_distance, inception_score, vendi_score
from diffprune.pruning import (
    ScoreTable,
    SelectionSpec,
    cluster_histogram,
    kmeans_fit,
    loo_risk_change,
    score_cluster_distance,
    score_el2n,
    score_grand,
    score_monotonicity,
    score_moso,
    score_random,
    select,
    select_balanced_clusters,
    spearman,
)
from diffprune.runner import Experiment, ExperimentConfig, balance_report, run_experiment

ARTIFACTS = Path(__file__).resolve().parent.parent / "acceptance_artifacts"
SEEDS = "0, 1, 2"


def _gs(mean, cov):
    return GaussianSummary(np.atleast_1d(np.asarray(mean, float)), np.atleast_2d(np.asarray(cov, float)))


def test_c01_metric_oracles(record_criterion):
    t0 = time.perf_counter()
    a = _gs([0.3, -1.0], [[2.0, 0.5], [0.5, 1.0]])
    fd_err = max(
        abs(frechet_distance(a, a)),
        abs(frechet_distance(_gs(0.0, 1.0), _gs(1.0, 1.0)) - 1.0),
        abs(frechet_distance(_gs([0, 0], np.eye(2)), _gs([0, 0], 4 * np.eye(2))) - 2.0),
    )
    n = 6
    vendi = (
        vendi_score(np.tile([[0.2, 1.0, -0.5]], (n, 1))),
        vendi_score(np.eye(n)),
        vendi_score(np.array([[1.0, 0.0], [0.5, math.sqrt(3) / 2]])),
    )
    C = 4
    inc = (
        inception_score(np.full((9, C), 1 / C)),
        inception_score(np.eye(C)),
        inception_score(np.array([[0.9, 0.1], [0.1, 0.9]])),
    )
    fs = (f_score(1.0, 1.0), f_score(0.0, 0.3), f_score(0.5, 1.0))
    elapsed = time.perf_counter() - t0
    ok = (
        fd_err < 1e-8
        and abs(vendi[0] - 1) < 1e-9 and abs(vendi[1] - n) < 1e-9 and abs(vendi[2] - 1.7548) < 1e-3
        and abs(inc[0] - 1) < 1e-9 and abs(inc[1] - C) < 1e-9 and abs(inc[2] - 1.445) < 1e-3
        and fs == (1.0, 0.0, 2 / 3)
        and elapsed < 1.0
    )
    detail = f"frechet max err {fd_err:.1e}, vendi {np.round(vendi, 4).tolist()}, IS {np.round(inc, 4).tolist()}, f {fs}, {elapsed:.3f}s"
    assert record_criterion(1, "metric analytic oracles", ok, detail)


def test_c02_gradient_finite_differences(record_criterion):
    rng = np.random.default_rng(2024)
    model = init_model(3, (8, 8), label_count=3, seed=11)
    theta = model.flat()
    h = 1e-5
    probes, worst = 0, 0.0
    t0 = time.perf_counter()
    for _ in range(8):
        x0, x1, t = rng.normal(size=3), rng.normal(size=3), rng.uniform(0.02, 0.98)
        label = int(rng.integers(3))
        g = per_sample_grad(model, x0, x1, t, label)
        for j in rng.choice(theta.size, 16, replace=False):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            fd = (per_sample_loss(model.with_flat(tp), x0, x1, t, label) - per_sample_loss(model.with_flat(tm), x0, x1, t, label)) / (2 * h)
            # coordinates whose gradient is below 1e-6 are compared on that absolute scale
            rel = abs(g[j] - fd) / max(abs(g[j]), abs(fd), 1e-6)
            worst = max(worst, rel)
            probes += 1
    ok = probes >= 100 and worst < 1e-4
    detail = f"{probes} probes, worst relative error {worst:.2e}, {time.perf_counter() - t0:.2f}s"
    assert record_criterion(2, "gradient vs central differences", ok, detail)


def _gaussian_field(mu, s):
    # exact velocity when the data are N(mu, s^2); s -> 0 is the point mass at mu
    def v(x, t):
        var = (1 - t) ** 2 * s**2 + t**2
        return -mu + (t - (1 - t) * s**2) / var * (x - (1 - t) * mu)

    return v


def test_c03_heun_order(record_criterion):
    x1 = np.linspace(-2.0, 2.0, 9)
    # point mass at the origin: v = x / t has straight trajectories x = t x1
    t_end = 1e-3
    pm_err = max(np.abs(heun_integrate(lambda x, t: x / t, x1, n, t_end=t_end) - t_end * x1).max() for n in (5, 20, 80))
    mu, s = 1.5, 0.5
    errs = np.array([np.abs(heun_integrate(_gaussian_field(mu, s), x1, n) - (mu + s * x1)).max() for n in (40, 80, 160, 320)])
    orders = np.log2(errs[:-1] / errs[1:])
    ok = pm_err < 1e-12 and orders.min() >= 1.9
    detail = f"point-mass error {pm_err:.1e}; Gaussian-data field orders {np.round(orders, 3).tolist()}"
    assert record_criterion(3, "ODE integrator order", ok, detail)


def _all_score_tables(n=1024):
    ds = gen_gaussian_mixture(n, 2, skewed_modes(), seed=0)
    cfg = TrainConfig(batch_size=64, pretrain_epochs=3)
    trace = pretrain_trace(init_model(2, (32, 32), seed=0), ds, cfg)
    fm, t = trace.final_model, trace.probe_timestep
    cm = kmeans_fit(ds.features, 4, seed=0)
    tables = [
        score_random(n, 0),
        score_monotonicity(trace),
        score_grand(fm, ds, trace.noise, t),
        score_el2n(fm, ds, trace.noise, t),
        score_moso(ds, cfg, M=2, seed=0, hidden_sizes=(32, 32)),
        score_cluster_distance(cm),
    ]
    return tables, cm


def test_c04_partition_nesting_scaling(record_criterion):
    tables, cm = _all_score_tables()
    n = cm.assignment.size
    t0 = time.perf_counter()
    failures = []
    for tab in tables:
        policies = ["none", "proportional"] if tab.method_tag == "cluster" else ["none"]
        for policy in policies:
            def kept(pr, direction, table=tab):
                return set(select(table, SelectionSpec(table.method_tag, pr, direction, policy), cm).kept_ids)

            top, bottom = kept(0.5, "top"), kept(0.5, "bottom")
            # per-cluster halves of odd-sized clusters overlap, so the partition is a property of plain ranking
            if policy == "none" and (top & bottom or len(top | bottom) != n):
                failures.append(f"{tab.method_tag}/{policy}: partition")
            if not kept(0.75, "top") <= kept(0.5, "top") <= kept(0.25, "top"):
                failures.append(f"{tab.method_tag}/{policy}: nesting")
            scaled = ScoreTable(tab.scores * 3.7, tab.method_tag)
            for pr in (0.0, 0.25, 0.5, 0.75, 0.9):
                for d in ("top", "bottom", "middle"):
                    if kept(pr, d) != kept(pr, d, scaled):
                        failures.append(f"{tab.method_tag}/{policy}: scaling pr={pr} {d}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 1.0
    detail = f"{len(tables)} scorers on n={n}, selection checks {elapsed:.3f}s" + (f"; failures {failures}" if failures else "")
    assert record_criterion(4, "partition, nesting, scale invariance", ok, detail)


def test_c05_kmeans_oracle(record_criterion):
    t0 = time.perf_counter()
    square = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    best = min(
        sum(((square[lab == c] - square[lab == c].mean(0)) ** 2).sum() for c in (0, 1))
        for lab in (np.array([(m >> i) & 1 for i in range(4)]) for m in range(1, 15))
    )
    inertias = [kmeans_fit(square, 2, seed=s).inertia for s in range(10)]
    X = gen_gaussian_mixture(800, 2, skewed_modes(), seed=3).features
    cm = kmeans_fit(X, 4, seed=1)
    hist = np.array(cm.inertia_history)
    monotone = bool(np.all(np.diff(hist) <= 1e-12 * hist[0]))
    man = select_balanced_clusters(cm, "top")
    s = int(cm.sizes.min())
    counts = cluster_histogram(cm.assignment[list(man.kept_ids)], cm.k)
    elapsed = time.perf_counter() - t0
    ok = (
        max(abs(i - best) for i in inertias) < 1e-12
        and monotone
        and np.all(counts == s)
        and len(man) == s * cm.k
        and elapsed < 1.0
    )
    detail = f"square optimum {best}, fitted {sorted(set(inertias))}; inertia monotone {monotone}; balanced counts {counts.tolist()} (s={s}); {elapsed:.3f}s"
    assert record_criterion(5, "k-means oracle", ok, detail)


def test_c06_moso_vs_leave_one_out(record_criterion):
    t0 = time.perf_counter()
    ds = gen_gaussian_mixture(32, 2, skewed_modes(), seed=0)
    cfg = TrainConfig(steps=400, batch_size=16, learning_rate=5e-3, pretrain_epochs=5, seed=0)
    hidden = (16, 16)
    runs = []
    for _ in range(2):
        moso = score_moso(ds, cfg, M=8, seed=0, hidden_sizes=hidden)
        loo = loo_risk_change(ds, cfg, seed=0, hidden_sizes=hidden, eval_draws=64)
        runs.append((moso.scores, loo))
    deterministic = all(np.array_equal(a, b) for a, b in zip(runs[0], runs[1]))
    moso_scores, loo = runs[0]
    rho = spearman(moso_scores, loo)
    elapsed = time.perf_counter() - t0
    record = {
        "spearman": rho,
        "n": ds.n,
        "d": ds.d,
        "data_seed": 0,
        "moso_seed": 0,
        "surrogates": 8,
        "loo_seed": 0,
        "eval_draws": 64,
        "hidden_sizes": list(hidden),
        "train": {"steps": cfg.steps, "batch_size": cfg.batch_size, "learning_rate": cfg.learning_rate,
                  "pretrain_epochs": cfg.pretrain_epochs, "probe_timestep": cfg.probe_timestep},
        "moso_scores": moso_scores.tolist(),
        "loo_risk_change": loo.tolist(),
    }
    ARTIFACTS.mkdir(exist_ok=True)
    path = ARTIFACTS / "moso_oracle.json"
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    ok = deterministic and np.isfinite(rho) and elapsed < 120
    detail = f"Spearman(MoSo, leave-one-out) = {rho:+.3f} (seeds data=0 moso=0 loo=0), deterministic {deterministic}, {elapsed:.1f}s, saved {path.name}"
    assert record_criterion(6, "MoSo vs leave-one-out oracle", ok, detail)


# -- trend criteria: full pipeline runs ------------------------------------------


@pytest.fixture(scope="module")
def runs_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance_runs")


def _mean_metric(reports, tag, pr, metric):
    vals = [getattr(r, metric) for r in reports.values() if r.config["method_tag"] == tag and abs(r.config["pruning_ratio"] - pr) < 1e-12]
    return float(np.mean(vals)), vals


RING_CFG = f"""
dataset.kind = ring8
dataset.n = 4096
methods = random:top
prs = 0, 0.25, 0.5
seeds = {SEEDS}
metrics = fid
"""


@pytest.fixture(scope="module")
def ring_run(runs_root):
    cfg = ExperimentConfig.from_text(RING_CFG)
    t0 = time.perf_counter()
    res = run_experiment(cfg, runs_root)
    return cfg, res, time.perf_counter() - t0


def test_c07_random_pruning_tolerance(record_criterion, ring_run):
    cfg, res, elapsed = ring_run
    assert res.ok, res.failures
    base, base_vals = _mean_metric(res.reports, "random-top", 0.0, "fid")
    parts, ok = [f"PR0 mean FID {base:.4f} {np.round(base_vals, 4).tolist()}"], True
    for pr in (0.25, 0.5):
        m, vals = _mean_metric(res.reports, "random-top", pr, "fid")
        rel = (m - base) / base
        ok &= abs(rel) <= 0.25
        parts.append(f"PR{pr} {m:.4f} ({rel:+.1%}) {np.round(vals, 4).tolist()}")
    # the same comparison for a learner that reproduced its kept subset exactly
    exp = Experiment(cfg, res.run_dir.parent)
    subset_fid = {}
    for cell in exp.cells():
        kept = list(exp.manifest_for(cell).kept_ids)
        subset_fid.setdefault(cell.pr, []).append(fid(exp.reference.features, exp.train_pool.features[kept]))
    floor = {pr: float(np.mean(v)) for pr, v in subset_fid.items()}
    parts.append("kept-subset FID " + ", ".join(f"PR{pr} {v:.4f}" for pr, v in sorted(floor.items())))
    detail = "; ".join(parts) + f"; {elapsed:.0f}s"
    assert record_criterion(7, "random pruning within 25% FID", ok, detail)


def test_c08_cluster_direction(record_criterion, runs_root):
    cfg = ExperimentConfig.from_text(f"""
dataset.kind = skewed4
methods = cluster:top, cluster:bottom
prs = 0.75
seeds = {SEEDS}
metrics = fid
""")
    t0 = time.perf_counter()
    res = run_experiment(cfg, runs_root)
    assert res.ok, res.failures
    near, nv = _mean_metric(res.reports, "cluster-top-proportional", 0.75, "fid")
    far, fv = _mean_metric(res.reports, "cluster-bottom-proportional", 0.75, "fid")
    detail = f"nearest {near:.4f} {np.round(nv, 4).tolist()} vs furthest {far:.4f} {np.round(fv, 4).tolist()}; {time.perf_counter() - t0:.0f}s"
    assert record_criterion(8, "cluster nearest beats furthest at PR=0.75", near < far, detail)


def _ratio(counts):
    counts = np.asarray(counts, float)
    return math.inf if counts.min() == 0 else counts.max() / counts.min()


def test_c09_balanced_generation(record_criterion, runs_root):
    cfg = ExperimentConfig.from_text(f"""
dataset.kind = skewed4
methods = cluster:top:balanced
seeds = {SEEDS}
metrics = fid
""")
    t0 = time.perf_counter()
    res = run_experiment(cfg, runs_root)
    assert res.ok, res.failures
    report = balance_report(res.run_dir)
    wins, parts = 0, []
    for seed in (0, 1, 2):
        bal = next(v for k, v in report.items() if k.endswith(f"-balanced__prbal__s{seed}"))
        prop = next(v for k, v in report.items() if f"__s{seed}__match-" in k)
        rb, rp = _ratio(bal[2]), _ratio(prop[2])
        wins += rb < rp
        parts.append(f"s{seed}: balanced {rb:.2f} {bal[2].tolist()} vs proportional {rp:.2f} {prop[2].tolist()}")
    detail = f"{wins}/3 seeds more balanced; " + "; ".join(parts) + f"; {time.perf_counter() - t0:.0f}s"
    assert record_criterion(9, "balanced selection balances generations", wins >= 2, detail)


def test_c10_memorization(record_criterion, runs_root):
    cfg = ExperimentConfig.from_text(f"""
dataset.kind = ring8
dataset.n = 4096
methods = random:top
prs = 0.5, 0.99
seeds = {SEEDS}
metrics = mem_distance
""")
    t0 = time.perf_counter()
    res = run_experiment(cfg, runs_root)
    assert res.ok, res.failures
    _, half = _mean_metric(res.reports, "random-top", 0.5, "mem_distance")
    _, tiny = _mean_metric(res.reports, "random-top", 0.99, "mem_distance")
    kept = sorted({r.config["kept"] for r in res.reports.values() if r.config["pruning_ratio"] == 0.99})
    wins = sum(a < b for a, b in zip(tiny, half))
    detail = (f"{wins}/3 seeds lower at PR=0.99 (kept {kept}); PR0.99 {np.round(tiny, 4).tolist()} "
              f"vs PR0.5 {np.round(half, 4).tolist()}; {time.perf_counter() - t0:.0f}s")
    assert record_criterion(10, "memorization at extreme pruning", wins >= 2, detail)


def test_c11_cell_rerun_bit_identical(record_criterion, ring_run, tmp_path):
    cfg, res, _ = ring_run
    exp = Experiment(cfg, tmp_path)
    exp.prepare()
    cell = next(c for c in exp.cells() if c.pr == 0.25 and c.seed == 1)
    t0 = time.perf_counter()
    fresh = exp.run_cell(cell)
    original = (res.run_dir / "cells" / cell.key / "report.json").read_text()
    same_report = fresh.to_json() == original
    same_samples = np.load(exp.run_dir / "cells" / cell.key / "samples.npy").tobytes() == np.load(res.run_dir / "cells" / cell.key / "samples.npy").tobytes()
    detail = f"cell {cell.key}: report identical {same_report}, samples identical {same_samples}; {time.perf_counter() - t0:.0f}s"
    assert record_criterion(11, "end-to-end determinism", same_report and same_samples, detail)
