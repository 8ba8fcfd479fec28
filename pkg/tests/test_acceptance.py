"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s``. The desk-scale
experiment behind criteria 6 to 8 simulates and trains on 24 Flock runs and
dominates the runtime.
"""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from conftest import VERDICTS

from hstcl import encoder as enc
from hstcl.agent_detect import communicate
from hstcl.agent_model import agent_losses, init_agent_net, sample_temporal_neighbors, window_inputs
from hstcl.dyngraph import WindowView, build_region_grid
from hstcl.evalkit import Segmentation, covering, evaluate, f1_at_tolerance, label_offline
from hstcl.pipeline import resolve_config, run_one_seed
from hstcl.system_model import (
    detect_change_points,
    init_system_net,
    sample_regions,
    system_losses,
    window_graph,
)
from hstcl.tensorkit import grad_check

# desk scale: narrower encoders, fewer system slices, and a system window shrunk
# by the same factor as theta (200 instead of 1,000 evaluation steps)
EXPERIMENT = {
    "dataset": "flock",
    "sim": {"n_agents": 150, "world": 51.0, "n_steps": 10_000},
    "n_change_points": 10,
    "splits": {"train": 2, "val": 2, "test": 4},
    "seeds": [0, 1, 2],
    "theta": 20,
    "agent": {"D": 64},
    "system": {"w": 8, "D": 32, "epochs": 5, "B": 32},
}
BUDGET_S = 30 * 60


def verdict(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    print("\n" + line, flush=True)
    VERDICTS.append(line)
    return ok, line


def random_edges(rng, n, p):
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    i, j = iu[keep], ju[keep]
    return np.r_[i, j].astype(np.int64), np.r_[j, i].astype(np.int64)


# 1 -------------------------------------------------------------------------

def test_criterion_1_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    net = init_agent_net(8, seed=100)
    w, n = 4, 3
    view = WindowView(w - 1, w, rng.normal(size=(w, n, 4)), [random_edges(rng, n, 0.7) for _ in range(w)])
    x, graph = window_inputs(net, view)
    samples = sample_temporal_neighbors(view.edges, n, 5, rng)

    def agent_loss(params):
        res = agent_losses(params, net.target, x, graph, samples)
        return res.total, res.grads

    err_agent = grad_check(agent_loss, net.online)

    snet = init_system_net(8, seed=101)
    grid = build_region_grid((0, 0, 2, 2), 2)
    xs = rng.normal(size=(4, 4, 1))
    regions = sample_regions(4, 3, rng)

    def system_loss(params):
        res = system_losses(params, snet.target, xs, window_graph(grid, 4), regions)
        return res.total, res.grads

    err_system = grad_check(system_loss, snet.online)
    dt = time.perf_counter() - t0
    ok, line = verdict(1, err_agent < 1e-4 and err_system < 1e-4 and dt < 10,
                       f"agent rel err {err_agent:.2e}, system rel err {err_system:.2e}, {dt:.1f}s")
    assert ok, line


# 2 -------------------------------------------------------------------------

def test_criterion_2_incremental_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(200)
    n, w, D, steps = 12, 10, 16, 100
    p = enc.init_encoder(rng, 4, D)
    xs = rng.normal(size=(w + steps, n, 4))
    edges = [random_edges(rng, n, 0.3) for _ in range(w + steps)]
    _, cache = enc.init_cache(p, xs[:w], enc.DenseGraph.from_edges(edges[:w], n), w - 1)
    worst = 0.0
    for tau in range(w, w + steps):
        H, cache = enc.incremental_advance(p, cache, xs[tau], enc.DenseGraph.from_edges([edges[tau]], n), tau)
        ref, _ = enc.encode_window(p, xs[tau - w + 1:tau + 1],
                                   enc.EdgeIndex.stack(edges[tau - w + 1:tau + 1], n))
        worst = max(worst, float(np.abs(H - ref).max()))
    dt = time.perf_counter() - t0
    ok, line = verdict(2, worst < 1e-10 and dt < 10,
                       f"max abs diff {worst:.2e} over {steps} advances, {dt:.1f}s")
    assert ok, line


# 3 -------------------------------------------------------------------------

def test_criterion_3_metric_oracles():
    f = f1_at_tolerance([100, 300], [105, 290, 500], 20)
    hand_f1 = (f.tp, f.fp) == (2, 1) and math.isclose(f.f1, 0.8)
    hand_cov = math.isclose(covering(Segmentation((5,), 10), Segmentation((), 10)), 0.5)
    # reference misses each truth point by 10 steps; the variant hits one and adds nothing else
    T, theta, truth = 200, 5, [50, 100, 150]
    ref = evaluate(truth, [60, 110, 160], T, theta)
    var = evaluate(truth, [50], T, theta)
    diverge = var.f1 > ref.f1 and var.covering < ref.covering
    ok, line = verdict(3, hand_f1 and hand_cov and diverge,
                       f"F1 case {hand_f1}, covering case {hand_cov}, divergence "
                       f"F1 {ref.f1:.3f}->{var.f1:.3f} covering {ref.covering:.3f}->{var.covering:.3f}")
    assert ok, line


# 4 -------------------------------------------------------------------------

def test_criterion_4_consensus():
    n = 10
    src = np.r_[np.arange(n), (np.arange(n) + 1) % n]
    dst = np.r_[(np.arange(n) + 1) % n, np.arange(n)]
    s = np.random.default_rng(400).uniform(size=n)
    rounds = 0
    while s.max() - s.min() >= 1e-6 and rounds < 10_000:
        s = communicate(s, np.zeros(n), (src, dst), 0.0)
        rounds += 1
    spread = s.max() - s.min()
    ok, line = verdict(4, spread < 1e-6, f"spread {spread:.2e} after {rounds} rounds on a 10-ring")
    assert ok, line


# 5 -------------------------------------------------------------------------

def test_criterion_5_detection_rule():
    got = detect_change_points([0.1, 0.6, 0.7, 0.2], 0.5)
    ok, line = verdict(5, got == [3], f"detected {got}")
    assert ok, line


# 6-8 -----------------------------------------------------------------------

def _one_seed(seed):
    cfg = resolve_config({**EXPERIMENT, "seeds": [seed]})
    res = run_one_seed(cfg, seed, log=lambda m: print(m, flush=True))
    return {
        "seed": seed,
        "f1": {m: [r.f1 for r in reps] for m, reps in res.reports.items()},
        "cov": {m: [r.covering for r in reps] for m, reps in res.reports.items()},
        "spread": res.spread,
        "timings": res.timings,
    }


@pytest.fixture(scope="module")
def experiment():
    t0 = time.perf_counter()
    seeds = EXPERIMENT["seeds"]
    workers = min(len(seeds), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            out = list(ex.map(_one_seed, seeds))
    else:
        out = [_one_seed(s) for s in seeds]
    return out, time.perf_counter() - t0


def pooled(results, key, method):
    return float(np.nanmean([v for r in results for v in r[key][method]]))


def test_criterion_6_end_to_end(experiment):
    results, wall = experiment
    f1 = {m: pooled(results, "f1", m) for m in ("hstcl", "detect")}
    cov = {m: pooled(results, "cov", m) for m in ("hstcl", "detect")}
    ok = (f1["hstcl"] >= 0.5 and f1["hstcl"] > f1["detect"] and cov["hstcl"] > cov["detect"]
          and wall < BUDGET_S)
    ok, line = verdict(6, ok, f"HSTCL F1 {f1['hstcl']:.3f} cover {cov['hstcl']:.3f}; "
                              f"DETect F1 {f1['detect']:.3f} cover {cov['detect']:.3f}; "
                              f"wall {wall / 60:.1f} min on {os.cpu_count()} core(s)")
    assert ok, line


def test_criterion_7_ablation(experiment):
    results, wall = experiment
    full, agent_only = pooled(results, "f1", "hstcl"), pooled(results, "f1", "hstcl_agent")
    ok, line = verdict(7, agent_only <= full and wall < BUDGET_S,
                       f"agent-only F1 {agent_only:.3f} vs full {full:.3f}")
    assert ok, line


def test_criterion_8_non_collapse(experiment):
    results, _ = experiment
    spreads = [r["spread"] for r in results]
    ok, line = verdict(8, min(spreads) > 1e-3,
                       "pooled representation std per seed " + ", ".join(f"{s:.3g}" for s in spreads))
    assert ok, line


# 9 -------------------------------------------------------------------------

def test_criterion_9_labeler_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(900)
    failures = 0
    cases = 0
    for K in range(0, 11):
        for _ in range(3):
            T = int(rng.integers(max(K + 2, 50), 1001))
            pts = sorted(rng.choice(np.arange(1, T), size=K, replace=False).tolist())
            jumps = rng.choice([-1, 1], size=K + 1) * rng.uniform(0.5, 5, size=K + 1)
            levels = np.cumsum(jumps)
            bounds = [0] + pts + [T]
            x = np.concatenate([np.full(b - a, lv) for a, b, lv in zip(bounds[:-1], bounds[1:], levels)])
            failures += label_offline(x, K) != pts
            cases += 1
    dt = time.perf_counter() - t0
    ok, line = verdict(9, failures == 0 and dt < 5, f"{cases - failures}/{cases} exact, {dt:.1f}s")
    assert ok, line
