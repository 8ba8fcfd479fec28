"""End-to-end experiment: simulate, label, train both levels, score, detect, evaluate.

The in-memory path (:func:`run_experiment`) is what the CLI stages call
piecewise; every number it reports is a deterministic function of the config.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import baseline as bl
from .agent_detect import score_trace
from .agent_model import AgentHyper, AgentNetParams, pooled_representations, train_agent
from .dyngraph import DynamicGraph, RegionGrid, build_dynamic_graph, build_region_grid, downsample
from .evalkit import MetricsReport, evaluate, label_offline, search_threshold
from .simkit import SimConfig, preset, simulate
from .system_model import (
    SystemHyper,
    SystemNetParams,
    coarse_grain,
    detect_change_points,
    score_regions,
    train_system,
)
from .tensorkit import ConfigError
from .trace import AgentTrace

SPLITS = ("train", "val", "test")
METHODS = ("hstcl", "hstcl_agent", "detect")

DEFAULT_CONFIG: dict = {
    "dataset": "flock",
    "sim": {},
    "splits": {"train": 5, "val": 5, "test": 10},
    "seeds": [0],
    "downsample": 5,
    "n_change_points": 10,
    "delta": 5.0,
    "alpha": 0.05,
    "theta": 20,
    # theta is read on an evaluation axis of this many steps and rescaled to each run's length;
    # None uses theta as is
    "theta_reference_length": 1000,
    "grid_n": 20,
    "agent": {"w": 10, "D": 128, "kappa": 5, "epochs": 10, "B": 64, "eta": 0.99, "lr": 1e-3},
    "system": {"w": 40, "D": 128, "kappa": 5, "epochs": 10, "B": 64, "eta": 0.99, "lr": 1e-3},
    "baseline": {"reg_window": 10, "drift": 0.05, "threshold": 0.5, "mix": 0.05,
                 "rolling_window": 50},
    "output_dir": "runs/default",
}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {p} is not a section")
    node[parts[-1]] = value


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(user: dict | None = None) -> dict:
    cfg = deep_merge(DEFAULT_CONFIG, user or {})
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if cfg["dataset"] not in ("flock", "pedestrian"):
        raise ConfigError(f"unknown dataset {cfg['dataset']!r}")
    for s in SPLITS:
        if int(cfg["splits"].get(s, 0)) < 1:
            raise ConfigError(f"split {s!r} needs at least one run")
    if not cfg["seeds"]:
        raise ConfigError("need at least one seed")
    if not 0.0 <= cfg["alpha"] <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    if cfg["delta"] <= 0 or cfg["theta"] < 0 or cfg["grid_n"] < 1 or cfg["downsample"] < 1:
        raise ConfigError("delta, theta, grid_n and downsample must be positive")
    ref = cfg["theta_reference_length"]
    if ref is not None and not ref > 0:
        raise ConfigError("theta_reference_length must be positive or null")
    _hyper(AgentHyper, cfg["agent"], delta=cfg["delta"]).validate()
    _hyper(SystemHyper, cfg["system"]).validate()
    known = {f.name for f in fields(bl.BaselineConfig)}
    if set(cfg["baseline"]) - known:
        raise ConfigError(f"unknown baseline keys: {sorted(set(cfg['baseline']) - known)}")
    sim_config(cfg, 0)


def _hyper(cls, section: dict, **extra):
    known = {f.name for f in fields(cls)}
    bad = set(section) - known
    if bad:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(bad)}")
    return cls(**{**section, **extra})


def agent_hyper(cfg: dict, seed: int) -> AgentHyper:
    return _hyper(AgentHyper, cfg["agent"], delta=cfg["delta"], seed=seed)


def system_hyper(cfg: dict, seed: int) -> SystemHyper:
    return _hyper(SystemHyper, cfg["system"], seed=seed)


def baseline_config(cfg: dict, seed: int) -> bl.BaselineConfig:
    return bl.BaselineConfig(**{**cfg["baseline"], "seed": seed})


def run_seed(exp_seed: int, split: str, index: int) -> int:
    """Simulator seed of run ``index`` in ``split`` for experiment seed ``exp_seed``."""
    return exp_seed * 100_003 + SPLITS.index(split) * 1_000 + index


def sim_config(cfg: dict, seed: int) -> SimConfig:
    try:
        return preset(cfg["dataset"], **{**cfg["sim"], "seed": seed,
                                         "n_change_points": cfg["n_change_points"]})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@dataclass
class Run:
    split: str
    index: int
    trace: AgentTrace  # downsampled
    graph: DynamicGraph
    truth: list[int]

    @property
    def T_eval(self) -> int:
        return int(self.trace.objective.size)

    @property
    def name(self) -> str:
        return f"{self.split}_{self.index}"

    @property
    def info(self) -> "RunInfo":
        return RunInfo(self.name, self.truth, self.T_eval, self.trace.steps_per_eval)


def make_trace(cfg: dict, exp_seed: int, split: str, index: int) -> AgentTrace:
    raw = simulate(sim_config(cfg, run_seed(exp_seed, split, index)))
    return downsample(raw, cfg["downsample"])


def make_run(cfg: dict, trace: AgentTrace, split: str, index: int) -> Run:
    truth = label_offline(trace.objective, cfg["n_change_points"])
    return Run(split, index, trace, build_dynamic_graph(trace, cfg["delta"]), truth)


def grid_for(cfg: dict, trace: AgentTrace) -> RegionGrid:
    return build_region_grid(trace.bounds, cfg["grid_n"])


def region_series(scores: np.ndarray, trace: AgentTrace, grid: RegionGrid) -> np.ndarray:
    """Region states, one row per (downsampled) trace step."""
    return coarse_grain(scores, trace.positions, grid)


def agent_only_series(scores: np.ndarray) -> np.ndarray:
    """Mean agent score per step: the ablation that skips the system level."""
    return np.asarray(scores, dtype=np.float64).mean(axis=1)


def to_eval_steps(steps, steps_per_eval: int) -> list[int]:
    """Maps trace steps to the evaluation step whose interval ``(k-1, k]`` holds them."""
    return sorted({-(-int(t) // steps_per_eval) for t in steps})


def effective_theta(cfg: dict, T_eval: int) -> float:
    """Tolerance on a run of ``T_eval`` evaluation steps."""
    ref = cfg["theta_reference_length"]
    return float(cfg["theta"]) if ref is None else float(cfg["theta"]) * T_eval / ref


def representation_spread(net: AgentNetParams, graph: DynamicGraph, w: int,
                          n_windows: int = 20) -> float:
    """Mean over windows of the per-dimension std across agents of pooled representations."""
    taus = np.linspace(w - 1, graph.n_steps - 1, n_windows).astype(int)
    vals = [pooled_representations(net, graph.window(int(t), w)).std(axis=0).mean() for t in taus]
    return float(np.mean(vals))


@dataclass
class RunInfo:
    """Name, truth and evaluation length of a run; enough for the detection stages."""

    name: str
    truth: list[int]
    T_eval: int
    steps_per_eval: int


def detect_stage(method: str, series: dict[str, np.ndarray], val: list, test: list,
                 theta: float, exp_seed: int):
    """Calibrates ``c`` on the validation runs, then detects and scores the test runs.

    ``series`` run on trace steps; detections are mapped to evaluation steps
    before scoring. Returns ``(c, detections, step detections, reports)``, the
    two detection maps keyed by run name.
    """
    spe = val[0].steps_per_eval

    def detector(s, c):
        return to_eval_steps(detect_change_points(s, c), spe)

    c = search_threshold([series[r.name] for r in val], [r.truth for r in val], theta, detector)
    detections, steps, reports = {}, {}, []
    for r in test:
        steps[r.name] = detect_change_points(series[r.name], c)
        detections[r.name] = det = to_eval_steps(steps[r.name], r.steps_per_eval)
        reports.append(evaluate(r.truth, det, r.T_eval, theta, c,
                                {"method": method, "run": r.name, "seed": exp_seed}))
    return c, detections, steps, reports


def baseline_stage(beliefs: dict[str, np.ndarray], val: list, test: list,
                   bcfg: bl.BaselineConfig, theta: float, exp_seed: int, spe: int | None = None):
    """Returns ``((feedback_threshold, z), counts, detections, reports)`` for the test runs."""
    if spe is None:
        spe = val[0].steps_per_eval
    fb, z = bl.calibrate([beliefs[r.name] for r in val], [r.truth for r in val],
                         spe, theta, bcfg.rolling_window)
    counts, detections, reports = {}, {}, []
    for r in test:
        counts[r.name] = bl.feedback_counts(beliefs[r.name], fb, spe)
        det = bl.detect_global_baseline(counts[r.name], bcfg.rolling_window, z)
        detections[r.name] = det
        reports.append(evaluate(r.truth, det, r.T_eval, theta, z,
                                {"method": "detect", "run": r.name, "seed": exp_seed,
                                 "feedback_threshold": fb}))
    return (fb, z), counts, detections, reports


@dataclass
class SeedResult:
    seed: int
    reports: dict[str, list[MetricsReport]] = field(default_factory=dict)
    thresholds: dict[str, float] = field(default_factory=dict)
    spread: float = math.nan
    timings: dict[str, float] = field(default_factory=dict)
    detections: dict[str, dict[str, list[int]]] = field(default_factory=dict)
    scores: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    truths: dict[str, list[int]] = field(default_factory=dict)
    agent_log: list[dict] = field(default_factory=list)
    system_log: list[dict] = field(default_factory=list)

    def mean(self, method: str, key: str) -> float:
        return float(np.nanmean([getattr(r, key) for r in self.reports[method]]))


def run_one_seed(cfg: dict, exp_seed: int, log=print) -> SeedResult:
    res = SeedResult(seed=exp_seed)
    clock = time.perf_counter()

    def tick(name):
        nonlocal clock
        now = time.perf_counter()
        res.timings[name] = now - clock
        clock = now
        log(f"[seed {exp_seed}] {name}: {res.timings[name]:.1f}s")

    runs = {s: [make_run(cfg, make_trace(cfg, exp_seed, s, i), s, i)
                for i in range(cfg["splits"][s])] for s in SPLITS}
    for s in SPLITS:
        for r in runs[s]:
            res.truths[r.name] = r.truth
    tick("simulate+label")

    ahyp = agent_hyper(cfg, exp_seed)
    net, res.agent_log = train_agent([r.trace for r in runs["train"]], ahyp,
                                     graphs=[r.graph for r in runs["train"]])
    res.spread = representation_spread(net, runs["test"][0].graph, ahyp.w)
    tick("train-agent")

    grid = grid_for(cfg, runs["train"][0].trace)
    Y, A = {}, {}
    for s in SPLITS:
        for r in runs[s]:
            sc = score_trace(net, r.graph, ahyp.w, cfg["alpha"], seed=exp_seed)
            Y[r.name] = region_series(sc, r.trace, grid)
            A[r.name] = agent_only_series(sc)
    tick("score-agents")

    shyp = system_hyper(cfg, exp_seed)
    snet, res.system_log = train_system([Y[r.name] for r in runs["train"]], grid, shyp)
    tick("train-system")

    S = {r.name: score_regions(snet, Y[r.name], grid, shyp.w)
         for s in ("val", "test") for r in runs[s]}
    res.scores = {"hstcl": S, "hstcl_agent": {k: A[k] for k in S}}
    val, test = ([r.info for r in runs[s]] for s in ("val", "test"))
    theta = effective_theta(cfg, test[0].T_eval)
    for method, series in res.scores.items():
        c, res.detections[method], _, res.reports[method] = detect_stage(
            method, series, val, test, theta, exp_seed)
        res.thresholds[method] = c
    tick("detect")

    bcfg = baseline_config(cfg, exp_seed)
    beliefs = {r.name: bl.run_beliefs(r.graph, bcfg) for s in ("val", "test") for r in runs[s]}
    out = baseline_stage(beliefs, val, test, bcfg, theta, exp_seed)
    (fb, z), res.scores["detect"], res.detections["detect"], res.reports["detect"] = out
    res.thresholds["detect"] = z
    res.thresholds["detect_feedback"] = fb
    tick("detect-baseline")
    return res


def run_experiment(cfg: dict | None = None, log=print) -> list[SeedResult]:
    cfg = resolve_config(cfg)
    return [run_one_seed(cfg, s, log) for s in cfg["seeds"]]


def summarise(results: list[SeedResult]) -> dict[str, dict[str, float]]:
    """Mean and std over all test runs of all seeds, per method."""
    out = {}
    for m in results[0].reports:
        f1 = [r.f1 for res in results for r in res.reports[m]]
        cov = [r.covering for res in results for r in res.reports[m]]
        out[m] = {"f1_mean": float(np.nanmean(f1)), "f1_std": float(np.nanstd(f1)),
                  "cover_mean": float(np.mean(cov)), "cover_std": float(np.std(cov)),
                  "n": len(f1)}
    return out
