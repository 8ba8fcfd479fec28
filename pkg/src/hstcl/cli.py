"""Command-line pipeline: one subcommand per stage, all driven by one JSON config.

Run directory layout (``output_dir`` in the config)::

    config.json                       resolved config of the last stage run
    seed_<s>/runs/<split>_<i>/        trace.jsonl, labels.json, agent_scores.csv,
                                      regions.csv, agent_only.csv, system_scores.csv,
                                      feedback_counts.csv
    seed_<s>/agent_net.json           plus agent_log.csv
    seed_<s>/system_net.json          plus system_log.csv
    seed_<s>/detect/<method>.json     calibrated threshold, detections, per-run reports
    seed_<s>/report.json              all methods for this seed
    seed_<s>/plots/<method>_<run>.csv t, score, threshold, is_change_point; t counts trace
                                      steps for HSTCL series, evaluation steps for DETect
    manifests/seed_<s>/<stage>.json   input hashes, outputs, wall time
    comparison.csv / comparison.json

Errors exit nonzero with a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import baseline as bl
from .agent_detect import read_scores, score_trace, write_scores
from .agent_model import load_agent_net, save_agent_net, train_agent, write_log
from .dyngraph import build_dynamic_graph
from .evalkit import MetricsReport, label_offline
from .pipeline import (
    SPLITS,
    RunInfo,
    agent_hyper,
    agent_only_series,
    baseline_config,
    baseline_stage,
    detect_stage,
    effective_theta,
    grid_for,
    make_trace,
    parse_value,
    region_series,
    resolve_config,
    set_dotted,
    system_hyper,
)
from .system_model import (
    load_system_net,
    read_region_series,
    read_series,
    save_system_net,
    score_regions,
    train_system,
    write_region_series,
    write_series,
)
from .tensorkit import ConfigError, EmptyInputError
from .trace import read_trace, write_trace

HSTCL_METHODS = ("hstcl", "hstcl_agent")


class DependencyError(RuntimeError):
    """An upstream artifact is missing; ``stage`` names the subcommand that makes it."""

    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing {path}; run the '{stage}' stage first")
        self.path, self.stage = path, stage


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------

class Workspace:
    def __init__(self, cfg: dict, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.root = Path(cfg["output_dir"])
        self.dir = self.root / f"seed_{seed}"
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    def run_names(self, splits=SPLITS) -> list[str]:
        return [f"{s}_{i}" for s in splits for i in range(self.cfg["splits"][s])]

    def run_dir(self, name: str) -> Path:
        return self.dir / "runs" / name

    def need(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise DependencyError(path, stage)
        self.inputs.append(path)
        return path

    def made(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(path)
        return path

    # typed accessors ------------------------------------------------------

    def trace(self, name: str):
        return read_trace(self.need(self.run_dir(name) / "trace.jsonl", "simulate"))

    def labels(self, name: str) -> dict:
        return read_json(self.need(self.run_dir(name) / "labels.json", "label"))

    def run_info(self, name: str) -> RunInfo:
        lab = self.labels(name)
        return RunInfo(name, lab["truth"], lab["T_eval"], lab["steps_per_eval"])

    def write_manifest(self, stage: str, started: float) -> Path:
        path = self.root / "manifests" / f"seed_{self.seed}" / f"{stage}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        body = {
            "stage": stage,
            "seed": self.seed,
            "version": __version__,
            "inputs": {str(p): file_hash(p) for p in dict.fromkeys(self.inputs)},
            "outputs": {str(p): file_hash(p) for p in dict.fromkeys(self.outputs)},
            "wall_time_s": time.perf_counter() - started,
        }
        path.write_text(json.dumps(body, indent=1))
        return path


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_json(path: Path):
    return json.loads(Path(path).read_text())


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_simulate(ws: Workspace) -> None:
    for s in SPLITS:
        for i in range(ws.cfg["splits"][s]):
            tr = make_trace(ws.cfg, ws.seed, s, i)
            write_trace(tr, ws.made(ws.run_dir(f"{s}_{i}") / "trace.jsonl"))


def stage_label(ws: Workspace) -> None:
    for name in ws.run_names():
        tr = ws.trace(name)
        truth = label_offline(tr.objective, ws.cfg["n_change_points"])
        write_json(ws.made(ws.run_dir(name) / "labels.json"),
                   {"truth": truth, "T_eval": int(tr.objective.size),
                    "steps_per_eval": tr.steps_per_eval, "K": ws.cfg["n_change_points"]})


def stage_train_agent(ws: Workspace) -> None:
    traces = [ws.trace(n) for n in ws.run_names(("train",))]
    hyper = agent_hyper(ws.cfg, ws.seed)
    graphs = [build_dynamic_graph(tr, ws.cfg["delta"]) for tr in traces]
    net, log = train_agent(traces, hyper, graphs=graphs)
    save_agent_net(net, ws.made(ws.dir / "agent_net.json"), hyper)
    write_log(log, ws.made(ws.dir / "agent_log.csv"))


def stage_score_agents(ws: Workspace) -> None:
    net = load_agent_net(ws.need(ws.dir / "agent_net.json", "train-agent"))
    hyper = agent_hyper(ws.cfg, ws.seed)
    for name in ws.run_names():
        graph = build_dynamic_graph(ws.trace(name), ws.cfg["delta"])
        scores = score_trace(net, graph, hyper.w, ws.cfg["alpha"], seed=ws.seed)
        write_scores(scores, ws.made(ws.run_dir(name) / "agent_scores.csv"))


def stage_coarse_grain(ws: Workspace) -> None:
    names = ws.run_names()
    grid = grid_for(ws.cfg, ws.trace(names[0]))
    for name in names:
        tr = ws.trace(name)
        scores = read_scores(ws.need(ws.run_dir(name) / "agent_scores.csv", "score-agents"))
        write_region_series(region_series(scores, tr, grid),
                            ws.made(ws.run_dir(name) / "regions.csv"))
        write_series(agent_only_series(scores), ws.made(ws.run_dir(name) / "agent_only.csv"))


def _regions(ws: Workspace, name: str) -> np.ndarray:
    return read_region_series(ws.need(ws.run_dir(name) / "regions.csv", "coarse-grain"))


def stage_train_system(ws: Workspace) -> None:
    names = ws.run_names(("train",))
    grid = grid_for(ws.cfg, ws.trace(names[0]))
    hyper = system_hyper(ws.cfg, ws.seed)
    net, log = train_system([_regions(ws, n) for n in names], grid, hyper)
    save_system_net(net, ws.made(ws.dir / "system_net.json"), hyper)
    write_log(log, ws.made(ws.dir / "system_log.csv"))


def stage_detect(ws: Workspace) -> None:
    net = load_system_net(ws.need(ws.dir / "system_net.json", "train-system"))
    grid = grid_for(ws.cfg, ws.trace(ws.run_names(("train",))[0]))
    w = system_hyper(ws.cfg, ws.seed).w
    val = [ws.run_info(n) for n in ws.run_names(("val",))]
    test = [ws.run_info(n) for n in ws.run_names(("test",))]
    series = {"hstcl": {}, "hstcl_agent": {}}
    for r in val + test:
        path = ws.made(ws.run_dir(r.name) / "system_scores.csv")
        series["hstcl"][r.name] = score_regions(net, _regions(ws, r.name), grid, w)
        write_series(series["hstcl"][r.name], path)
        series["hstcl_agent"][r.name] = read_series(
            ws.need(ws.run_dir(r.name) / "agent_only.csv", "coarse-grain"))
    theta = effective_theta(ws.cfg, test[0].T_eval)
    for method in HSTCL_METHODS:
        c, det, steps, reports = detect_stage(method, series[method], val, test, theta, ws.seed)
        write_json(ws.made(ws.dir / "detect" / f"{method}.json"),
                   {"method": method, "threshold": c, "detections": det, "step_detections": steps,
                    "reports": [r.to_dict() for r in reports]})


def stage_detect_baseline(ws: Workspace) -> None:
    bcfg = baseline_config(ws.cfg, ws.seed)
    val = [ws.run_info(n) for n in ws.run_names(("val",))]
    test = [ws.run_info(n) for n in ws.run_names(("test",))]
    beliefs, spe = {}, None
    for r in val + test:
        tr = ws.trace(r.name)
        spe = tr.steps_per_eval
        beliefs[r.name] = bl.run_beliefs(build_dynamic_graph(tr, ws.cfg["delta"]), bcfg)
    theta = effective_theta(ws.cfg, test[0].T_eval)
    (fb, z), counts, det, reports = baseline_stage(beliefs, val, test, bcfg, theta, ws.seed, spe)
    for name, cnt in counts.items():
        write_series(cnt, ws.made(ws.run_dir(name) / "feedback_counts.csv"), "count")
    write_json(ws.made(ws.dir / "detect" / "detect.json"),
               {"method": "detect", "threshold": z, "feedback_threshold": fb,
                "window": bcfg.rolling_window, "detections": det,
                "reports": [r.to_dict() for r in reports]})


def _detections_present(ws: Workspace) -> list[Path]:
    paths = sorted((ws.dir / "detect").glob("*.json"))
    if not paths:
        raise DependencyError(ws.dir / "detect", "detect")
    for p in paths:
        ws.inputs.append(p)
    return paths


def stage_evaluate(ws: Workspace) -> None:
    rows, summary = [], {}
    for path in _detections_present(ws):
        d = read_json(path)
        reps = [MetricsReport(**r) for r in d["reports"]]
        rows += [r.to_dict() for r in reps]
        summary[d["method"]] = {"f1": _nanmean([r.f1 for r in reps]),
                                "covering": _nanmean([r.covering for r in reps]),
                                "threshold": d["threshold"], "n_runs": len(reps)}
    write_json(ws.made(ws.dir / "report.json"),
               {"dataset": ws.cfg["dataset"], "theta": ws.cfg["theta"], "seed": ws.seed,
                "methods": summary, "rows": rows})


def stage_plot_csv(ws: Workspace) -> None:
    for path in _detections_present(ws):
        d = read_json(path)
        method = d["method"]
        for name, det in d.get("step_detections", d["detections"]).items():
            if method == "detect":
                score = read_series(ws.need(ws.run_dir(name) / "feedback_counts.csv",
                                            "detect-baseline"))
                thr = bl.global_threshold(score, d["window"], d["threshold"])
            else:
                fname = "system_scores.csv" if method == "hstcl" else "agent_only.csv"
                score = read_series(ws.need(ws.run_dir(name) / fname, "detect"))
                thr = np.full(score.size, d["threshold"])
            marks = set(det)
            out = ws.made(ws.dir / "plots" / f"{method}_{name}.csv")
            with open(out, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["t", "score", "threshold", "is_change_point"])
                for t in range(score.size):
                    wr.writerow([t, repr(float(score[t])), repr(float(thr[t])), int(t in marks)])


STAGES = {
    "simulate": stage_simulate,
    "label": stage_label,
    "train-agent": stage_train_agent,
    "score-agents": stage_score_agents,
    "coarse-grain": stage_coarse_grain,
    "train-system": stage_train_system,
    "detect": stage_detect,
    "detect-baseline": stage_detect_baseline,
    "evaluate": stage_evaluate,
    "plot-csv": stage_plot_csv,
}


def run_stage(cfg: dict, stage: str, seeds: list[int] | None = None, log=None) -> list[Path]:
    """Runs one stage for each seed; returns the manifest paths."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    root = Path(cfg["output_dir"])
    root.mkdir(parents=True, exist_ok=True)
    write_json(root / "config.json", cfg)
    manifests = []
    for seed in cfg["seeds"] if seeds is None else seeds:
        ws = Workspace(cfg, seed)
        started = time.perf_counter()
        STAGES[stage](ws)
        manifests.append(ws.write_manifest(stage, started))
        if log:
            log(f"{stage} seed {seed}: {time.perf_counter() - started:.1f}s")
    return manifests


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else math.nan


def compare(reports: list[dict]) -> list[dict]:
    """One row per method: mean and std over seeds of the per-seed mean F1 and covering."""
    if not reports:
        raise EmptyInputError("no reports to compare")
    thetas = {r["theta"] for r in reports}
    if len(thetas) > 1:
        raise ConfigError(f"reports disagree on theta: {sorted(thetas)}")
    datasets = {r.get("dataset") for r in reports}
    if len(datasets) > 1:
        raise ConfigError(f"reports disagree on dataset: {sorted(map(str, datasets))}")
    per_method: dict[str, dict[str, list[float]]] = {}
    for rep in reports:
        for method, m in rep["methods"].items():
            acc = per_method.setdefault(method, {"f1": [], "covering": []})
            acc["f1"].append(m["f1"])
            acc["covering"].append(m["covering"])
    rows = []
    for method, acc in per_method.items():
        f1, cov = np.array(acc["f1"]), np.array(acc["covering"])
        rows.append({"method": method, "f1_mean": float(np.nanmean(f1)),
                     "f1_std": float(np.nanstd(f1)), "cover_mean": float(cov.mean()),
                     "cover_std": float(cov.std()), "n_seeds": int(f1.size),
                     "theta": reports[0]["theta"]})
    return rows


def write_comparison(rows: list[dict], csv_path: Path, json_path: Path) -> None:
    cols = ["method", "f1_mean", "f1_std", "cover_mean", "cover_std", "n_seeds", "theta"]
    with open(csv_path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        wr.writerows(rows)
    write_json(json_path, rows)


def cmd_compare(cfg: dict, paths: list[str]) -> Path:
    root = Path(cfg["output_dir"])
    files = [Path(p) for p in paths] if paths else sorted(root.glob("seed_*/report.json"))
    rows = compare([read_json(p) for p in files])
    root.mkdir(parents=True, exist_ok=True)
    write_comparison(rows, root / "comparison.csv", root / "comparison.json")
    return root / "comparison.json"


PIPELINE = ("simulate", "label", "train-agent", "score-agents", "coarse-grain", "train-system",
            "detect", "detect-baseline", "evaluate", "plot-csv")


def run_all(cfg: dict, seeds: list[int] | None = None, log=None) -> Path:
    for stage in PIPELINE:
        run_stage(cfg, stage, seeds, log)
    return cmd_compare(cfg, [])


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def load_config(path: str | None, overrides: list[str], out: str | None) -> dict:
    user = read_json(Path(path)) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_dotted(user, key.strip(), parse_value(value))
    if out:
        user["output_dir"] = out
    return resolve_config(user)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key by dotted path (repeatable)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, action="append",
                        help="run only this experiment seed (repeatable)")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="hstcl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in PIPELINE:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    cmp_ = sub.add_parser("compare", parents=[common], help="tabulate report.json files")
    cmp_.add_argument("reports", nargs="*", help="report files (default: every seed's report)")
    sub.add_parser("run-all", parents=[common], help="every stage, then compare")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    try:
        cfg = load_config(args.config, args.set, args.out)
        if args.command == "compare":
            print(cmd_compare(cfg, args.reports))
        elif args.command == "run-all":
            print(run_all(cfg, args.seed, log))
        else:
            for p in run_stage(cfg, args.command, args.seed, log):
                print(p)
    except Exception as exc:  # every failure becomes one JSON line on stderr
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if isinstance(exc, DependencyError):
            err["missing"] = str(exc.path)
            err["run_stage"] = exc.stage
        print(json.dumps(err), file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, DependencyError, EmptyInputError)) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
