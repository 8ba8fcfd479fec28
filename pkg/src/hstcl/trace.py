"""Agent trace container and its JSONL file format.

File layout: a header record, then one record per retained step::

    {"n_agents": 150, "bounds": [0, 0, 51, 51], "schedule": [[0, 2500, "normal"], ...],
     "seed": 7, "dataset": "flock", "stride": 1, "eval_every": 50,
     "objective": [...], "groups": null}
    {"t": 0, "agents": [[x, y, vx, vy], ...]}
    ...

``t`` is the raw simulator step. ``stride`` is the raw-step spacing of the
stored records (1 for a full trace, k after downsampling). Schedule intervals
are half-open ``[start, end)`` in the record index space; the objective
measure is stored at evaluation resolution (one value per ``eval_every`` raw
steps) and never moves under downsampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMERGENT = "emergent"
NORMAL = "normal"


@dataclass
class AgentTrace:
    dataset: str
    bounds: tuple[float, float, float, float]
    states: np.ndarray  # (T, n_agents, 4)
    schedule: list[tuple[int, int, str]]
    seed: int
    objective: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stride: int = 1
    eval_every: int = 50
    groups: np.ndarray | None = None  # per-agent walking direction (+1 / -1), pedestrian only
    n_agents: int | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.n_agents is None:
            self.n_agents = int(self.states.shape[1]) if self.states.ndim == 3 else 0
        if self.states.size == 0:
            self.states = self.states.reshape(0, self.n_agents, 4)
        self.objective = np.asarray(self.objective, dtype=np.float64)
        self.schedule = [(int(a), int(b), str(p)) for a, b, p in self.schedule]

    @property
    def n_steps(self) -> int:
        return int(self.states.shape[0])

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :, :2]

    @property
    def steps_per_eval(self) -> int:
        """Stored records per evaluation step."""
        return max(1, self.eval_every // self.stride)

    def phase_at(self, t: int) -> str:
        for start, end, phase in self.schedule:
            if start <= t < end:
                return phase
        raise IndexError(t)

    def header(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "bounds": list(self.bounds),
            "schedule": [list(s) for s in self.schedule],
            "seed": self.seed,
            "dataset": self.dataset,
            "stride": self.stride,
            "eval_every": self.eval_every,
            "objective": self.objective.tolist(),
            "groups": None if self.groups is None else np.asarray(self.groups).astype(int).tolist(),
        }


def write_trace(trace: AgentTrace, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(trace.header()) + "\n")
        for i in range(trace.n_steps):
            rec = {"t": i * trace.stride, "agents": trace.states[i].tolist()}
            fh.write(json.dumps(rec) + "\n")


def read_trace(path: str | Path) -> AgentTrace:
    with open(path) as fh:
        header = json.loads(fh.readline())
        rows = [json.loads(line)["agents"] for line in fh if line.strip()]
    n = header["n_agents"]
    states = np.asarray(rows, dtype=np.float64).reshape(len(rows), n, 4)
    groups = header.get("groups")
    return AgentTrace(
        dataset=header["dataset"],
        bounds=tuple(header["bounds"]),
        states=states,
        schedule=[tuple(s) for s in header["schedule"]],
        seed=header["seed"],
        objective=np.asarray(header.get("objective", []), dtype=np.float64),
        stride=header.get("stride", 1),
        eval_every=header.get("eval_every", 50),
        groups=None if groups is None else np.asarray(groups),
        n_agents=n,
    )
