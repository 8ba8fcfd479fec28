"""Radius graphs over agent traces, window views, downsampling and the region grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trace import AgentTrace


# ---------------------------------------------------------------------------
# neighbourhoods
# ---------------------------------------------------------------------------

_OFFSETS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]


def neighbor_pairs(positions: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """All unordered pairs (i < j) with Euclidean distance <= delta.

    Uniform spatial hash with cell size ``delta``: each agent only inspects
    the 3x3 block of cells around its own.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n < 2:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    cells = np.floor((pos - pos.min(axis=0)) / delta).astype(np.int64) + 1
    stride = int(cells[:, 1].max()) + 2
    keys = cells[:, 0] * stride + cells[:, 1]
    order = np.argsort(keys, kind="stable")
    ukeys, ustart, ucount = np.unique(keys[order], return_index=True, return_counts=True)

    agents = np.arange(n)
    rep_agent, rep_start, rep_count = [], [], []
    for dx, dy in _OFFSETS:
        nk = (cells[:, 0] + dx) * stride + cells[:, 1] + dy
        idx = np.searchsorted(ukeys, nk).clip(max=ukeys.size - 1)
        found = ukeys[idx] == nk
        rep_agent.append(agents[found])
        rep_start.append(ustart[idx[found]])
        rep_count.append(ucount[idx[found]])
    a = np.concatenate(rep_agent)
    s = np.concatenate(rep_start)
    c = np.concatenate(rep_count)
    total = int(c.sum())
    owner = np.repeat(a, c)
    offs = np.arange(total) - np.repeat(np.cumsum(c) - c, c)
    cand = order[np.repeat(s, c) + offs]
    keep = cand > owner
    i, j = owner[keep], cand[keep]
    d2 = ((pos[i] - pos[j]) ** 2).sum(axis=1)
    close = d2 <= delta * delta
    i, j = i[close], j[close]
    order2 = np.lexsort((j, i))
    return i[order2], j[order2]


def neighbor_edges(positions: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Directed edges (src, dst) meaning ``src`` is in the neighbourhood of ``dst``."""
    i, j = neighbor_pairs(positions, delta)
    src = np.concatenate([i, j])
    dst = np.concatenate([j, i])
    order = np.lexsort((src, dst))
    return src[order].astype(np.int32), dst[order].astype(np.int32)


def build_neighborhoods(positions: np.ndarray, delta: float) -> list[np.ndarray]:
    """Sorted neighbour-id arrays, one per agent; an agent is never its own neighbour."""
    n = len(positions)
    src, dst = neighbor_edges(positions, delta)
    bounds = np.searchsorted(dst, np.arange(n + 1))
    return [src[bounds[k]:bounds[k + 1]].astype(np.int64) for k in range(n)]


# ---------------------------------------------------------------------------
# dynamic graph and windows
# ---------------------------------------------------------------------------

@dataclass
class WindowView:
    """States and per-step edges for the window ``[tau - w + 1, tau]``."""

    tau: int
    w: int
    states: np.ndarray  # (w, n, 4)
    edges: list[tuple[np.ndarray, np.ndarray]]

    @property
    def start(self) -> int:
        return self.tau - self.w + 1

    @property
    def n_nodes(self) -> int:
        return self.states.shape[1]


@dataclass
class DynamicGraph:
    states: np.ndarray  # (T, n, 4)
    delta: float
    edges: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.states.shape[1]

    def edge_counts(self) -> np.ndarray:
        """Undirected edge count per step."""
        return np.array([s.size // 2 for s, _ in self.edges], dtype=np.int64)

    def neighbors(self, t: int, j: int) -> np.ndarray:
        src, dst = self.edges[t]
        return np.sort(src[dst == j]).astype(np.int64)

    def window(self, tau: int, w: int) -> WindowView:
        start = tau - w + 1
        if start < 0 or tau >= self.n_steps:
            raise IndexError(f"window [{start}, {tau}] outside [0, {self.n_steps - 1}]")
        return WindowView(tau=tau, w=w, states=self.states[start:tau + 1],
                          edges=self.edges[start:tau + 1])


def build_dynamic_graph(trace: AgentTrace, delta: float) -> DynamicGraph:
    edges = [neighbor_edges(trace.states[t, :, :2], delta) for t in range(trace.n_steps)]
    return DynamicGraph(states=trace.states, delta=delta, edges=edges)


def downsample(trace: AgentTrace, k: int) -> AgentTrace:
    """Keeps records 0, k, 2k, ...; schedule boundaries move to ceil(b / k)."""
    if k < 1:
        raise ValueError("stride must be >= 1")
    if k == 1:
        return trace
    sched = []
    for start, end, phase in trace.schedule:
        a, b = -(-start // k), -(-end // k)
        if b > a:
            sched.append((a, b, phase))
    return AgentTrace(
        dataset=trace.dataset, bounds=trace.bounds, states=trace.states[::k],
        schedule=sched, seed=trace.seed, objective=trace.objective.copy(),
        stride=trace.stride * k, eval_every=trace.eval_every, groups=trace.groups,
        n_agents=trace.n_agents,
    )


# ---------------------------------------------------------------------------
# region grid
# ---------------------------------------------------------------------------

@dataclass
class RegionGrid:
    """``n x n`` cells over ``bounds = (x0, y0, x1, y1)``; region id = row * n + col.

    Cells are half-open ``[lo, hi)`` except the last row/column, which is closed.
    """

    bounds: tuple[float, float, float, float]
    n: int
    active: np.ndarray | None = None

    def __post_init__(self):
        x0, y0, x1, y1 = self.bounds
        if self.n < 1 or not (x1 > x0 and y1 > y0):
            raise ValueError("degenerate region grid")
        self.x_edges = np.linspace(x0, x1, self.n + 1)
        self.y_edges = np.linspace(y0, y1, self.n + 1)
        if self.active is None:
            self.active = np.ones(self.n * self.n, dtype=bool)

    @property
    def n_regions(self) -> int:
        return self.n * self.n

    def cell_of(self, region: int) -> tuple[int, int]:
        return region % self.n, region // self.n

    def adjacency_pairs(self) -> list[tuple[int, int]]:
        """Undirected 4-neighbour pairs (a < b) between active cells."""
        pairs = []
        n = self.n
        for row in range(n):
            for col in range(n):
                m = row * n + col
                if col + 1 < n:
                    pairs.append((m, m + 1))
                if row + 1 < n:
                    pairs.append((m, m + n))
        return [(a, b) for a, b in pairs if self.active[a] and self.active[b]]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed (src, dst) edges in both directions for every adjacent pair."""
        pairs = np.asarray(self.adjacency_pairs(), dtype=np.int64).reshape(-1, 2)
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        order = np.lexsort((src, dst))
        return src[order], dst[order]

    def neighbors(self, region: int) -> list[int]:
        out = []
        for a, b in self.adjacency_pairs():
            if a == region:
                out.append(b)
            elif b == region:
                out.append(a)
        return sorted(out)

    def prune(self, keep: np.ndarray) -> "RegionGrid":
        """Marks cells outside ``keep`` inactive (e.g. cells with no walkable area)."""
        return RegionGrid(self.bounds, self.n, active=self.active & np.asarray(keep, dtype=bool))

    def assign(self, positions: np.ndarray) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        x0, y0, x1, y1 = self.bounds
        if np.any(pos[:, 0] < x0) or np.any(pos[:, 0] > x1) or \
                np.any(pos[:, 1] < y0) or np.any(pos[:, 1] > y1):
            raise RuntimeError("position outside the world bounds after clamping")
        col = np.minimum(np.searchsorted(self.x_edges, pos[:, 0], side="right") - 1, self.n - 1)
        row = np.minimum(np.searchsorted(self.y_edges, pos[:, 1], side="right") - 1, self.n - 1)
        return row * self.n + col


def build_region_grid(bounds, n: int) -> RegionGrid:
    return RegionGrid(tuple(float(b) for b in bounds), int(n))


def assign_region(position, grid: RegionGrid) -> int:
    return int(grid.assign(np.asarray(position, dtype=np.float64)[None, :])[0])


def cell_size(grid: RegionGrid) -> tuple[float, float]:
    x0, y0, x1, y1 = grid.bounds
    return (x1 - x0) / grid.n, (y1 - y0) / grid.n


__all__ = [
    "DynamicGraph", "RegionGrid", "WindowView", "assign_region", "build_dynamic_graph",
    "build_neighborhoods", "build_region_grid", "cell_size", "downsample", "neighbor_edges",
    "neighbor_pairs",
]
