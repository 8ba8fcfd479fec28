"""Per-agent detection scores and the neighbour score-averaging round."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import encoder as enc
from .agent_model import AgentNetParams
from .dyngraph import DynamicGraph
from .encoder import DenseGraph
from .tensorkit import ConfigError, cosine_dissim_rows


def agent_dissimilarity(h_now: np.ndarray, h_prev: np.ndarray) -> np.ndarray | float:
    """Cosine dissimilarity of the temporal means of two windows (..., w, D)."""
    a = np.asarray(h_now, dtype=np.float64)
    b = np.asarray(h_prev, dtype=np.float64)
    d = cosine_dissim_rows(a.mean(axis=-2), b.mean(axis=-2))
    return float(d) if np.ndim(d) == 0 else d


def limit_neighbors(src: np.ndarray, dst: np.ndarray, budget: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Keeps at most ``budget`` uniformly chosen incoming edges per agent."""
    keep = np.ones(src.size, dtype=bool)
    order = np.argsort(dst, kind="stable")
    bounds = np.flatnonzero(np.r_[True, dst[order][1:] != dst[order][:-1], True])
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b - a > budget:
            drop = rng.choice(np.arange(a, b), size=b - a - budget, replace=False)
            keep[order[drop]] = False
    return src[keep], dst[keep]


def communicate(scores: np.ndarray, dissims: np.ndarray, edges: tuple[np.ndarray, np.ndarray],
                alpha: float, budget: int | None = None,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """s_j <- alpha * d_j + (1 - alpha) * mean of s over j and its neighbours.

    ``edges`` are directed (src, dst) pairs, src being a neighbour of dst.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    s = np.asarray(scores, dtype=np.float64)
    src, dst = (np.asarray(e, dtype=np.int64) for e in edges)
    if budget is not None:
        src, dst = limit_neighbors(src, dst, budget, rng or np.random.default_rng(0))
    n = s.size
    total = s + np.bincount(dst, weights=s[src], minlength=n)
    count = 1.0 + np.bincount(dst, minlength=n)
    out = alpha * np.asarray(dissims, dtype=np.float64) + (1.0 - alpha) * total / count
    return np.clip(out, 0.0, 1.0)


def score_trace(net: AgentNetParams, graph: DynamicGraph, w: int, alpha: float = 0.05,
                budget: int | None = None, seed: int = 0) -> np.ndarray:
    """(T, n) agent scores, one encoder advance and one communication round per step.

    ``s[t] = 0`` for ``t <= w``; afterwards the score at ``t + 1`` mixes the
    dissimilarity between the windows ending at ``t`` and ``t - 1`` with the
    neighbourhood mean of the scores at ``t``.
    """
    T, n = graph.n_steps, graph.n_nodes
    scores = np.zeros((T, n))
    if T <= w:
        return scores
    rng = np.random.default_rng(seed)
    x = net.normalise(graph.states)
    view = graph.window(w - 1, w)
    H, cache = enc.init_cache(net.online, x[:w], DenseGraph.from_edges(view.edges, n), w - 1)
    prev = H.mean(axis=1)
    for tau in range(w, T - 1):
        s, d = graph.edges[tau]
        H, cache = enc.incremental_advance(net.online, cache, x[tau], DenseGraph.from_edges([(s, d)], n), tau)
        now = H.mean(axis=1)
        diss = cosine_dissim_rows(now, prev)
        scores[tau + 1] = communicate(scores[tau], diss, graph.edges[tau], alpha, budget, rng)
        prev = now
    return scores


def write_scores(scores: np.ndarray, path: str | Path) -> None:
    T, n = scores.shape
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "agent_id", "score"])
        for t in range(T):
            for j in range(n):
                wr.writerow([t, j, f"{scores[t, j]:.17g}"])


def read_scores(path: str | Path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return np.zeros((0, 0))
    T = int(data[:, 0].max()) + 1
    n = int(data[:, 1].max()) + 1
    out = np.zeros((T, n))
    out[data[:, 0].astype(int), data[:, 1].astype(int)] = data[:, 2]
    return out
