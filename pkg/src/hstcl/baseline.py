"""DETect-style baseline: per-agent regression p-values, CUSUM, belief sharing, feedback counts.

Each agent regresses its internal variables (speed, heading) on external
ones (neighbour mean heading, neighbour mean speed, nearest-neighbour
distance, neighbour count) over a sliding window. A two-sided CUSUM on the
differenced slope p-values raises a per-agent flag when any pair shifts.
Agents average beliefs with one random neighbour, blend in the flag, and
send feedback while the belief is high. A global monitor flags bursts in
the feedback count with a rolling z-score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .dyngraph import DynamicGraph
from .tensorkit import ConfigError

N_INTERNAL = 2
N_EXTERNAL = 4


@dataclass
class BaselineConfig:
    reg_window: int = 10
    drift: float = 0.05
    threshold: float = 0.5
    mix: float = 0.05
    feedback_threshold: float = 0.1
    z: float = 3.0
    rolling_window: int = 50
    seed: int = 0


# ---------------------------------------------------------------------------
# variables
# ---------------------------------------------------------------------------

def step_variables(states: np.ndarray, edges: tuple[np.ndarray, np.ndarray],
                   delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Internal (n, 2) and external (n, 4) variables at one step.

    Agents without neighbours get nearest distance ``delta``, count 0 and
    their own heading and speed as the neighbour means.
    """
    n = states.shape[0]
    vel = states[:, 2:]
    speed = np.hypot(vel[:, 0], vel[:, 1])
    heading = np.arctan2(vel[:, 1], vel[:, 0])
    src, dst = (np.asarray(e, dtype=np.int64) for e in edges)
    count = np.bincount(dst, minlength=n).astype(np.float64)
    has = count > 0
    c = np.bincount(dst, weights=np.cos(heading[src]), minlength=n)
    s = np.bincount(dst, weights=np.sin(heading[src]), minlength=n)
    nb_heading = np.where(has, np.arctan2(s, c), heading)
    nb_speed = np.where(has, np.bincount(dst, weights=speed[src], minlength=n) / np.maximum(count, 1),
                        speed)
    nearest = np.full(n, float(delta))
    if src.size:
        d = np.hypot(*(states[src, :2] - states[dst, :2]).T)
        np.minimum.at(nearest, dst, d)
    internal = np.stack([speed, heading], axis=1)
    external = np.stack([nb_heading, nb_speed, nearest, count], axis=1)
    return internal, external


def compute_variables(graph: DynamicGraph, agent: int | None = None):
    """Per-step internal (T, n, 2) and external (T, n, 4) series (or one agent's slice)."""
    T, n = graph.n_steps, graph.n_nodes
    internal = np.empty((T, n, N_INTERNAL))
    external = np.empty((T, n, N_EXTERNAL))
    for t in range(T):
        internal[t], external[t] = step_variables(graph.states[t], graph.edges[t], graph.delta)
    if agent is not None:
        return internal[:, agent], external[:, agent]
    return internal, external


# ---------------------------------------------------------------------------
# regression p-values
# ---------------------------------------------------------------------------

def _slope_pvalues(sx, sy, sxx, syy, sxy, L):
    """Two-sided slope p-values from window sums; zero-variance windows give 1."""
    cxx = sxx - sx * sx / L
    cyy = syy - sy * sy / L
    cxy = sxy - sx * sy / L
    tol_x = 1e-10 * np.maximum(sxx / L, 1.0) * L
    tol_y = 1e-10 * np.maximum(syy / L, 1.0) * L
    ok = (cxx > tol_x) & (cyy > tol_y)
    cxx_s = np.where(ok, cxx, 1.0)
    slope = cxy / cxx_s
    sse = np.maximum(cyy - slope * cxy, 0.0)
    se = np.sqrt(sse / (L - 2) / cxx_s)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, np.abs(slope) / se, np.inf)
    p = 2.0 * stats.t.sf(t, L - 2)
    return np.where(ok, np.clip(p, 0.0, 1.0), 1.0)


def fit_relationship(internal: np.ndarray, external: np.ndarray) -> np.ndarray:
    """(n_internal, n_external) p-values of the OLS slope of each internal on each external."""
    y = np.asarray(internal, dtype=np.float64).reshape(len(internal), -1)
    x = np.asarray(external, dtype=np.float64).reshape(len(external), -1)
    L = y.shape[0]
    if L < 3:
        raise ConfigError("regression needs at least 3 points")
    yy, xx = y[:, :, None], x[:, None, :]
    return _slope_pvalues(xx.sum(0), yy.sum(0), (xx * xx).sum(0), (yy * yy).sum(0),
                          (xx * yy).sum(0), L)


def rolling_pvalues(internal: np.ndarray, external: np.ndarray, L: int) -> np.ndarray:
    """(T, n, 2, 4) p-values over trailing windows of length ``L``; 1 before the first full one."""
    if L < 3:
        raise ConfigError("regression window must be at least 3")
    y = internal[:, :, :, None]
    x = external[:, :, None, :]
    T = internal.shape[0]
    out = np.ones((T,) + internal.shape[1:] + external.shape[2:])
    if T < L:
        return out

    def win(a):
        c = np.cumsum(np.concatenate([np.zeros((1,) + a.shape[1:]), a]), axis=0)
        return c[L:] - c[:-L]

    xb = np.broadcast_to(x, out.shape)
    yb = np.broadcast_to(y, out.shape)
    # centre per agent to limit cancellation in the running sums
    xb = xb - xb.mean(axis=0, keepdims=True)
    yb = yb - yb.mean(axis=0, keepdims=True)
    out[L - 1:] = _slope_pvalues(win(xb), win(yb), win(xb * xb), win(yb * yb), win(xb * yb), L)
    return out


# ---------------------------------------------------------------------------
# CUSUM, beliefs, feedback
# ---------------------------------------------------------------------------

def cusum_detect(p_series: np.ndarray, drift: float = 0.05, threshold: float = 0.5) -> np.ndarray:
    """Two-sided CUSUM on step-to-step changes; leading axis is time, the rest run in parallel.

    Both statistics reset to zero whenever either crosses ``threshold``.
    """
    p = np.asarray(p_series, dtype=np.float64)
    flags = np.zeros(p.shape, dtype=bool)
    if p.shape[0] < 2:
        return flags
    g_hi = np.zeros(p.shape[1:])
    g_lo = np.zeros(p.shape[1:])
    diff = np.diff(p, axis=0)
    for t in range(1, p.shape[0]):
        g_hi = np.maximum(0.0, g_hi + diff[t - 1] - drift)
        g_lo = np.maximum(0.0, g_lo - diff[t - 1] - drift)
        hit = (g_hi > threshold) | (g_lo > threshold)
        flags[t] = hit
        g_hi = np.where(hit, 0.0, g_hi)
        g_lo = np.where(hit, 0.0, g_lo)
    return flags


def collaborate(beliefs: np.ndarray, edges: tuple[np.ndarray, np.ndarray], flags: np.ndarray,
                mix: float, rng: np.random.Generator, partners: np.ndarray | None = None) -> np.ndarray:
    """Average with one random neighbour (isolated agents keep theirs), then blend in the flag.

    ``partners`` forces the pairing (-1 for none); otherwise it is drawn from ``rng``.
    """
    if not 0.0 <= mix <= 1.0:
        raise ConfigError("mix must lie in [0, 1]")
    b = np.asarray(beliefs, dtype=np.float64)
    if partners is None:
        partners = random_partners(edges, b.size, rng)
    has = partners >= 0
    avg = b.copy()
    avg[has] = 0.5 * (b[has] + b[partners[has]])
    return np.clip((1.0 - mix) * avg + mix * np.asarray(flags, dtype=np.float64), 0.0, 1.0)


def random_partners(edges: tuple[np.ndarray, np.ndarray], n: int,
                    rng: np.random.Generator) -> np.ndarray:
    src, dst = (np.asarray(e, dtype=np.int64) for e in edges)
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    count = np.bincount(dst, minlength=n)
    start = np.concatenate([[0], np.cumsum(count)[:-1]])
    pick = start + np.floor(rng.random(n) * count).astype(np.int64)
    out = np.full(n, -1, dtype=np.int64)
    has = count > 0
    out[has] = src[pick[has]]
    return out


def run_beliefs(graph: DynamicGraph, cfg: BaselineConfig) -> np.ndarray:
    """(T, n) beliefs after each step's collaboration round."""
    internal, external = compute_variables(graph)
    p = rolling_pvalues(internal, external, cfg.reg_window)
    T, n = graph.n_steps, graph.n_nodes
    flags = cusum_detect(p.reshape(T, -1), cfg.drift, cfg.threshold).reshape(p.shape)
    agent_flag = flags.reshape(T, n, -1).any(axis=2)
    rng = np.random.default_rng([cfg.seed, 3])
    beliefs = np.zeros((T, n))
    b = np.zeros(n)
    for t in range(T):
        b = collaborate(b, graph.edges[t], agent_flag[t], cfg.mix, rng)
        beliefs[t] = b
    return beliefs


def feedback_counts(beliefs: np.ndarray, feedback_threshold: float, block: int = 1) -> np.ndarray:
    """Agents sending feedback per step, summed over blocks of ``block`` steps."""
    per_step = (beliefs > feedback_threshold).sum(axis=1).astype(np.float64)
    if block <= 1:
        return per_step
    T = per_step.size
    starts = np.arange(0, T, block)
    return np.add.reduceat(per_step, starts) if T else per_step


def global_threshold(counts: np.ndarray, window: int = 50, z: float = 3.0) -> np.ndarray:
    """Per-step alarm level: trailing mean + z * std over the previous ``window`` steps.

    NaN for the first ``window`` steps, where no full trailing window exists.
    """
    c = np.asarray(counts, dtype=np.float64)
    T = c.size
    out = np.full(T, np.nan)
    if T <= window:
        return out
    cs = np.concatenate([[0.0], np.cumsum(c)])
    cs2 = np.concatenate([[0.0], np.cumsum(c * c)])
    t = np.arange(window, T)
    mu = (cs[t] - cs[t - window]) / window
    var = np.maximum((cs2[t] - cs2[t - window]) / window - mu * mu, 0.0)
    out[window:] = mu + z * np.sqrt(var) + 1e-9 * np.maximum(1.0, np.abs(mu))
    return out


def detect_global_baseline(counts: np.ndarray, window: int = 50, z: float = 3.0) -> list[int]:
    """Steps closing an excursion above trailing mean + z * std (current step excluded).

    An excursion still open at the end of the series is not reported.
    """
    c = np.asarray(counts, dtype=np.float64)
    if c.size <= window or not np.isfinite(z):
        return []
    level = global_threshold(c, window, z)
    flag = np.zeros(c.size, dtype=bool)
    flag[window:] = c[window:] > level[window:]
    ends = np.flatnonzero(flag[:-1] & ~flag[1:])
    return ends.tolist()


Z_GRID = tuple(np.round(np.arange(0.5, 6.01, 0.25), 2))
FEEDBACK_GRID = (0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5)


def calibrate(beliefs: list[np.ndarray], truths: list[list[int]], block: int, theta: float,
              window: int = 50, z_grid=Z_GRID, fb_grid=FEEDBACK_GRID) -> tuple[float, float]:
    """(feedback_threshold, z) maximising mean validation F1; ties go to larger values."""
    from .evalkit import f1_at_tolerance

    best = (-1.0, None, None)
    for fb in fb_grid:
        counts = [feedback_counts(b, fb, block) for b in beliefs]
        for z in z_grid:
            f1s = []
            for cnt, truth in zip(counts, truths):
                f = f1_at_tolerance(truth, detect_global_baseline(cnt, window, z), theta).f1
                f1s.append(0.0 if np.isnan(f) else f)
            m = float(np.mean(f1s))
            if m >= best[0]:
                best = (m, fb, z)
    return float(best[1]), float(best[2])
