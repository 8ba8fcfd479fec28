"""Region states, the region-level encoder, system consistency losses and detection.

Agent scores are summed per grid cell to give scalar region states. The
region encoder reuses the agent encoder on a static 4-neighbour grid graph.
A window's system representation is

    r_G^t = mean_m Proj_RS(r_m^t),    u = mean_t Proj_RT(r_G^t)

and training pulls ``u`` towards the target's ``r~_G^t`` at every step and
towards the target summaries ``w~_m = mean_t Proj~_RS(r~_m^t)`` of a few
uniformly drawn regions. The system score is the cosine dissimilarity of
``u`` between consecutive windows.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import encoder as enc
from .dyngraph import RegionGrid
from .encoder import EdgeIndex
from .tensorkit import (
    ConfigError,
    OptimizerState,
    Params,
    TrainingDivergenceError,
    adam_step,
    copy_params,
    cosine_dissim,
    cosine_dissim_grad,
    cosine_dissim_rows,
    ema_update,
    init_mlp,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
)


@dataclass
class SystemHyper:
    w: int = 40
    D: int = 128
    kappa: int = 5
    epochs: int = 10
    B: int = 64
    eta: float = 0.99
    lr: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if self.w < 1 or self.D < 1 or self.kappa < 1 or self.B < 1 or self.epochs < 0:
            raise ConfigError(f"invalid system hyperparameters: {self}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")


@dataclass
class SystemNetParams:
    online: Params
    target: Params
    D: int
    shift: float = 0.0
    scale: float = 1.0

    def normalise(self, Y: np.ndarray) -> np.ndarray:
        return ((np.asarray(Y, dtype=np.float64) - self.shift) / self.scale)[..., None]


# ---------------------------------------------------------------------------
# region states
# ---------------------------------------------------------------------------

def coarse_grain(scores: np.ndarray, positions: np.ndarray, grid: RegionGrid) -> np.ndarray:
    """(T, M) region states: the sum of the scores of the agents inside each cell."""
    scores = np.asarray(scores, dtype=np.float64)
    T, n = scores.shape
    M = grid.n_regions
    region = grid.assign(np.asarray(positions).reshape(-1, 2)).reshape(T, n)
    flat = (np.arange(T)[:, None] * M + region).ravel()
    return np.bincount(flat, weights=scores.ravel(), minlength=T * M).reshape(T, M)


def region_graph(grid: RegionGrid) -> tuple[np.ndarray, np.ndarray]:
    return grid.edges()


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

def init_system_params(rng: np.random.Generator, D: int) -> Params:
    p = enc.init_encoder(rng, 1, D)
    p.update(init_mlp(rng, [D, D, D], "proj_rs"))
    p.update(init_mlp(rng, [D, D, D], "proj_rt"))
    return p


def init_system_net(D: int, seed: int = 0, series: list[np.ndarray] | None = None) -> SystemNetParams:
    rng = np.random.default_rng(seed)
    online = init_system_params(rng, D)
    net = SystemNetParams(online=online, target=copy_params(online), D=D)
    if series:
        allv = np.concatenate([np.asarray(s).ravel() for s in series])
        net.shift = float(allv.mean())
        net.scale = float(allv.std()) or 1.0
    return net


def window_graph(grid: RegionGrid, w: int) -> EdgeIndex:
    src, dst = grid.edges()
    return EdgeIndex.stack([(src, dst)] * w, grid.n_regions)


def ste_region_forward(params: Params, x: np.ndarray, graph: EdgeIndex):
    """Region representations (M, w, D) for a window ``x`` of shape (w, M, 1)."""
    return enc.encode_window(params, x, graph)


def system_representation(params: Params, R: np.ndarray):
    """Returns ``(u, r_G, cache)`` from region representations R (M, w, D)."""
    PRS, in_rs = mlp_forward(params, R, "proj_rs")
    rG = PRS.mean(axis=0)
    PRT, in_rt = mlp_forward(params, rG, "proj_rt")
    u = PRT.mean(axis=0)
    return u, rG, {"in_rs": in_rs, "in_rt": in_rt, "M": R.shape[0], "w": R.shape[1]}


@dataclass
class SystemLoss:
    l_st: float
    l_ss: float
    total: float
    grads: Params


def system_losses(online: Params, target: Params, x: np.ndarray, graph: EdgeIndex,
                  regions: np.ndarray) -> SystemLoss:
    """Temporal and spatial system consistency with gradients w.r.t. ``online``.

    ``regions`` are the sampled region ids for the spatial term.
    """
    R, cache = ste_region_forward(online, x, graph)
    u, _, rcache = system_representation(online, R)
    Rt, _ = ste_region_forward(target, x, graph)
    PRSt, _ = mlp_forward(target, Rt, "proj_rs")
    rGt = PRSt.mean(axis=0)  # (w, D)
    wt = PRSt.mean(axis=1)  # (M, D)

    w = x.shape[0]
    U = np.broadcast_to(u, rGt.shape)
    l_st = float(cosine_dissim_rows(U, rGt).mean())
    gu = cosine_dissim_grad(U, rGt).sum(axis=0) / w
    regions = np.asarray(regions, dtype=np.int64)
    Us = np.broadcast_to(u, (regions.size, u.size))
    l_ss = float(cosine_dissim_rows(Us, wt[regions]).mean())
    gu = gu + cosine_dissim_grad(Us, wt[regions]).sum(axis=0) / regions.size

    M = rcache["M"]
    gPRT = np.broadcast_to(gu / w, (w, u.size)).copy()
    grG, grads = mlp_backward(online, rcache["in_rt"], gPRT, "proj_rt")
    gPRS = np.broadcast_to(grG[None] / M, (M, w, u.size)).copy()
    gR, g_rs = mlp_backward(online, rcache["in_rs"], gPRS, "proj_rs")
    grads.update(g_rs)
    grads.update(enc.encode_backward(online, cache, gR))
    return SystemLoss(l_st, l_ss, l_st + l_ss, grads)


def sample_regions(M: int, kappa: int, rng: np.random.Generator,
                   active: np.ndarray | None = None) -> np.ndarray:
    pool = np.arange(M) if active is None else np.flatnonzero(active)
    if kappa > pool.size:
        raise ConfigError(f"kappa={kappa} exceeds the {pool.size} available regions")
    return rng.choice(pool, size=kappa, replace=False)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

LOG_FIELDS = ("epoch", "slice", "L_ST", "L_SS", "L_System")


def train_system(series: list[np.ndarray], grid: RegionGrid, hyper: SystemHyper,
                 net: SystemNetParams | None = None) -> tuple[SystemNetParams, list[dict]]:
    """``series`` are (T, M) region-state arrays on the detection time axis."""
    hyper.validate()
    if not series:
        raise ConfigError("need at least one region series")
    if net is None:
        net = init_system_net(hyper.D, hyper.seed, series)
    graph = window_graph(grid, hyper.w)
    rng = np.random.default_rng([hyper.seed, 2])
    opt = OptimizerState(lr=hyper.lr)
    log: list[dict] = []
    k = 0
    for epoch in range(hyper.epochs):
        for Y in series:
            if Y.shape[0] < hyper.w:
                raise ConfigError(f"region series of {Y.shape[0]} steps is shorter than w={hyper.w}")
            x_all = net.normalise(Y)
            for _ in range(hyper.B):
                tau = int(rng.integers(hyper.w - 1, Y.shape[0]))
                regions = sample_regions(grid.n_regions, hyper.kappa, rng, grid.active)
                res = system_losses(net.online, net.target, x_all[tau - hyper.w + 1:tau + 1],
                                    graph, regions)
                if not np.isfinite(res.total):
                    raise TrainingDivergenceError(
                        f"non-finite system loss at epoch {epoch}, slice {k}")
                adam_step(opt, net.online, res.grads)
                ema_update(net.target, net.online, hyper.eta)
                log.append({"epoch": epoch, "slice": k, "L_ST": res.l_st, "L_SS": res.l_ss,
                            "L_System": res.total})
                k += 1
    return net, log


def mean_system_loss(net: SystemNetParams, series: list[np.ndarray], grid: RegionGrid,
                     taus: list[tuple[int, int]], hyper: SystemHyper, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    graph = window_graph(grid, hyper.w)
    vals = []
    for i, tau in taus:
        x = net.normalise(series[i])[tau - hyper.w + 1:tau + 1]
        regions = sample_regions(grid.n_regions, hyper.kappa, rng, grid.active)
        vals.append(system_losses(net.online, net.target, x, graph, regions).total)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# scoring and detection
# ---------------------------------------------------------------------------

def system_score(u_now: np.ndarray, u_prev: np.ndarray) -> float:
    return cosine_dissim(u_now, u_prev)


def system_trajectory(net: SystemNetParams, Y: np.ndarray, grid: RegionGrid, w: int) -> np.ndarray:
    """(T, D) system representations u; rows before the first full window are NaN."""
    T, M = Y.shape
    D = net.D
    out = np.full((T, D), np.nan)
    if T < w:
        return out
    x = net.normalise(Y)
    src, dst = grid.edges()
    step_graph = EdgeIndex(M, src, dst)
    R, cache = enc.init_cache(net.online, x[:w], window_graph(grid, w), w - 1)
    out[w - 1] = system_representation(net.online, R)[0]
    for tau in range(w, T):
        R, cache = enc.incremental_advance(net.online, cache, x[tau], step_graph, tau)
        out[tau] = system_representation(net.online, R)[0]
    return out


def score_regions(net: SystemNetParams, Y: np.ndarray, grid: RegionGrid, w: int) -> np.ndarray:
    """System score per step; 0 until two full windows exist (t < w)."""
    U = system_trajectory(net, Y, grid, w)
    s = np.zeros(Y.shape[0])
    if Y.shape[0] > w:
        s[w:] = cosine_dissim_rows(U[w:], U[w - 1:-1])
    return s


def detect_change_points(scores: np.ndarray, c: float) -> list[int]:
    """Falling-edge rule: ``t`` is reported when ``s[t-1] > c`` and ``s[t] <= c``."""
    if c < 0:
        raise ConfigError("threshold must be non-negative")
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        return []
    hits = (s[:-1] > c) & (s[1:] <= c)
    return (np.flatnonzero(hits) + 1).tolist()


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_region_series(Y: np.ndarray, path: str | Path) -> None:
    T, M = Y.shape
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "region_id", "y"])
        for t in range(T):
            for m in range(M):
                wr.writerow([t, m, f"{Y[t, m]:.17g}"])


def read_region_series(path: str | Path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    T = int(data[:, 0].max()) + 1
    M = int(data[:, 1].max()) + 1
    out = np.zeros((T, M))
    out[data[:, 0].astype(int), data[:, 1].astype(int)] = data[:, 2]
    return out


def write_series(s: np.ndarray, path: str | Path, column: str = "score") -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", column])
        for t, v in enumerate(s):
            wr.writerow([t, f"{v:.17g}"])


def read_series(path: str | Path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1].copy()


def save_system_net(net: SystemNetParams, path: str | Path, hyper: SystemHyper | None = None) -> None:
    meta = {"kind": "system", "D": net.D, "shift": net.shift, "scale": net.scale}
    if hyper is not None:
        meta["hyper"] = asdict(hyper)
    save_checkpoint(path, {"online": net.online, "target": net.target}, meta)


def load_system_net(path: str | Path) -> SystemNetParams:
    branches, meta = load_checkpoint(path)
    if meta.get("kind") != "system":
        raise ConfigError(f"{path} is not a system checkpoint")
    return SystemNetParams(online=branches["online"], target=branches["target"], D=int(meta["D"]),
                           shift=float(meta["shift"]), scale=float(meta["scale"]))
