"""Agent-level encoder, consistency losses and training loop.

Each agent encodes its own last ``w`` states plus its neighbours' states with
the shared spatio-temporal encoder. Training pulls together

* the window summary ``v_j = mean_t Proj_T(h_j^t)`` and every step of the
  target encoder's window ``h~_j^t`` (temporal consistency), and
* the predicted summary ``m_j = mean_t Pred(Proj_S(h_j^t))`` and the target
  summaries ``n~_i = mean_t Proj~_S(h~_i^t)`` of neighbours drawn in
  proportion to how often they appear in the window (spatial consistency).

Only the online branch gets gradients; the target follows by EMA.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .dyngraph import DynamicGraph, WindowView, build_dynamic_graph
from .encoder import DenseGraph, EdgeIndex
from .tensorkit import (
    ConfigError,
    OptimizerState,
    Params,
    TrainingDivergenceError,
    adam_step,
    copy_params,
    cosine_dissim_grad,
    cosine_dissim_rows,
    ema_update,
    init_mlp,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
)
from .trace import AgentTrace


@dataclass
class AgentHyper:
    w: int = 10
    D: int = 128
    kappa: int = 5
    epochs: int = 10
    B: int = 64
    eta: float = 0.99
    lr: float = 1e-3
    delta: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        if self.w < 1 or self.D < 1 or self.kappa < 1 or self.B < 1 or self.epochs < 0:
            raise ConfigError(f"invalid agent hyperparameters: {self}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")


@dataclass
class AgentNetParams:
    online: Params
    target: Params
    D: int
    shift: np.ndarray = field(default_factory=lambda: np.zeros(4))
    scale: np.ndarray = field(default_factory=lambda: np.ones(4))

    def normalise(self, states: np.ndarray) -> np.ndarray:
        return (states - self.shift) / self.scale


def init_agent_params(rng: np.random.Generator, D: int, in_dim: int = 4) -> Params:
    p = enc.init_encoder(rng, in_dim, D)
    p.update(init_mlp(rng, [D, D, D], "proj_t"))
    p.update(init_mlp(rng, [D, D, D], "proj_s"))
    p.update(init_mlp(rng, [D, D, D], "pred"))
    return p


def init_agent_net(D: int, seed: int = 0, traces: list[AgentTrace] | None = None) -> AgentNetParams:
    """Fresh online/target pair; input normalisation is taken from ``traces`` if given."""
    rng = np.random.default_rng(seed)
    online = init_agent_params(rng, D)
    net = AgentNetParams(online=online, target=copy_params(online), D=D)
    if traces:
        x0, y0, x1, y1 = traces[0].bounds
        vmax = max(float(np.abs(t.states[:, :, 2:]).max()) if t.n_steps else 0.0 for t in traces)
        net.shift = np.array([(x0 + x1) / 2, (y0 + y1) / 2, 0.0, 0.0])
        net.scale = np.array([(x1 - x0) / 2, (y1 - y0) / 2, vmax or 1.0, vmax or 1.0])
    return net


# ---------------------------------------------------------------------------
# per-agent views of the encoder
# ---------------------------------------------------------------------------

def spatial_attend(params: Params, x_j: np.ndarray, neighbor_states: np.ndarray) -> np.ndarray:
    """Spatial representation of one agent given its neighbours' states (k, in_dim)."""
    nb = np.asarray(neighbor_states, dtype=np.float64).reshape(-1, len(x_j))
    x = np.vstack([np.asarray(x_j, dtype=np.float64)[None, :], nb])
    k = nb.shape[0]
    graph = EdgeIndex(k + 1, np.arange(1, k + 1), np.zeros(k, dtype=np.int64))
    z, _ = enc.spatial_forward(params, x, graph)
    return z[0]


def temporal_attend(params: Params, z_window: np.ndarray) -> np.ndarray:
    """(w, D) spatial representations of one agent -> (w, D) temporal representations."""
    H, _ = enc.temporal_forward(params, np.asarray(z_window, dtype=np.float64)[None])
    return H[0]


def window_inputs(net: AgentNetParams, view: WindowView) -> tuple[np.ndarray, DenseGraph]:
    x = net.normalise(view.states)
    return x, DenseGraph.from_edges(view.edges, view.n_nodes)


def ste_agent_forward(params: Params, net: AgentNetParams, view: WindowView,
                      agent: int | None = None) -> np.ndarray:
    """Temporal representations (w, D) of ``agent``, or (n, w, D) for all agents."""
    x, graph = window_inputs(net, view)
    H, _ = enc.encode_window(params, x, graph)
    return H if agent is None else H[agent]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossResult:
    l_t: float
    l_s: float
    total: float
    grads: Params
    n_skipped: int = 0


def temporal_neighbor_lists(edges: list[tuple[np.ndarray, np.ndarray]],
                            n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Window-wide neighbour multisets: ``(srcs sorted by owner, start, count)`` per agent.

    ``edges`` holds one directed ``(src, dst)`` pair of arrays per step.
    """
    src = np.concatenate([np.asarray(s, dtype=np.int64) for s, _ in edges] or [np.zeros(0, np.int64)])
    dst = np.concatenate([np.asarray(d, dtype=np.int64) for _, d in edges] or [np.zeros(0, np.int64)])
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    count = np.bincount(dst, minlength=n)
    start = np.concatenate([[0], np.cumsum(count)[:-1]])
    return src, start, count


def sample_temporal_neighbors(edges: list[tuple[np.ndarray, np.ndarray]], n: int, kappa: int,
                              rng: np.random.Generator) -> np.ndarray:
    """(n, kappa) neighbour ids drawn with probability proportional to appearance count;
    rows of agents without any neighbour are -1."""
    src, start, count = temporal_neighbor_lists(edges, n)
    u = rng.random((n, kappa))
    idx = start[:, None] + np.floor(u * count[:, None]).astype(np.int64)
    has = count > 0
    out = np.full((n, kappa), -1, dtype=np.int64)
    out[has] = src[np.minimum(idx[has], src.size - 1)]
    return out


def agent_losses(online: Params, target: Params, x: np.ndarray, graph: DenseGraph | EdgeIndex,
                 samples: np.ndarray) -> LossResult:
    """Temporal and spatial consistency losses with gradients w.r.t. ``online``.

    ``x`` is (w, n, in_dim); ``samples`` is (n, kappa) with -1 marking agents
    that have no neighbour in the window (they are left out of the spatial term).
    """
    w, n, _ = x.shape
    H, cache = enc.encode_window(online, x, graph)
    Ht, _ = enc.encode_window(target, x, graph)

    # temporal consistency
    PT, in_t = mlp_forward(online, H, "proj_t")
    v = PT.mean(axis=1)
    d_t = cosine_dissim_rows(v[:, None, :], Ht)
    l_t = float(d_t.mean())
    gv = cosine_dissim_grad(np.broadcast_to(v[:, None, :], Ht.shape), Ht).sum(axis=1) / (n * w)
    gH, grads = mlp_backward(online, in_t, np.broadcast_to(gv[:, None, :] / w, PT.shape).copy(),
                             "proj_t")

    # spatial consistency
    valid = samples[:, 0] >= 0
    n_valid = int(valid.sum())
    PS, in_s = mlp_forward(online, H, "proj_s")
    M, in_m = mlp_forward(online, PS, "pred")
    m = M.mean(axis=1)
    PSt, _ = mlp_forward(target, Ht, "proj_s")
    nt = PSt.mean(axis=1)
    if n_valid:
        kappa = samples.shape[1]
        mj = np.repeat(m[valid], kappa, axis=0)
        ni = nt[samples[valid].ravel()]
        l_s = float(cosine_dissim_rows(mj, ni).mean())
        gm_rows = cosine_dissim_grad(mj, ni) / (n_valid * kappa)
        gm = np.zeros_like(m)
        gm[valid] = gm_rows.reshape(n_valid, kappa, -1).sum(axis=1)
        gM = np.broadcast_to(gm[:, None, :] / w, M.shape).copy()
        gPS, g_pred = mlp_backward(online, in_m, gM, "pred")
        gH_s, g_proj = mlp_backward(online, in_s, gPS, "proj_s")
        gH = gH + gH_s
        grads.update(g_pred)
        grads.update(g_proj)
    else:
        l_s = 0.0
        for name in ("pred", "proj_s"):
            for k, val in online.items():
                if k.startswith(name + "."):
                    grads[k] = np.zeros_like(val)

    grads.update(enc.encode_backward(online, cache, gH))
    return LossResult(l_t, l_s, l_t + l_s, grads, n - n_valid)


def window_losses(net: AgentNetParams, view: WindowView, kappa: int,
                  rng: np.random.Generator) -> LossResult:
    x, graph = window_inputs(net, view)
    samples = sample_temporal_neighbors(view.edges, view.n_nodes, kappa, rng)
    return agent_losses(net.online, net.target, x, graph, samples)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

LOG_FIELDS = ("epoch", "slice", "L_T", "L_S", "L_Agent")


def train_agent(traces: list[AgentTrace], hyper: AgentHyper,
                graphs: list[DynamicGraph] | None = None,
                net: AgentNetParams | None = None) -> tuple[AgentNetParams, list[dict]]:
    """Adam on the online branch, EMA on the target, ``B`` random windows per trace per epoch."""
    hyper.validate()
    if not traces:
        raise ConfigError("need at least one training trace")
    if graphs is None:
        graphs = [build_dynamic_graph(t, hyper.delta) for t in traces]
    if net is None:
        net = init_agent_net(hyper.D, hyper.seed, traces)
    rng = np.random.default_rng([hyper.seed, 1])
    opt = OptimizerState(lr=hyper.lr)
    log: list[dict] = []
    k = 0
    for epoch in range(hyper.epochs):
        for g in graphs:
            if g.n_steps < hyper.w:
                raise ConfigError(f"trace of {g.n_steps} steps is shorter than w={hyper.w}")
            for _ in range(hyper.B):
                tau = int(rng.integers(hyper.w - 1, g.n_steps))
                res = window_losses(net, g.window(tau, hyper.w), hyper.kappa, rng)
                if not np.isfinite(res.total):
                    raise TrainingDivergenceError(
                        f"non-finite agent loss at epoch {epoch}, slice {k}")
                adam_step(opt, net.online, res.grads)
                ema_update(net.target, net.online, hyper.eta)
                log.append({"epoch": epoch, "slice": k, "L_T": res.l_t, "L_S": res.l_s,
                            "L_Agent": res.total})
                k += 1
    return net, log


def mean_loss(net: AgentNetParams, graphs: list[DynamicGraph], taus: list[tuple[int, int]],
              hyper: AgentHyper, seed: int = 0) -> float:
    """Average L_Agent over fixed (graph index, tau) windows, for before/after comparisons."""
    rng = np.random.default_rng(seed)
    vals = [window_losses(net, graphs[g].window(t, hyper.w), hyper.kappa, rng).total
            for g, t in taus]
    return float(np.mean(vals))


def pooled_representations(net: AgentNetParams, view: WindowView) -> np.ndarray:
    """(n, D) temporal mean of each agent's window representation."""
    return ste_agent_forward(net.online, net, view).mean(axis=1)


def write_log(rows: list[dict], path: str | Path, fields: tuple[str, ...] | None = None) -> None:
    """Training log as CSV; columns default to the agent loss log, or the keys of ``rows``."""
    if fields is None:
        fields = tuple(rows[0]) if rows and set(rows[0]) != set(LOG_FIELDS) else LOG_FIELDS
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in fields})


def save_agent_net(net: AgentNetParams, path: str | Path, hyper: AgentHyper | None = None) -> None:
    meta = {"kind": "agent", "D": net.D, "shift": net.shift.tolist(), "scale": net.scale.tolist()}
    if hyper is not None:
        meta["hyper"] = asdict(hyper)
    save_checkpoint(path, {"online": net.online, "target": net.target}, meta)


def load_agent_net(path: str | Path) -> AgentNetParams:
    branches, meta = load_checkpoint(path)
    if meta.get("kind") != "agent":
        raise ConfigError(f"{path} is not an agent checkpoint")
    return AgentNetParams(online=branches["online"], target=branches["target"], D=int(meta["D"]),
                          shift=np.asarray(meta["shift"]), scale=np.asarray(meta["scale"]))
