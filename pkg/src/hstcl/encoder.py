"""Spatio-temporal encoder shared by the agent and region levels.

A spatial attention layer runs independently at every time step of a window,
then a single-head temporal attention layer mixes each node's steps::

    e = tanh(Emb(x))
    z_j = e_j + sum_i alpha_ij f_V(e_i - e_j),  alpha_j = softmax_i(f_Q(e_j) . f_K(e_i) / sqrt(D))
    h = softmax(q k^T / sqrt(D)) v,             q, k, v linear in z

Windows are flattened time-major: node ``t * n + j`` is node ``j`` at step ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .tensorkit import (
    Params,
    dense_backward,
    dense_forward,
    init_dense,
    softmax,
    softmax_backward,
)


class CacheInvalidError(RuntimeError):
    pass


ENCODER_LAYERS = ("emb", "fq", "fk", "fv", "tq", "tk", "tv")


def init_encoder(rng: np.random.Generator, in_dim: int, D: int) -> Params:
    p = init_dense(rng, in_dim, D, "emb")
    for name in ENCODER_LAYERS[1:]:
        p.update(init_dense(rng, D, D, name))
    return p


@dataclass
class EdgeIndex:
    """Directed edges ``src -> dst`` (``src`` is a neighbour of ``dst``), sorted by dst."""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64)
        dst = np.asarray(self.dst, dtype=np.int64)
        order = np.lexsort((src, dst))
        self.src, self.dst = src[order], dst[order]
        E = self.src.size
        ones = np.ones(E)
        cols = np.arange(E)
        self.to_dst = sp.csr_matrix((ones, (self.dst, cols)), shape=(self.n_nodes, E))
        self.to_src = sp.csr_matrix((ones, (self.src, cols)), shape=(self.n_nodes, E))
        if E:
            starts = np.flatnonzero(np.r_[True, self.dst[1:] != self.dst[:-1]])
        else:
            starts = np.zeros(0, dtype=np.int64)
        self.seg_starts = starts
        self.seg_nodes = self.dst[starts]

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_nodes)

    @classmethod
    def stack(cls, per_step: list[tuple[np.ndarray, np.ndarray]], n: int) -> "EdgeIndex":
        """Flattens per-step edge lists over ``n`` nodes into one time-major index."""
        srcs, dsts = [], []
        for t, (s, d) in enumerate(per_step):
            srcs.append(np.asarray(s, dtype=np.int64) + t * n)
            dsts.append(np.asarray(d, dtype=np.int64) + t * n)
        src = np.concatenate(srcs) if srcs else np.zeros(0, dtype=np.int64)
        dst = np.concatenate(dsts) if dsts else np.zeros(0, dtype=np.int64)
        return cls(len(per_step) * n, src, dst)


@dataclass
class DenseGraph:
    """Per-step adjacency masks (B, n, n); ``mask[b, j, i]`` means ``i`` is a neighbour of ``j``.

    Cheaper than :class:`EdgeIndex` when neighbourhoods are a sizeable fraction of ``n``.
    """

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.has = self.mask.any(axis=2)

    @property
    def n_nodes(self) -> int:
        return self.mask.shape[1]

    @classmethod
    def from_edges(cls, per_step: list[tuple[np.ndarray, np.ndarray]], n: int) -> "DenseGraph":
        mask = np.zeros((len(per_step), n, n), dtype=bool)
        for t, (s, d) in enumerate(per_step):
            mask[t, np.asarray(d, dtype=np.int64), np.asarray(s, dtype=np.int64)] = True
        return cls(mask)


def segment_softmax(scores: np.ndarray, graph: EdgeIndex) -> np.ndarray:
    if scores.size == 0:
        return scores.copy()
    seg_max = np.maximum.reduceat(scores, graph.seg_starts)
    node_max = np.zeros(graph.n_nodes)
    node_max[graph.seg_nodes] = seg_max
    ex = np.exp(scores - node_max[graph.dst])
    denom = graph.to_dst @ ex
    return ex / denom[graph.dst]


# ---------------------------------------------------------------------------
# spatial attention
# ---------------------------------------------------------------------------

def spatial_forward(params: Params, x: np.ndarray, graph):
    """Returns z and a cache for :func:`spatial_backward`.

    ``x`` is (n_nodes, in_dim) for an :class:`EdgeIndex` and (B, n, in_dim)
    for a :class:`DenseGraph`; z has the same leading shape.
    """
    if isinstance(graph, DenseGraph):
        return _dense_spatial_forward(params, x, graph)
    e = np.tanh(dense_forward(params, x, "emb"))
    D = e.shape[-1]
    Q = dense_forward(params, e, "fq")
    K = dense_forward(params, e, "fk")
    Wv = params["fv.W"]
    bv = params["fv.b"]
    z = e.copy()
    cache = {"x": x, "e": e, "Q": Q, "K": K, "graph": graph}
    if graph.n_edges:
        src, dst = graph.src, graph.dst
        scores = (Q[dst] * K[src]).sum(axis=1) / math.sqrt(D)
        alpha = segment_softmax(scores, graph)
        # f_V is affine, so f_V(e_i - e_j) = e_i Wv^T - e_j Wv^T + b: one matmul per node
        ev = e @ Wv.T
        val = ev[src] - ev[dst] + bv
        z = z + graph.to_dst @ (alpha[:, None] * val)
        cache.update(alpha=alpha, val=val)
    return z, cache


def spatial_backward(params: Params, cache: dict, gz: np.ndarray) -> Params:
    graph = cache["graph"]
    if isinstance(graph, DenseGraph):
        return _dense_spatial_backward(params, cache, gz)
    e, Q, K = cache["e"], cache["Q"], cache["K"]
    D = e.shape[-1]
    ge = gz.copy()
    grads: Params = {}
    if graph.n_edges:
        src, dst = graph.src, graph.dst
        alpha, val = cache["alpha"], cache["val"]
        g_at_dst = gz[dst]
        g_alpha = (g_at_dst * val).sum(axis=1)
        g_val = alpha[:, None] * g_at_dst
        g_node = graph.to_src @ g_val - graph.to_dst @ g_val
        grads["fv.W"] = g_node.T @ e
        grads["fv.b"] = g_val.sum(axis=0)
        ge += g_node @ params["fv.W"]
        seg_sum = graph.to_dst @ (alpha * g_alpha)
        g_scores = alpha * (g_alpha - seg_sum[dst]) / math.sqrt(D)
        gQ = graph.to_dst @ (g_scores[:, None] * K[src])
        gK = graph.to_src @ (g_scores[:, None] * Q[dst])
    else:
        gQ = np.zeros_like(Q)
        gK = np.zeros_like(K)
        grads["fv.W"] = np.zeros_like(params["fv.W"])
        grads["fv.b"] = np.zeros_like(params["fv.b"])
    g, gq = dense_backward(params, e, gQ, "fq")
    ge += g
    grads.update(gq)
    g, gk = dense_backward(params, e, gK, "fk")
    ge += g
    grads.update(gk)
    ga = ge * (1.0 - e ** 2)
    _, gemb = dense_backward(params, cache["x"], ga, "emb")
    grads.update(gemb)
    return grads


def _dense_spatial_forward(params: Params, x: np.ndarray, graph: DenseGraph):
    e = np.tanh(dense_forward(params, x, "emb"))
    D = e.shape[-1]
    Q = dense_forward(params, e, "fq")
    K = dense_forward(params, e, "fk")
    ev = e @ params["fv.W"].T
    S = Q @ np.swapaxes(K, -1, -2) / math.sqrt(D)
    S = np.where(graph.mask, S, -np.inf)
    row_max = np.where(graph.has, S.max(axis=-1), 0.0)
    ex = np.where(graph.mask, np.exp(S - row_max[..., None]), 0.0)
    denom = ex.sum(axis=-1, keepdims=True)
    P = ex / np.where(denom > 0, denom, 1.0)
    r = graph.has[..., None].astype(np.float64)
    z = e + P @ ev + r * (params["fv.b"] - ev)
    return z, {"x": x, "e": e, "Q": Q, "K": K, "ev": ev, "P": P, "r": r, "graph": graph}


def _dense_spatial_backward(params: Params, cache: dict, gz: np.ndarray) -> Params:
    e, Q, K, ev, P, r = (cache[k] for k in ("e", "Q", "K", "ev", "P", "r"))
    D = e.shape[-1]
    grads: Params = {}
    g_ev = np.swapaxes(P, -1, -2) @ gz - r * gz
    grads["fv.W"] = g_ev.reshape(-1, D).T @ e.reshape(-1, D)
    grads["fv.b"] = (r * gz).reshape(-1, D).sum(axis=0)
    # the -ev_j + b part of each value is constant across i and drops out of the softmax
    gP = gz @ np.swapaxes(ev, -1, -2)
    gS = P * (gP - (P * gP).sum(axis=-1, keepdims=True)) / math.sqrt(D)
    gQ = gS @ K
    gK = np.swapaxes(gS, -1, -2) @ Q
    ge = gz + g_ev @ params["fv.W"]
    g, gq = dense_backward(params, e, gQ, "fq")
    ge = ge + g
    grads.update(gq)
    g, gk = dense_backward(params, e, gK, "fk")
    ge = ge + g
    grads.update(gk)
    _, gemb = dense_backward(params, cache["x"], ge * (1.0 - e ** 2), "emb")
    grads.update(gemb)
    return grads


# ---------------------------------------------------------------------------
# temporal attention
# ---------------------------------------------------------------------------

def temporal_forward(params: Params, Z: np.ndarray):
    """Full (non-causal) attention over the window axis of ``Z`` (n, w, D)."""
    D = Z.shape[-1]
    q = dense_forward(params, Z, "tq")
    k = dense_forward(params, Z, "tk")
    v = dense_forward(params, Z, "tv")
    A = q @ np.swapaxes(k, -1, -2) / math.sqrt(D)
    P = softmax(A, axis=-1)
    H = P @ v
    return H, {"Z": Z, "q": q, "k": k, "v": v, "P": P}


def temporal_backward(params: Params, cache: dict, gH: np.ndarray) -> tuple[np.ndarray, Params]:
    Z, q, k, v, P = cache["Z"], cache["q"], cache["k"], cache["v"], cache["P"]
    D = Z.shape[-1]
    gP = gH @ np.swapaxes(v, -1, -2)
    gv = np.swapaxes(P, -1, -2) @ gH
    gA = softmax_backward(P, gP) / math.sqrt(D)
    gq = gA @ k
    gk = np.swapaxes(gA, -1, -2) @ q
    grads: Params = {}
    gZ = np.zeros_like(Z)
    for name, g in (("tq", gq), ("tk", gk), ("tv", gv)):
        gz, gp = dense_backward(params, Z, g, name)
        gZ += gz
        grads.update(gp)
    return gZ, grads


# ---------------------------------------------------------------------------
# full window
# ---------------------------------------------------------------------------

def _spatial_window(params: Params, x: np.ndarray, graph):
    w, n, _ = x.shape
    if isinstance(graph, DenseGraph):
        z, scache = spatial_forward(params, x, graph)
    else:
        z, scache = spatial_forward(params, x.reshape(w * n, -1), graph)
    return z.reshape(w, n, -1).transpose(1, 0, 2), scache


def encode_window(params: Params, x: np.ndarray, graph):
    """Encodes a window ``x`` of shape (w, n, in_dim); returns H (n, w, D) and a cache.

    ``graph`` is a time-major :class:`EdgeIndex` over ``w * n`` nodes or a
    :class:`DenseGraph` with one mask per step.
    """
    w, n, _ = x.shape
    Z, scache = _spatial_window(params, x, graph)
    H, tcache = temporal_forward(params, Z)
    return H, {"spatial": scache, "temporal": tcache, "w": w, "n": n}


def encode_backward(params: Params, cache: dict, gH: np.ndarray) -> Params:
    gZ, grads = temporal_backward(params, cache["temporal"], gH)
    w, n = cache["w"], cache["n"]
    gz = gZ.transpose(1, 0, 2)
    if not isinstance(cache["spatial"]["graph"], DenseGraph):
        gz = gz.reshape(w * n, -1)
    grads.update(spatial_backward(params, cache["spatial"], gz))
    return grads


# ---------------------------------------------------------------------------
# incremental window update
# ---------------------------------------------------------------------------

@dataclass
class WindowCache:
    """Per-node temporal state for the window ending at ``tau``, kept as a ring.

    Step ``t`` lives in slot ``t % w``. ``W`` holds the unnormalised temporal
    scores ``q k^T`` (no 1/sqrt(D)) between slots. Attention has no positional
    terms, so slot order only matters when the output is put back in time order.
    """

    tau: int
    q: np.ndarray  # (n, w, D)
    k: np.ndarray
    v: np.ndarray
    W: np.ndarray  # (n, w, w)

    @property
    def w(self) -> int:
        return self.q.shape[1]


def _attend_from_cache(cache: WindowCache) -> np.ndarray:
    D = cache.q.shape[-1]
    P = softmax(cache.W / math.sqrt(D), axis=-1)
    H = P @ cache.v
    # oldest step sits in the slot after tau's
    return np.roll(H, -((cache.tau + 1) % cache.w), axis=1)


def init_cache(params: Params, x: np.ndarray, graph, tau: int):
    """Builds a cache from scratch for the window (w, n, in_dim) ending at ``tau``."""
    Z, _ = _spatial_window(params, x, graph)
    w = Z.shape[1]
    shift = (tau + 1) % w
    q, k, v = (np.roll(dense_forward(params, Z, name), shift, axis=1) for name in ("tq", "tk", "tv"))
    cache = WindowCache(tau=tau, q=q, k=k, v=v, W=q @ np.swapaxes(k, -1, -2))
    return _attend_from_cache(cache), cache


def incremental_advance(params: Params, cache: WindowCache, x_new: np.ndarray,
                        graph_new, tau_new: int):
    """Slides the window by one step, computing only the new spatial row and score row/column.

    ``x_new`` is (n, in_dim) for step ``tau_new``; ``graph_new`` its edges (an
    :class:`EdgeIndex` over ``n`` nodes or a one-step :class:`DenseGraph`).
    Returns ``(H, cache)`` for the window ending at ``tau_new``. The cache is
    updated in place, so the one passed in no longer describes the old window.
    """
    if tau_new != cache.tau + 1:
        raise CacheInvalidError(f"cache ends at {cache.tau}, cannot advance to {tau_new}")
    if isinstance(graph_new, DenseGraph):
        z_new = spatial_forward(params, x_new[None], graph_new)[0][0]
    else:
        z_new, _ = spatial_forward(params, x_new, graph_new)
    s = tau_new % cache.w
    cache.q[:, s] = q_new = dense_forward(params, z_new, "tq")
    cache.k[:, s] = k_new = dense_forward(params, z_new, "tk")
    cache.v[:, s] = dense_forward(params, z_new, "tv")
    cache.W[:, s, :] = np.einsum("nd,nid->ni", q_new, cache.k)
    cache.W[:, :, s] = np.einsum("nid,nd->ni", cache.q, k_new)
    cache.tau = tau_new
    return _attend_from_cache(cache), cache
