"""Minimal float64 numeric kernel used by both encoder levels.

Parameters live in flat ``dict[str, ndarray]`` mappings keyed by dotted layer
names (``"emb.W"``, ``"proj_t.0.b"``, ...). Every differentiable piece has an
explicit forward and a hand-written backward; ``grad_check`` is the referee.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

Params = dict[str, np.ndarray]

CHECKPOINT_VERSION = "1"


class InputShapeError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class DegenerateInputError(ValueError):
    """Raised for zero-norm vectors handed to the cosine dissimilarity."""


class TrainingDivergenceError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dense layers and MLPs
# ---------------------------------------------------------------------------

def init_dense(rng: np.random.Generator, in_dim: int, out_dim: int, prefix: str,
               bias: bool = True) -> Params:
    """Uniform(-1/sqrt(in), 1/sqrt(in)) init for weight and bias."""
    bound = 1.0 / math.sqrt(in_dim)
    p = {f"{prefix}.W": rng.uniform(-bound, bound, size=(out_dim, in_dim))}
    if bias:
        p[f"{prefix}.b"] = rng.uniform(-bound, bound, size=(out_dim,))
    return p


def layer(params: Params, prefix: str) -> tuple[np.ndarray, np.ndarray | None]:
    return params[f"{prefix}.W"], params.get(f"{prefix}.b")


def dense_forward(params: Params, x: np.ndarray, prefix: str = "") -> np.ndarray:
    """y = W x + b over the last axis of ``x``.

    ``params`` is either a flat parameter dict plus ``prefix`` or a bare
    ``{"W": ..., "b": ...}`` mapping (``prefix=""``).
    """
    if prefix:
        W, b = layer(params, prefix)
    else:
        W, b = params["W"], params.get("b")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[1]:
        raise InputShapeError(
            f"input last dim {x.shape[-1]} does not match layer in_dim {W.shape[1]}")
    # one flat GEMM is much faster than numpy's batched matmul over leading axes
    y = (x.reshape(-1, x.shape[-1]) @ W.T).reshape(*x.shape[:-1], W.shape[0])
    if b is not None:
        y += b  # in place: fresh multi-MB temporaries cost more than the GEMM
    return y


def dense_backward(params: Params, x: np.ndarray, grad_out: np.ndarray,
                   prefix: str = "") -> tuple[np.ndarray, Params]:
    """Returns (dL/dx, {name: dL/dparam}) for y = W x + b."""
    if prefix:
        W, b = layer(params, prefix)
        wname, bname = f"{prefix}.W", f"{prefix}.b"
    else:
        W, b = params["W"], params.get("b")
        wname, bname = "W", "b"
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grads = {wname: g2.T @ x2}
    if b is not None:
        grads[bname] = g2.sum(axis=0)
    return (g2 @ W).reshape(*grad_out.shape[:-1], W.shape[1]), grads


def init_mlp(rng: np.random.Generator, dims: list[int], prefix: str) -> Params:
    p: Params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        p.update(init_dense(rng, a, b, f"{prefix}.{i}"))
    return p


def mlp_depth(params: Params, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    return n


def mlp_forward(params: Params, x: np.ndarray, prefix: str):
    """Dense layers with tanh between them (none after the last one).

    Returns the output and the list of layer inputs needed by the backward pass.
    """
    depth = mlp_depth(params, prefix)
    inputs = []
    h = x
    for i in range(depth):
        inputs.append(h)
        h = dense_forward(params, h, f"{prefix}.{i}")
        if i < depth - 1:
            np.tanh(h, out=h)
    return h, inputs


def mlp_backward(params: Params, inputs: list[np.ndarray], grad_out: np.ndarray,
                 prefix: str) -> tuple[np.ndarray, Params]:
    grads: Params = {}
    g = grad_out
    depth = len(inputs)
    for i in reversed(range(depth)):
        g, gi = dense_backward(params, inputs[i], g, f"{prefix}.{i}")
        grads.update(gi)
        if i > 0:
            # inputs[i] = tanh(pre-activation of layer i-1)
            g = g * (1.0 - inputs[i] ** 2)
    return g, grads


# ---------------------------------------------------------------------------
# softmax and cosine dissimilarity
# ---------------------------------------------------------------------------

def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0 or scores.shape[axis] == 0:
        raise EmptyInputError("softmax of an empty set")
    e = scores - scores.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def softmax_backward(probs: np.ndarray, grad_out: np.ndarray, axis: int = -1) -> np.ndarray:
    return probs * (grad_out - (grad_out * probs).sum(axis=axis, keepdims=True))


def _norms(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1)
    if np.any(n == 0.0):
        raise DegenerateInputError("cosine dissimilarity of a zero-norm vector")
    return n


def cosine_dissim(u: np.ndarray, v: np.ndarray) -> float:
    """(1 - cos(u, v)) / 2, a value in [0, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise InputShapeError(f"shape mismatch {u.shape} vs {v.shape}")
    return float(cosine_dissim_rows(u, v))


def cosine_dissim_rows(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise dissimilarity over the last axis, broadcasting the leading ones."""
    nu = _norms(u)
    nv = _norms(v)
    cos = (u * v).sum(axis=-1) / (nu * nv)
    return np.clip(0.5 * (1.0 - cos), 0.0, 1.0)


def cosine_dissim_grad(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """d/du of (1 - cos(u, v)) / 2, row-wise; ``v`` is treated as a constant."""
    nu = _norms(u)[..., None]
    nv = _norms(v)[..., None]
    dot = (u * v).sum(axis=-1, keepdims=True)
    return -0.5 * (v / (nu * nv) - dot * u / (nu ** 3 * nv))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(state: OptimizerState, params: Params, grads: Params) -> tuple[Params, OptimizerState]:
    """Bias-corrected Adam update; mutates and returns ``params`` and ``state``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {k!r}")
        if g.shape != params[k].shape:
            raise InputShapeError(f"gradient shape {g.shape} != param shape {params[k].shape} for {k!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        params[k] = params[k] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def ema_update(target: Params, online: Params, eta: float) -> Params:
    """target <- eta * target + (1 - eta) * online, in place."""
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"EMA decay must lie in [0, 1], got {eta}")
    if eta == 1.0:
        return target
    for k, w in online.items():
        if target[k].shape != w.shape:
            raise InputShapeError(f"EMA shape mismatch for {k!r}")
        target[k] = eta * target[k] + (1.0 - eta) * w
    return target


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


# ---------------------------------------------------------------------------
# finite-difference referee
# ---------------------------------------------------------------------------

def grad_check(loss_fn: Callable[[Params], tuple[float, Params]], params: Params,
               step: float = 1e-5, floor: float = 1e-6, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Worst per-coordinate relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` and be deterministic.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords``
    a random subset of coordinates per tensor is checked.
    """
    _, analytic = loss_fn(params)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        a_flat = analytic.get(name, np.zeros_like(p)).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = loss_fn(params)
            flat[i] = orig - step
            lm, _ = loss_fn(params)
            flat[i] = orig
            num = (lp - lm) / (2.0 * step)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, branches: dict[str, Params], metadata: dict) -> None:
    """Writes ``{layer: {shape, values}}`` for every branch plus a metadata block."""
    layers = {}
    for branch, params in branches.items():
        for name in sorted(params):
            arr = params[name]
            layers[f"{branch}/{name}"] = {"shape": list(arr.shape),
                                          "values": arr.reshape(-1).tolist()}
    doc = {"metadata": {**metadata, "module_version": CHECKPOINT_VERSION}, "layers": layers}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Params], dict]:
    doc = json.loads(Path(path).read_text())
    branches: dict[str, Params] = {}
    for key, entry in doc["layers"].items():
        branch, name = key.split("/", 1)
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        branches.setdefault(branch, {})[name] = arr
    return branches, doc["metadata"]
