"""Seeded Flock and Pedestrian simulators with scheduled emergent phases.

Both models draw every random number from ``numpy.random.default_rng(seed)``
(PCG64), so a (config, seed) pair always produces the same trace.

Flock: heading-based boids in the spirit of the classic NetLogo model.
During emergent phases each bird separates from a too-close nearest
neighbour, otherwise aligns with and coheres towards flockmates within
``vision``; every turn is capped per step. During normal phases birds
wander with a uniform random turn. Walls reflect.

Pedestrian: two equal populations walking +x and -x. The walking axis wraps,
the lateral axis has walls. During emergent phases a lateral lane force pulls
walkers towards same-direction neighbours and pushes them away from
opposite-direction ones; otherwise they drift laterally at random.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .trace import EMERGENT, NORMAL, AgentTrace


@dataclass
class SimConfig:
    dataset: str = "flock"
    n_agents: int = 150
    world: float = 51.0
    n_steps: int = 10_000
    seed: int = 0
    schedule: list | None = None
    eval_every: int = 50
    # schedule generation
    n_change_points: int = 10
    lead_fraction: float = 0.25
    jitter: float = 0.2
    # flock rules
    speed: float = 1.0
    vision: float = 5.0
    min_sep: float = 0.5
    max_align_turn: float = 20.0
    max_cohere_turn: float = 15.0
    max_separate_turn: float = 5.0
    max_wander_turn: float = 180.0
    # pedestrian rules
    walk_speed: float = 0.5
    lateral_noise: float = 0.8
    lane_radius: float = 3.0
    lane_strength: float = 0.6
    max_lateral: float = 1.0
    lane_fraction: float = 0.75

    def __post_init__(self):
        if self.dataset not in ("flock", "pedestrian"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.n_agents <= 0:
            raise ValueError("n_agents must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown simulator keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def preset(dataset: str, **overrides) -> SimConfig:
    """Published scales: Flock 150 birds on 51x51, Pedestrian 382 walkers on 40x40."""
    if dataset == "flock":
        base = dict(dataset="flock", n_agents=150, world=51.0)
    elif dataset == "pedestrian":
        base = dict(dataset="pedestrian", n_agents=382, world=40.0)
    else:
        raise ValueError(f"unknown dataset {dataset!r}")
    base.update(overrides)
    return SimConfig(**base)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def default_schedule(n_steps: int, rng: np.random.Generator, n_change_points: int = 10,
                     lead_fraction: float = 0.25, jitter: float = 0.2,
                     align: int = 50) -> list[tuple[int, int, str]]:
    """A leading normal stretch, then ``n_change_points`` alternating segments.

    The leading stretch gives the detectors a warm-up; the remaining steps are
    cut into equal segments (emergent first) whose boundaries move by up to
    ``jitter`` of a segment and snap to multiples of ``align``.
    """
    if n_steps == 0:
        return []
    lead = int(round(n_steps * lead_fraction / align)) * align
    body = n_steps - lead
    seg = body / n_change_points
    cuts = [lead]
    for i in range(1, n_change_points):
        b = lead + i * seg + rng.uniform(-jitter, jitter) * seg
        cuts.append(int(round(b / align)) * align)
    cuts.append(n_steps)
    cuts = sorted(set(min(max(c, 0), n_steps) for c in cuts))
    sched = []
    if cuts[0] > 0:
        sched.append((0, cuts[0], NORMAL))
    phase = EMERGENT
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b > a:
            sched.append((a, b, phase))
            phase = NORMAL if phase == EMERGENT else EMERGENT
    return sched


def _phase_mask(schedule, n_steps: int) -> np.ndarray:
    mask = np.zeros(n_steps, dtype=bool)
    for a, b, phase in schedule:
        if phase == EMERGENT:
            mask[a:b] = True
    return mask


def _resolve_schedule(config: SimConfig, rng: np.random.Generator):
    if config.schedule is not None:
        sched = [(int(a), int(b), str(p)) for a, b, p in config.schedule]
        pos = 0
        for a, b, _ in sched:
            if a != pos or b <= a:
                raise ValueError("schedule intervals must be ordered, disjoint and contiguous")
            pos = b
        if pos != config.n_steps:
            raise ValueError("schedule must cover [0, n_steps)")
        return sched
    return default_schedule(config.n_steps, rng, config.n_change_points,
                            config.lead_fraction, config.jitter, config.eval_every)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _turn_towards(theta, target, max_turn):
    return theta + np.clip(_wrap_angle(target - theta), -max_turn, max_turn)


def _reflect(pos, theta, world):
    """Mirror positions and headings off the walls of [0, world]^2."""
    x, y = pos[:, 0], pos[:, 1]
    lo, hi = x < 0, x > world
    x = np.where(lo, -x, np.where(hi, 2 * world - x, x))
    theta = np.where(lo | hi, np.pi - theta, theta)
    lo, hi = y < 0, y > world
    y = np.where(lo, -y, np.where(hi, 2 * world - y, y))
    theta = np.where(lo | hi, -theta, theta)
    pos = np.clip(np.stack([x, y], axis=1), 0.0, world)
    return pos, _wrap_angle(theta)


# ---------------------------------------------------------------------------
# flock
# ---------------------------------------------------------------------------

def _flock_turn(pos, theta, cfg: SimConfig):
    n = pos.shape[0]
    # [i, j] = pos_j - pos_i, one array per axis (reductions over a length-2 axis are slow)
    dx = pos[None, :, 0] - pos[:, None, 0]
    dy = pos[None, :, 1] - pos[:, None, 1]
    d2 = dx * dx + dy * dy
    np.fill_diagonal(d2, np.inf)
    mates = d2 <= cfg.vision ** 2
    has = mates.any(axis=1)
    nearest = np.argmin(d2, axis=1)
    too_close = has & (d2[np.arange(n), nearest] < cfg.min_sep ** 2)

    out = theta.copy()
    sep = too_close
    out[sep] = _turn_towards(theta[sep], theta[nearest[sep]] + np.pi,
                             math.radians(cfg.max_separate_turn))

    flock = has & ~too_close
    if np.any(flock):
        m = mates[flock].astype(np.float64)
        mean_cos = m @ np.cos(theta)
        mean_sin = m @ np.sin(theta)
        align = np.arctan2(mean_sin, mean_cos)
        t = _turn_towards(theta[flock], align, math.radians(cfg.max_align_turn))
        cx = (m * dx[flock]).sum(axis=1)
        cy = (m * dy[flock]).sum(axis=1)
        cohere = np.arctan2(cy, cx)
        ok = cx * cx + cy * cy > 0
        t = np.where(ok, _turn_towards(t, cohere, math.radians(cfg.max_cohere_turn)), t)
        out[flock] = t
    return out


def simulate_flock(config: SimConfig) -> AgentTrace:
    if config.dataset != "flock":
        raise ValueError("simulate_flock needs dataset='flock'")
    rng = np.random.default_rng(config.seed)
    sched = _resolve_schedule(config, rng)
    W = float(config.world)
    n = config.n_agents
    pos = rng.uniform(0.0, W, size=(n, 2))
    theta = rng.uniform(-np.pi, np.pi, size=n)
    emergent = _phase_mask(sched, config.n_steps)
    wander = math.radians(config.max_wander_turn)
    states = np.empty((config.n_steps, n, 4))
    for t in range(config.n_steps):
        vel = config.speed * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        states[t, :, :2] = pos
        states[t, :, 2:] = vel
        if emergent[t]:
            theta = _flock_turn(pos, theta, config)
        else:
            theta = _wrap_angle(theta + rng.uniform(-wander, wander, size=n))
        pos = pos + config.speed * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        pos, theta = _reflect(pos, theta, W)
    trace = AgentTrace(dataset="flock", bounds=(0.0, 0.0, W, W), states=states,
                       schedule=sched, seed=config.seed, eval_every=config.eval_every,
                       n_agents=n)
    trace.objective = objective_measure(trace, config.lane_fraction)
    return trace


# ---------------------------------------------------------------------------
# pedestrian
# ---------------------------------------------------------------------------

def _lane_push(pos, groups, cfg: SimConfig):
    """Lateral velocity from same-direction attraction and opposite-direction repulsion."""
    W = cfg.world
    dx = pos[None, :, 0] - pos[:, None, 0]
    dx = dx - W * np.round(dx / W)  # periodic along the walking axis
    dy = pos[None, :, 1] - pos[:, None, 1]
    near = dx ** 2 + dy ** 2 <= cfg.lane_radius ** 2
    np.fill_diagonal(near, False)
    same = near & (groups[None, :] == groups[:, None])
    opp = near & ~same
    n_same = same.sum(axis=1)
    n_opp = opp.sum(axis=1)
    pull = np.where(n_same > 0, (same * dy).sum(axis=1) / np.maximum(n_same, 1), 0.0)
    # repulsion decays with lateral distance and points away from the other walker
    rep = (opp * np.sign(dy) * np.clip(cfg.lane_radius - np.abs(dy), 0, None)).sum(axis=1)
    rep = np.where(n_opp > 0, rep / np.maximum(n_opp, 1), 0.0)
    return cfg.lane_strength * (pull - rep)


def simulate_pedestrian(config: SimConfig) -> AgentTrace:
    if config.dataset != "pedestrian":
        raise ValueError("simulate_pedestrian needs dataset='pedestrian'")
    rng = np.random.default_rng(config.seed)
    sched = _resolve_schedule(config, rng)
    W = float(config.world)
    n = config.n_agents
    groups = np.where(np.arange(n) % 2 == 0, 1, -1)
    pos = rng.uniform(0.0, W, size=(n, 2))
    emergent = _phase_mask(sched, config.n_steps)
    states = np.empty((config.n_steps, n, 4))
    for t in range(config.n_steps):
        noise = rng.normal(0.0, config.lateral_noise, size=n)
        if emergent[t]:
            vy = _lane_push(pos, groups, config) + 0.2 * noise
        else:
            vy = noise
        vy = np.clip(vy, -config.max_lateral, config.max_lateral)
        vx = groups * config.walk_speed
        states[t, :, :2] = pos
        states[t, :, 2] = vx
        states[t, :, 3] = vy
        x = (pos[:, 0] + vx) % W
        y = pos[:, 1] + vy
        y = np.where(y < 0, -y, np.where(y > W, 2 * W - y, y))
        pos = np.stack([x, np.clip(y, 0.0, W)], axis=1)
    trace = AgentTrace(dataset="pedestrian", bounds=(0.0, 0.0, W, W), states=states,
                       schedule=sched, seed=config.seed, eval_every=config.eval_every,
                       groups=groups, n_agents=n)
    trace.objective = objective_measure(trace, config.lane_fraction)
    return trace


def simulate(config: SimConfig) -> AgentTrace:
    if config.dataset == "flock":
        return simulate_flock(config)
    return simulate_pedestrian(config)


# ---------------------------------------------------------------------------
# objective measures
# ---------------------------------------------------------------------------

def empty_patches(positions: np.ndarray, world: int) -> int:
    """Unit patches of a ``world x world`` grid holding no agent."""
    cells = np.clip(np.floor(positions).astype(np.int64), 0, world - 1)
    occupied = np.unique(cells[:, 0] * world + cells[:, 1]).size
    return world * world - occupied


def lane_count(positions: np.ndarray, groups: np.ndarray, world: int,
               fraction: float = 0.75) -> int:
    """Unit-height bands where at least ``fraction`` of the occupants share a direction."""
    band = np.clip(np.floor(positions[:, 1]).astype(np.int64), 0, world - 1)
    plus = np.bincount(band[groups > 0], minlength=world)
    minus = np.bincount(band[groups <= 0], minlength=world)
    total = plus + minus
    dominant = np.maximum(plus, minus)
    return int(((total > 0) & (dominant >= fraction * total)).sum())


def objective_measure(trace: AgentTrace, lane_fraction: float = 0.75) -> np.ndarray:
    """One value per ``eval_every`` raw steps, sampled at raw steps 0, 50, 100, ..."""
    world = int(round(trace.bounds[2] - trace.bounds[0]))
    idx = [i for i in range(trace.n_steps) if (i * trace.stride) % trace.eval_every == 0]
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        pos = trace.states[i, :, :2] - np.asarray(trace.bounds[:2])
        if trace.dataset == "flock":
            out[k] = empty_patches(pos, world)
        else:
            out[k] = lane_count(pos, np.asarray(trace.groups), world, lane_fraction)
    return out


def phase_means(trace: AgentTrace) -> tuple[float, float]:
    """Mean objective over emergent and over normal evaluation steps."""
    obj = trace.objective
    e_step = trace.eval_every // trace.stride
    labels = np.array([trace.phase_at(k * e_step) == EMERGENT for k in range(obj.size)])
    return float(obj[labels].mean()), float(obj[~labels].mean())


__all__ = [
    "SimConfig", "default_schedule", "empty_patches", "lane_count",
    "objective_measure", "phase_means", "preset", "simulate", "simulate_flock",
    "simulate_pedestrian",
]
