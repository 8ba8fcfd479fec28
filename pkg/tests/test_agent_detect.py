import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hstcl.agent_detect import (
    agent_dissimilarity,
    communicate,
    limit_neighbors,
    read_scores,
    score_trace,
    write_scores,
)
from hstcl.agent_model import AgentHyper, init_agent_net, train_agent
from hstcl.dyngraph import DynamicGraph, build_dynamic_graph, downsample, neighbor_edges
from hstcl.evalkit import label_offline
from hstcl.pipeline import agent_only_series
from hstcl.simkit import preset, simulate
from hstcl.tensorkit import ConfigError

NONE = (np.zeros(0, np.int64), np.zeros(0, np.int64))


def ring(n):
    src = np.r_[np.arange(n), (np.arange(n) + 1) % n]
    dst = np.r_[(np.arange(n) + 1) % n, np.arange(n)]
    return src, dst


def test_dissimilarity_cases():
    h = np.random.default_rng(0).normal(size=(3, 4))
    assert agent_dissimilarity(h, h) == pytest.approx(0.0, abs=1e-12)
    assert agent_dissimilarity(np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]])) == 1.0
    d = agent_dissimilarity(np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]))
    assert d == pytest.approx((1 - math.sqrt(2) / 2) / 2)
    assert d == pytest.approx(0.1464, abs=1e-4)


def test_communicate_hand_value():
    out = communicate(np.array([0.2, 0.6]), np.array([0.8, 0.0]),
                      (np.array([1]), np.array([0])), 0.05)
    assert out[0] == pytest.approx(0.05 * 0.8 + 0.95 * 0.4)
    assert out[0] == pytest.approx(0.42)


def test_communicate_alpha_one_ignores_neighbours():
    d = np.array([0.1, 0.7, 0.3])
    np.testing.assert_array_equal(communicate(np.array([0.9, 0.0, 0.5]), d, ring(3), 1.0), d)


def test_communicate_alpha_zero_fixed_point():
    s = np.full(6, 0.37)
    np.testing.assert_allclose(communicate(s, np.zeros(6), ring(6), 0.0), s)


def test_communicate_rejects_bad_alpha():
    with pytest.raises(ConfigError):
        communicate(np.zeros(2), np.zeros(2), NONE, 1.5)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 7, elements=st.floats(0, 1)), arrays(np.float64, 7, elements=st.floats(0, 1)),
       st.floats(0, 1))
def test_communicate_preserves_unit_interval(s, d, alpha):
    out = communicate(s, d, ring(7), alpha)
    assert np.all((out >= 0) & (out <= 1))


def test_consensus_on_connected_graph():
    s = np.random.default_rng(1).uniform(size=10)
    edges = ring(10)
    for k in range(10_000):
        s = communicate(s, np.zeros(10), edges, 0.0)
        if s.max() - s.min() < 1e-6:
            break
    assert s.max() - s.min() < 1e-6


def test_neighbor_budget():
    rng = np.random.default_rng(2)
    src = np.arange(1, 9)
    dst = np.zeros(8, dtype=np.int64)
    s2, d2 = limit_neighbors(src, dst, 3, rng)
    assert s2.size == 3 and set(s2) <= set(src)
    s3, _ = limit_neighbors(src, dst, 20, rng)
    assert s3.size == 8


def frozen_graph(n=6, T=30):
    pos = np.random.default_rng(3).uniform(0, 8, size=(n, 2))
    states = np.repeat(np.concatenate([pos, np.zeros((n, 2))], 1)[None], T, axis=0)
    return DynamicGraph(states, 4.0, [neighbor_edges(pos, 4.0)] * T)


def test_trace_of_window_length_scores_zero():
    g = frozen_graph(T=5)
    s = score_trace(init_agent_net(6, 0), g, w=5)
    assert s.shape == (5, 6) and np.all(s == 0)


def test_stationary_trace_scores_stay_zero():
    g = frozen_graph()
    s = score_trace(init_agent_net(6, 0), g, w=4)
    assert np.abs(s).max() < 1e-12


def test_scores_file_round_trip(tmp_path):
    s = np.random.default_rng(4).uniform(size=(7, 3))
    write_scores(s, tmp_path / "s.csv")
    np.testing.assert_array_equal(read_scores(tmp_path / "s.csv"), s)


def test_scores_rise_near_change_points():
    tr = downsample(simulate(preset("flock", n_agents=60, n_steps=6000, seed=5)), 5)
    g = build_dynamic_graph(tr, 5.0)
    net, _ = train_agent([tr], AgentHyper(D=16, epochs=2, B=30), graphs=[g])
    scores = score_trace(net, g, 10)
    series = agent_only_series(scores)
    truth = label_offline(tr.objective, 10)
    spe = tr.steps_per_eval
    band = np.zeros(series.size, dtype=bool)
    for t in truth:
        band[max(t - 2, 0) * spe:(t + 3) * spe] = True
    assert series[band].mean() > series.mean()
