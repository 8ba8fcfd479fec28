import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hstcl.dyngraph import (
    assign_region,
    build_dynamic_graph,
    build_neighborhoods,
    build_region_grid,
    downsample,
    neighbor_pairs,
)
from hstcl.simkit import preset, simulate
from hstcl.trace import AgentTrace


def brute_force(pos, delta):
    n = len(pos)
    d2 = ((pos[:, None] - pos[None]) ** 2).sum(-1)
    return [np.array([i for i in range(n) if i != j and d2[i, j] <= delta * delta]) for j in range(n)]


def test_three_agents_on_a_line():
    nb = build_neighborhoods(np.array([[0.0, 0.0], [3.0, 0.0], [7.0, 0.0]]), 5.0)
    assert [list(x) for x in nb] == [[1], [0, 2], [1]]


def test_distance_exactly_delta_is_inclusive():
    nb = build_neighborhoods(np.array([[0.0, 0.0], [3.0, 4.0]]), 5.0)
    assert list(nb[0]) == [1] and list(nb[1]) == [0]
    nb = build_neighborhoods(np.array([[0.0, 0.0], [3.0, 4.0 + 1e-9]]), 5.0)
    assert list(nb[0]) == [] and list(nb[1]) == []


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 40), st.just(2)), elements=st.floats(0, 30)),
       st.floats(0.5, 8))
def test_hash_matches_brute_force(pos, delta):
    got = build_neighborhoods(pos, delta)
    want = brute_force(pos, delta)
    assert len(got) == len(want)
    for g, w in zip(got, want):
        np.testing.assert_array_equal(g, w)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.just(2)), elements=st.floats(-20, 20)))
def test_neighborhoods_symmetric_and_irreflexive(pos):
    nb = build_neighborhoods(pos, 4.0)
    for j, lst in enumerate(nb):
        assert j not in lst
        for i in lst:
            assert j in nb[i]


def test_pairs_are_ordered():
    rng = np.random.default_rng(0)
    i, j = neighbor_pairs(rng.uniform(0, 10, size=(50, 2)), 2.0)
    assert np.all(i < j)


def tiny_trace(T=10, n=3):
    states = np.arange(T * n * 4, dtype=float).reshape(T, n, 4) % 7
    return AgentTrace("flock", (0, 0, 10, 10), states, [(0, 7, "normal"), (7, T, "emergent")], 1,
                      objective=np.zeros(1))


def test_downsample_identity_and_steps():
    tr = tiny_trace()
    assert downsample(tr, 1) is tr
    ds = downsample(tr, 5)
    assert ds.n_steps == 2
    np.testing.assert_array_equal(ds.states, tr.states[[0, 5]])
    assert ds.stride == 5


def test_downsample_schedule_uses_ceiling():
    ds = downsample(tiny_trace(), 5)
    assert ds.schedule == [(0, 2, "normal")]  # boundary 7 -> 2, so the emergent tail [2, 2) vanishes
    tr = tiny_trace(T=20)
    assert downsample(tr, 5).schedule == [(0, 2, "normal"), (2, 4, "emergent")]


def test_window_view_bounds():
    tr = simulate(preset("flock", n_agents=10, n_steps=30, seed=0))
    g = build_dynamic_graph(tr, 5.0)
    v = g.window(9, 10)
    assert v.states.shape == (10, 10, 4) and len(v.edges) == 10 and v.start == 0
    with pytest.raises(IndexError):
        g.window(8, 10)
    with pytest.raises(IndexError):
        g.window(30, 10)


def test_region_grid_counts():
    assert build_region_grid((0, 0, 1, 1), 1).edges()[0].size == 0
    g2 = build_region_grid((0, 0, 2, 2), 2)
    assert g2.n_regions == 4 and len(g2.adjacency_pairs()) == 4
    assert build_region_grid((0, 0, 51, 51), 20).n_regions == 400


def test_region_adjacency_symmetric():
    g = build_region_grid((0, 0, 10, 10), 4)
    src, dst = g.edges()
    pairs = set(zip(src.tolist(), dst.tolist()))
    assert all((b, a) in pairs for a, b in pairs)
    assert g.neighbors(0) == [1, 4]
    assert g.neighbors(5) == [1, 4, 6, 9]


def test_assign_region_corners_and_boundaries():
    g = build_region_grid((0, 0, 10, 10), 5)
    assert assign_region((0.0, 0.0), g) == 0
    assert assign_region((10.0, 10.0), g) == 24
    assert assign_region((2.0, 0.0), g) == 1  # interior boundary goes to the higher cell
    assert assign_region((0.0, 4.0), g) == 10
    with pytest.raises(RuntimeError):
        assign_region((10.5, 1.0), g)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 60), st.just(2)), elements=st.floats(0, 51)),
       st.integers(1, 25))
def test_assignment_is_total(pos, n):
    g = build_region_grid((0, 0, 51, 51), n)
    r = g.assign(pos)
    assert np.all((r >= 0) & (r < n * n))
    assert np.bincount(r, minlength=n * n).sum() == len(pos)


def test_flock_edges_are_dynamic():
    tr = downsample(simulate(preset("flock", n_steps=2000, seed=0)), 5)
    counts = build_dynamic_graph(tr, 5.0).edge_counts()
    assert np.unique(counts[:: tr.steps_per_eval]).size > 1
