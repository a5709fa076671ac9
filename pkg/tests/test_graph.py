import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matrpo.graph import CommGraph, GraphError, build_ring, from_edges, isolated, sample_edge


def test_ring_of_three():
    g = build_ring(3)
    assert set(g.edges) == {(0, 1), (1, 2), (0, 2)}
    assert g.n_edges == 3
    np.testing.assert_allclose(g.psi, [1 / 3] * 3)
    assert all(g.weights[e].sum() == 0 for e in range(3))
    for e, (i, j) in enumerate(g.edges):
        assert g.weight(e, i) == 1.0 and g.weight(e, j) == -1.0
    assert [len(inc) for inc in g.incident] == [2, 2, 2]


def test_ring_of_two_and_errors():
    g = build_ring(2)
    assert g.edges == ((0, 1),)
    assert [len(inc) for inc in g.incident] == [1, 1]
    with pytest.raises(GraphError):
        build_ring(1)
    with pytest.raises(GraphError):
        g.weight(0, 5)


def test_validation():
    with pytest.raises(GraphError):
        from_edges(4, [(0, 1), (2, 3)])  # disconnected
    with pytest.raises(GraphError):
        CommGraph(2, ((0, 1),), np.array([[1.0, 1.0]]), np.array([1.0]))  # weights do not cancel
    with pytest.raises(GraphError):
        CommGraph(2, ((0, 1),), np.array([[1.0, -1.0]]), np.array([0.5]))  # psi does not sum to one
    with pytest.raises(GraphError):
        from_edges(3, [(0, 1), (1, 1)])
    with pytest.raises(GraphError):
        from_edges(3, [(0, 1), (1, 2), (2, 1)])
    with pytest.raises(GraphError):
        from_edges(3, [(0, 1), (1, 2)], psi=[1.0, 0.0])
    with pytest.raises(GraphError):
        isolated(2)


def test_custom_psi_normalised():
    g = from_edges(3, [(0, 1), (1, 2)], psi=[3.0, 1.0])
    np.testing.assert_allclose(g.psi, [0.75, 0.25])


def test_uniform_sampling_frequencies():
    g = build_ring(3)
    rng = np.random.default_rng(0)
    draws = np.array([sample_edge(g, rng) for _ in range(100_000)])
    freq = np.bincount(draws, minlength=3) / draws.size
    assert np.all(np.abs(freq - 1 / 3) < 0.01)


def test_near_degenerate_psi():
    eps = 1e-9
    g = from_edges(3, [(0, 1), (1, 2), (0, 2)], psi=[1 - 2 * eps, eps, eps])
    rng = np.random.default_rng(1)
    assert all(sample_edge(g, rng) == 0 for _ in range(1000))


def test_schedule_deterministic():
    g = build_ring(5)
    a = [sample_edge(g, np.random.default_rng(7)) for _ in range(1)]
    seq = lambda: [sample_edge(g, r) for r in [np.random.default_rng(7)] for _ in range(200)]
    assert seq() == seq()
    assert a[0] == seq()[0]


def test_edgeless_graph_cannot_sample():
    with pytest.raises(GraphError):
        sample_edge(isolated(1), np.random.default_rng(0))


@settings(max_examples=30, deadline=None, derandomize=True)
@given(n=st.integers(2, 12), seed=st.integers(0, 2 ** 32 - 1))
def test_ring_activation_within_binomial_bounds(n, seed):
    g = build_ring(n)
    assert np.allclose(g.weights.sum(axis=1), 0)
    rng = np.random.default_rng(seed)
    K = 3000
    counts = np.bincount([sample_edge(g, rng) for _ in range(K)], minlength=g.n_edges)
    p = 1 / g.n_edges
    sigma = np.sqrt(K * p * (1 - p))
    assert np.all(np.abs(counts - K * p) <= 3 * sigma)
