import warnings

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from cead.errors import ValidationError
from cead.ncut import DENSE_LIMIT, fiedler_vector, ncut_cost, parcellate, spectral_bipartition
from cead.simgraph import SimilarityGraph, build_graph
from cead.volume import VolumeSeries

from oracles import dense_ncut, exhaustive_ncut, flood_fill_components, random_connected_graph


def _two_blocks(n1=5, n2=6, inner=1.0, bridge=0.01):
    n = n1 + n2
    W = np.zeros((n, n))
    W[:n1, :n1] = inner
    W[n1:, n1:] = inner
    W[n1 - 1, n1] = W[n1, n1 - 1] = bridge
    np.fill_diagonal(W, 0)
    return W


def test_two_blocks_split_at_bridge():
    W = _two_blocks()
    res = spectral_bipartition(SimilarityGraph.from_weights(W))
    side = res.side if res.side[0] else ~res.side
    assert side[:5].all() and not side[5:].any()
    assert res.ncut_cost == pytest.approx(exhaustive_ncut(W)[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_cost_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    W = random_connected_graph(rng, 3, 9)
    g = SimilarityGraph.from_weights(W)
    side = rng.random(g.n) < 0.5
    side[0], side[-1] = True, False
    assert ncut_cost(g, side) == pytest.approx(dense_ncut(W, side), rel=1e-12)
    assert ncut_cost(g, side) == pytest.approx(ncut_cost(g, ~side), rel=1e-12)


def test_ncut_cost_rejects_trivial_split():
    g = SimilarityGraph.from_weights(_two_blocks())
    with pytest.raises(ValidationError):
        ncut_cost(g, np.ones(g.n, bool))


def test_fiedler_matches_generalized_eigenproblem():
    rng = np.random.default_rng(1)
    W = random_connected_graph(rng, 8, 12)
    lam, y = fiedler_vector(SimilarityGraph.from_weights(W))
    D = np.diag(W.sum(1))
    vals = sla.eigh(D - W, D, eigvals_only=True)
    assert lam == pytest.approx(vals[1], abs=1e-10)
    assert np.allclose((D - W) @ y, lam * D @ y, atol=1e-9)
    assert abs(y @ D @ np.ones(len(W))) < 1e-9


def test_sparse_eigensolver_agrees_with_dense():
    rng = np.random.default_rng(2)
    dims = (9, 9, 7)
    data = rng.standard_normal(dims + (30,))
    data[:4] += rng.standard_normal(30) * 2
    g = build_graph(VolumeSeries(data, np.ones(dims, bool)))
    assert g.n > DENSE_LIMIT
    lam, y = fiedler_vector(g, seed=3)
    W = g.weights.toarray()
    D = np.diag(g.degree)
    vals = sla.eigh(D - W, D, eigvals_only=True, subset_by_index=[0, 2])
    assert lam == pytest.approx(vals[1], rel=1e-6)
    r = (D - W) @ y - lam * D @ y
    assert np.linalg.norm(r) / np.linalg.norm(D @ y) < 1e-5


def test_bipartition_requires_connected_graph():
    W = np.zeros((4, 4))
    W[0, 1] = W[1, 0] = W[2, 3] = W[3, 2] = 1
    with pytest.raises(ValidationError):
        spectral_bipartition(SimilarityGraph.from_weights(W))
    with pytest.raises(ValidationError):
        spectral_bipartition(SimilarityGraph.from_weights(np.zeros((1, 1))))


def test_refinement_never_hurts():
    rng = np.random.default_rng(3)
    for i in range(30):
        g = SimilarityGraph.from_weights(random_connected_graph(rng))
        raw = spectral_bipartition(g, seed=i, refine=False).ncut_cost
        assert spectral_bipartition(g, seed=i).ncut_cost <= raw + 1e-12


def _random_volume(seed, dims=(5, 5, 4), nt=40):
    rng = np.random.default_rng(seed)
    mask = rng.random(dims) < 0.85
    data = rng.standard_normal(dims + (nt,))
    data[: dims[0] // 2] += rng.standard_normal(nt)
    return VolumeSeries(data * mask[..., None], mask)


@pytest.mark.parametrize("C", [1, 2, 5, 12])
def test_parcellation_contiguous_and_complete(C):
    v = _random_volume(C)
    g = build_graph(v)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        par = parcellate(g, C, dims=v.mask.shape)
    lab = par.labels.labels
    assert par.C == max(C, g.components()[0]) or par.warnings
    assert set(np.unique(lab[v.mask])) == set(range(1, par.C + 1))
    assert np.all(lab[~v.mask] == 0)
    for k in range(1, par.C + 1):
        assert flood_fill_components(lab == k) == 1
    assert sorted(np.concatenate(par.members).tolist()) == list(range(g.n))


def test_parcellation_deterministic():
    v = _random_volume(7)
    g = build_graph(v)
    a = parcellate(g, 6, seed=4)
    b = parcellate(g, 6, seed=4)
    assert np.array_equal(a.labels.labels, b.labels.labels)


def test_parcellation_splits_planted_regions():
    rng = np.random.default_rng(5)
    dims = (6, 4, 4)
    data = rng.standard_normal(dims + (100,)) * 0.3
    data[:3] += rng.standard_normal(100)
    data[3:] += rng.standard_normal(100)
    g = build_graph(VolumeSeries(data, np.ones(dims, bool)))
    lab = parcellate(g, 2).labels.labels
    assert len(np.unique(lab[:3])) == 1 and len(np.unique(lab[3:])) == 1
    assert lab[0, 0, 0] != lab[5, 0, 0]


def test_more_components_than_clusters_merges_spatially():
    dims = (5, 1, 1)
    rng = np.random.default_rng(6)
    data = rng.standard_normal(dims + (30,))
    # two constant voxels become isolated components
    data[1] = 1.0
    data[3] = 2.0
    mask = np.ones(dims, bool)
    g = build_graph(VolumeSeries(data, mask))
    ncomp = g.components()[0]
    assert ncomp > 2
    par = parcellate(g, 2)
    assert par.C == 2 and par.warnings
    for k in (1, 2):
        assert flood_fill_components(par.labels.labels == k) == 1


def test_parcellate_validation():
    g = build_graph(_random_volume(8))
    with pytest.raises(ValidationError):
        parcellate(g, 0)
    with pytest.raises(ValidationError):
        parcellate(g, g.n + 1)
