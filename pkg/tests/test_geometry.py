import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gnnlf import tensor as T
from gnnlf.geometry import (
    CoincidentAtomsError,
    MoleculeConf,
    build_neighbor_graph,
    cutoff_weight,
    find_edges,
    random_conf,
    random_rotation,
    rbf_expand,
    rbf_init,
)


def two_atoms(d):
    return MoleculeConf([1, 1], [[0, 0, 0], [d, 0, 0]])


def test_conf_validation():
    with pytest.raises(ValueError):
        MoleculeConf([], np.zeros((0, 3)))
    with pytest.raises(ValueError):
        MoleculeConf([1, 1], np.zeros((3, 3)))
    with pytest.raises(ValueError):
        MoleculeConf([1], [[np.inf, 0, 0]])
    with pytest.raises(CoincidentAtomsError):
        MoleculeConf([1, 1], [[0, 0, 0], [0, 0, 5e-7]])
    with pytest.raises(ValueError):
        MoleculeConf([1, 1], [[0, 0, 0], [1, 0, 0]], forces=np.zeros((3, 3)))


def test_neighbor_graph_examples(rng):
    assert build_neighbor_graph(two_atoms(1.0), 2.0).edges == [(0, 1), (1, 0)]
    assert build_neighbor_graph(two_atoms(3.0), 2.0).edges == []
    conf = random_conf(rng, 10, box=4.0)
    graph = build_neighbor_graph(conf, 2.5)
    brute = [(i, j) for i in range(10) for j in range(10)
             if i != j and np.linalg.norm(conf.r[i] - conf.r[j]) < 2.5]
    assert graph.edges == brute


def test_neighbor_graph_invalid_cutoff():
    with pytest.raises(ValueError):
        build_neighbor_graph(two_atoms(1.0), 0.0)


def test_graph_invariants(rng):
    conf = random_conf(rng, 12, box=4.0)
    g = build_neighbor_graph(conf, 3.0)
    assert np.all(g.dist < 3.0)
    index = {e: k for k, e in enumerate(g.edges)}
    for (i, j), k in index.items():
        back = index[(j, i)]
        assert g.dist[k] == g.dist[back]
        np.testing.assert_array_equal(g.unit_dir[k], -g.unit_dir[back])
    np.testing.assert_allclose(np.linalg.norm(g.unit_dir, axis=1), 1.0, atol=1e-12)
    assert np.all((g.edge_weight >= 0) & (g.edge_weight <= 1))


def test_graph_transforms(rng):
    conf = random_conf(rng, 9, box=4.0)
    q = random_rotation(rng, reflect=True)
    moved = conf.transformed(q, rng.normal(size=3) * 10)
    a = build_neighbor_graph(conf, 3.0)
    b = build_neighbor_graph(moved, 3.0)
    assert a.edges == b.edges
    np.testing.assert_allclose(b.dist, a.dist, atol=1e-12)
    np.testing.assert_allclose(b.rbf, a.rbf, atol=1e-12)
    np.testing.assert_allclose(b.edge_weight, a.edge_weight, atol=1e-12)
    np.testing.assert_allclose(b.unit_dir, a.unit_dir @ q.T, atol=1e-12)


def test_edges_are_lexicographic(rng):
    c, n = find_edges(random_conf(rng, 8).r, 5.0)
    pairs = list(zip(c.tolist(), n.tolist()))
    assert pairs == sorted(pairs)


# ----------------------------------------------------------------------
# cutoff


def test_cutoff_examples():
    assert cutoff_weight(0.0, 5.0) == 1.0
    assert cutoff_weight(5.0, 5.0) == 0.0
    assert cutoff_weight(2.5, 5.0) == pytest.approx(0.5, abs=1e-15)
    assert cutoff_weight(7.0, 5.0) == 0.0


@given(st.floats(0, 20), st.floats(0.5, 12))
def test_cutoff_range(r, rc):
    assert 0.0 <= cutoff_weight(r, rc) <= 1.0


def test_cutoff_slope_vanishes_at_radius():
    rc = 5.0
    # a central difference straddling r_c sees only the inner side, whose
    # value is ~(pi h / r_c)^2 / 4, so the slope estimate shrinks linearly in h
    for h in (1e-3, 1e-4, 1e-5, 1e-6):
        slope = (cutoff_weight(rc + h, rc) - cutoff_weight(rc - h, rc)) / (2 * h)
        assert abs(slope) <= math.pi**2 * h / (8 * rc**2) * 1.001
    r = T.Tensor(np.array([rc]), requires_grad=True)
    assert abs(T.grad(cutoff_weight(r, rc).sum(), r).data[0]) <= 1e-10


def test_cutoff_tensor_agrees_with_numpy():
    r = np.linspace(0, 4.9, 7)
    np.testing.assert_allclose(cutoff_weight(T.Tensor(r), 5.0).data, cutoff_weight(r, 5.0), atol=1e-15)


# ----------------------------------------------------------------------
# radial basis


def test_rbf_examples():
    mus = np.array([0.2, math.exp(-1.3), 0.9])
    out = rbf_expand(1.3, np.ones(3) * 4.0, mus)
    assert out[1] == 1.0
    far = rbf_expand(1.3, np.array([1e6]), np.array([0.9]))
    assert far[0] < 1e-12
    # exp(-(e^-1 - 0.5)^2) evaluated with 30-digit decimal arithmetic
    assert rbf_expand(1.0, np.array([1.0]), np.array([0.5]))[0] == pytest.approx(0.982695628516518, rel=1e-14)


@given(st.floats(0, 30), st.integers(1, 40), st.floats(4, 12))
def test_rbf_range(r, k, rc):
    betas, mus = rbf_init(k, rc)
    out = rbf_expand(r, betas, mus)
    assert out.shape == (k,)
    assert np.all((out >= 0) & (out <= 1))


def test_rbf_tensor_agrees_with_numpy(rng):
    betas, mus = rbf_init(8, 5.0)
    r = rng.uniform(0.5, 5, size=6)
    np.testing.assert_allclose(rbf_expand(T.Tensor(r), T.Tensor(betas), T.Tensor(mus)).data,
                               rbf_expand(r, betas, mus), rtol=1e-14)


def test_rbf_init_examples():
    _, mus = rbf_init(2, 60.0)
    np.testing.assert_allclose(mus, [0.0, 1.0], atol=1e-15)
    betas, mus = rbf_init(1, 5.0)
    np.testing.assert_allclose(mus, [(math.exp(-5) + 1) / 2])
    betas, mus = rbf_init(32, 5.0)
    assert mus.shape == (32,) and np.all(np.diff(mus) > 0)
    assert mus[0] == pytest.approx(math.exp(-5)) and mus[-1] == 1.0
    np.testing.assert_allclose(betas, (2 / 32 * (1 - math.exp(-5))) ** -2)
    with pytest.raises(ValueError):
        rbf_init(0, 5.0)


def test_random_rotation_is_orthogonal(rng):
    for reflect in (False, True):
        q = random_rotation(rng, reflect=reflect)
        np.testing.assert_allclose(q @ q.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(q) == pytest.approx(-1.0 if reflect else 1.0)
