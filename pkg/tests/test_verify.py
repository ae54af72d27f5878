import itertools

import numpy as np
import pytest

from gnnlf import frames as fr
from gnnlf import model as model_mod
from gnnlf import verify as V
from gnnlf.model import GNNLF, ModelConfig


def fast_model(seed=0, **kw):
    return GNNLF(ModelConfig(hidden=16, rbf=16, layers=2, use_d2=True, **kw), seed=seed)


def test_centrosymmetric_fixtures_are_centrosymmetric():
    for name, (conf, center) in V.centrosymmetric_fixtures().items():
        rel = conf.r - conf.r[center]
        others = [k for k in range(conf.n_atoms) if k != center]
        for k in others:
            mirror = [m for m in others if np.allclose(rel[m], -rel[k]) and conf.z[m] == conf.z[k]]
            assert mirror, f"{name}: atom {k} has no mirror partner"


def test_angle_pair_has_equal_distance_multisets():
    for bond in (1.0, 3.0):
        a, b = V.angle_pair(bond=bond)
        assert np.allclose(np.linalg.norm(a.r[1:] - a.r[0], axis=1), np.linalg.norm(b.r[1:] - b.r[0], axis=1))
        assert a.z.tolist() == b.z.tolist()
    far = V.angle_pair(bond=3.0)
    for conf in far:
        d = np.linalg.norm(conf.r[1] - conf.r[2])
        assert d > 4.0  # outer atoms out of range at cutoff 4


def test_heap_permutations_cover_symmetric_group():
    for n in range(1, 6):
        perms = list(V._heap_permutations(n))
        assert sorted(perms) == sorted(itertools.permutations(range(n)))
        assert perms != list(itertools.permutations(range(n))) or n < 3


def test_cutoff_sweep_shapes():
    model = fast_model()
    conf, _ = V.centrosymmetric_fixtures()["linear_triatomic"]
    energies, frames = V.cutoff_sweep(model, conf, 0, [1, 0, 0], span=1e-3, step=1e-4)
    assert energies.shape == (21,)
    assert frames.shape == (21, 4, 16, 3)
    sch = GNNLF(ModelConfig(hidden=8, schnet_mode=True))
    assert V.cutoff_sweep(sch, conf, 0, [0, 0, 1], span=1e-3)[1] is None


def test_fast_suites_pass_on_small_model():
    model = fast_model()
    assert V.check_equivariance(model, n_confs=5, n_transforms=3, sizes=(3, 8)).passed
    assert V.check_netforce(model, n_confs=5).passed
    assert V.check_cancellation(model).passed
    assert V.check_global_degeneracy(model, n_random=3).passed
    assert V.check_relational_pooling(n_confs=5).passed
    assert V.check_cutoff_smoothness(model, n_trials=2).passed


def test_gradcheck_passes_with_smaller_step():
    # truncation error of the central difference shrinks as h^2
    model = fast_model()
    assert V.check_gradcheck(model, n_confs=3, h=1e-5).passed


def test_run_suites_report_and_unknown_name():
    report = V.run_suites(fast_model(), ["cancellation", "relational_pooling"])
    assert report["passed"] and set(report["suites"]) == {"cancellation", "relational_pooling"}
    assert all(r["seconds"] >= 0 for r in report["suites"].values())
    with pytest.raises(ValueError):
        V.run_suites(fast_model(), ["nonsense"])


# ----------------------------------------------------------------------
# mutations: deliberately broken models must be caught


def test_flipped_d1_sign_flips_separation_deltas():
    """Reversing the edge direction convention negates d1 and nothing invariant breaks."""
    model = V.default_model(0)
    mutant = model.clone()
    mutant._d1_sign = -1.0
    seeds = range(3)
    base = V.check_separation(model, seeds=seeds).metrics["d1_signed_delta"]
    flipped = V.check_separation(mutant, seeds=seeds).metrics["d1_signed_delta"]
    np.testing.assert_allclose(flipped, -np.asarray(base), rtol=1e-12)
    assert V.check_equivariance(mutant, n_confs=3, n_transforms=2, sizes=(3, 6)).passed


def test_fixed_axis_in_frames_breaks_equivariance(monkeypatch):
    original = fr.generate_frames

    def biased(*args, **kwargs):
        frames = original(*args, **kwargs)
        return frames + np.array([0.0, 0.0, 0.3])

    monkeypatch.setattr(model_mod.fr, "generate_frames", biased)
    result = V.check_equivariance(fast_model(), n_confs=3, n_transforms=2, sizes=(3, 6))
    assert not result.passed
    assert result.metrics["max_err_frames"] > 1e-3


def test_hard_cutoff_breaks_smoothness(monkeypatch):
    monkeypatch.setattr(model_mod, "cutoff_weight", lambda d, rc: d * 0.0 + 1.0)
    result = V.check_cutoff_smoothness(fast_model(), n_trials=1)
    assert not result.passed


def test_distance_only_model_cannot_separate_far_pair():
    """At cutoff 4 the far pair looks identical to a distances-only model but not to the full one."""
    sch = GNNLF(ModelConfig(schnet_mode=True, cutoff=4.0), seed=0)
    far = V.angle_pair(bond=3.0)
    assert V.separation_metrics(sch, far)["energy_gap"] <= V.TOL_SCHNET_EQUAL
    full = GNNLF(ModelConfig(use_d2=True, cutoff=4.0), seed=0)
    assert V.separation_metrics(full, far)["energy_gap"] >= V.MIN_ENERGY_GAP
