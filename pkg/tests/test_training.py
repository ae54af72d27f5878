import numpy as np
import pytest

from gnnlf import tensor as T
from gnnlf.data import Dataset
from gnnlf.geometry import MoleculeConf, random_rotation
from gnnlf.model import GNNLF, ModelConfig
from gnnlf.training import (
    SYNTHETIC_BASE,
    AdamState,
    NonFiniteLossError,
    PlateauScheduler,
    TrainConfig,
    adam_step,
    angle_energy,
    evaluate_mae,
    fit_normalization,
    lennard_jones,
    loss_pes,
    predict,
    predict_parallel,
    synthetic_lj_dataset,
    synthetic_pes,
    time_inference,
    train,
    validation_score,
)


def tiny_model(seed=0, **kw):
    return GNNLF(ModelConfig(hidden=8, rbf=8, layers=1, cutoff=5.0, **kw), seed=seed)


@pytest.fixture(scope="module")
def lj():
    return synthetic_lj_dataset(12, seed=3)


# ----------------------------------------------------------------------
# loss and metrics


def test_loss_hand_case():
    loss = loss_pes(T.Tensor([1.0, 3.0]), T.Tensor(np.ones((2, 3))), np.array([0.0, 1.0]),
                    np.zeros((2, 3)), rho=0.95)
    # MSE(E) = (1 + 4)/2, MSE(F) = 1
    assert loss.item() == pytest.approx(0.05 * 2.5 + 0.95 * 1.0, rel=1e-15)
    scaled = loss_pes(T.Tensor([2.0]), None, np.array([0.0]), None, rho=0.0, scale=2.0)
    assert scaled.item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        loss_pes(T.Tensor([1.0]), None, np.array([1.0]), None, rho=0.5)


def test_validation_score():
    assert validation_score({"energy_mae": 1.0, "force_mae": 3.0}, 0.95) == pytest.approx(0.05 + 2.85)
    assert validation_score({"energy_mae": 2.0}, 0.95) == 2.0
    assert validation_score({"dipole_mae": 0.5, "n": 3}, 0.95) == 0.5


# ----------------------------------------------------------------------
# optimizer


def adam_oracle(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-loop Adam written independently of the vectorized version."""
    p = [float(x) for x in p]
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for k in range(len(p)):
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
            mh = m[k] / (1 - b1**t)
            vh = v[k] / (1 - b2**t)
            p[k] -= lr * mh / (vh**0.5 + eps)
    return np.array(p)


def test_adam_matches_scalar_oracle(rng):
    p0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(25)]
    params, state = {"w": p0}, AdamState()
    for g in grads:
        params, state = adam_step(params, {"w": g}, state, lr=1e-2)
    np.testing.assert_allclose(params["w"], adam_oracle(p0, grads, 1e-2), rtol=0, atol=1e-12)
    assert state.t == 25


def test_adam_first_step_is_sign_times_lr():
    params, _ = adam_step({"w": np.zeros(3)}, {"w": np.array([2.0, -0.5, 0.0])}, AdamState(), lr=0.1)
    np.testing.assert_allclose(params["w"], [-0.1, 0.1, 0.0], atol=1e-8)


def test_adam_zero_lr_is_identity(rng):
    p = rng.normal(size=4)
    out, _ = adam_step({"w": p}, {"w": rng.normal(size=4)}, AdamState(), lr=0.0)
    np.testing.assert_array_equal(out["w"], p)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState(), lr=0.1)


def test_plateau_scheduler():
    s = PlateauScheduler(1.0, factor=0.5, patience=2, min_lr=0.2)
    assert [s.step(m) for m in (1.0, 1.0, 1.0)] == [1.0, 1.0, 1.0]
    assert s.step(1.0) == 0.5
    assert s.step(0.5) == 0.5
    for _ in range(9):
        s.step(0.9)
    assert s.lr == 0.2
    with pytest.raises(ValueError):
        s.step(float("nan"))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(force_weight=1.5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig.properties().batch_size == 64
    assert TrainConfig.pes(lr=5e-4).lr == 5e-4


# ----------------------------------------------------------------------
# synthetic potential


def fd_forces(energy_fn, r, h=1e-6):
    out = np.zeros_like(r)
    for i in range(r.shape[0]):
        for c in range(3):
            plus, minus = r.copy(), r.copy()
            plus[i, c] += h
            minus[i, c] -= h
            out[i, c] = -(energy_fn(plus) - energy_fn(minus)) / (2 * h)
    return out


def test_lennard_jones_forces_match_finite_differences():
    conf = synthetic_lj_dataset(1, seed=7, k_angle=0.0)[0]
    fd = fd_forces(lambda r: lennard_jones(conf.z, r)[0], conf.r)
    np.testing.assert_allclose(conf.forces, fd, atol=1e-6)


def test_synthetic_forces_match_finite_differences():
    conf = synthetic_lj_dataset(1, seed=8)[0]
    fd = fd_forces(lambda r: synthetic_pes(conf.z, r)[0], conf.r)
    np.testing.assert_allclose(conf.forces, fd, atol=1e-6)


def test_angle_term_vanishes_at_reference_and_is_invariant(rng):
    z = np.array([8, 6, 1, 1])
    e, f = angle_energy(z, SYNTHETIC_BASE, SYNTHETIC_BASE, 10.0)
    assert e == 0.0 and np.all(f == 0)
    r = SYNTHETIC_BASE + rng.normal(scale=0.1, size=(4, 3))
    q = random_rotation(rng, reflect=True)
    e1, f1 = angle_energy(z, r, SYNTHETIC_BASE, 10.0)
    e2, f2 = angle_energy(z, r @ q.T + 3.0, SYNTHETIC_BASE, 10.0)
    assert e1 > 0 and e2 == pytest.approx(e1, rel=1e-12)
    np.testing.assert_allclose(f2, f1 @ q.T, atol=1e-12)
    # a pure rescaling keeps every angle
    assert angle_energy(z, 1.3 * SYNTHETIC_BASE, SYNTHETIC_BASE, 10.0)[0] == pytest.approx(0.0, abs=1e-25)


def test_lennard_jones_minimum():
    sigma = 0.9
    e, f = lennard_jones([1, 1], [[0, 0, 0], [2 ** (1 / 6) * sigma, 0, 0]])
    assert e == pytest.approx(-0.05, rel=1e-12)
    np.testing.assert_allclose(f, 0, atol=1e-12)


def test_synthetic_dataset_is_reproducible():
    a, b = synthetic_lj_dataset(5, seed=1), synthetic_lj_dataset(5, seed=1)
    np.testing.assert_array_equal(a.targets(), b.targets())
    assert a[0].n_atoms == 4 and a.has_forces


# ----------------------------------------------------------------------
# evaluation


def test_evaluate_mae_matches_oracle(lj):
    model = tiny_model()
    metrics = evaluate_mae(model, lj, batch_size=5)
    e = [model.predict_energy(c) for c in lj]
    f = [model.predict_forces(c) for c in lj]
    assert metrics["energy_mae"] == pytest.approx(np.mean(np.abs(np.array(e) - lj.targets())), rel=1e-12)
    ref_f = np.mean([abs(a - b) for fp, c in zip(f, lj) for a, b in zip(fp.ravel(), c.forces.ravel())])
    assert metrics["force_mae"] == pytest.approx(ref_f, rel=1e-12)
    assert metrics["n"] == len(lj)


def test_evaluate_without_forces_reports_energy_only(lj):
    stripped = Dataset([MoleculeConf(c.z, c.r, c.energy) for c in lj])
    metrics = evaluate_mae(tiny_model(), stripped)
    assert "force_mae" not in metrics and "energy_mae" in metrics


def test_evaluate_property_target(rng):
    confs = [MoleculeConf([8, 1], [[0, 0, 0], [0.9 + 0.1 * k, 0, 0]], properties={"dipole": 1.0}) for k in range(3)]
    ds = Dataset(confs, target="dipole")
    model = tiny_model(target="dipole")
    pred = [model.predict_dipole(c) for c in confs]
    assert evaluate_mae(model, ds)["dipole_mae"] == pytest.approx(np.mean(np.abs(np.array(pred) - 1.0)))


def test_parallel_prediction_matches_serial(lj):
    model = tiny_model()
    e1, f1 = predict(model, lj.confs, batch_size=4)
    e2, f2 = predict_parallel(model, lj.confs, batch_size=4, workers=2)
    np.testing.assert_array_equal(e1, e2)
    for a, b in zip(f1, f2):
        np.testing.assert_array_equal(a, b)


def test_time_inference_is_positive(lj):
    assert time_inference(tiny_model(), lj.confs[:3], repeats=1) > 0


# ----------------------------------------------------------------------
# training loop


def test_normalization_fit(lj):
    model = tiny_model()
    fit_normalization(model, lj)
    assert model.atom_offset == pytest.approx(lj.targets().mean() / 4)
    assert model.energy_scale == pytest.approx(np.std(lj.targets()))


def test_zero_lr_keeps_weights_and_flat_loss(lj):
    model = tiny_model()
    result = train(model, lj, lj, TrainConfig(lr=0.0, max_epochs=3, batch_size=len(lj), patience=10))
    losses = [row["train_loss"] for row in result.history]
    # epochs reshuffle the batch, so only summation order differs
    assert losses[1] == pytest.approx(losses[0], rel=1e-12)
    assert losses[2] == pytest.approx(losses[0], rel=1e-12)
    for name, t in model.params.items():
        np.testing.assert_array_equal(result.model.params[name].data, t.data)


def test_training_is_deterministic(lj):
    cfg = TrainConfig(lr=1e-2, max_epochs=3, batch_size=5)
    a = train(tiny_model(), lj, lj, cfg)
    b = train(tiny_model(), lj, lj, cfg)
    assert a.history == b.history
    assert a.step_losses == b.step_losses


def test_training_does_not_touch_input_model(lj):
    model = tiny_model()
    before = model.arrays()
    train(model, lj, lj, TrainConfig(lr=1e-2, max_epochs=1))
    for name, a in before.items():
        np.testing.assert_array_equal(model.params[name].data, a)


def test_early_stopping_on_frozen_model(lj):
    result = train(tiny_model(), lj, lj, TrainConfig(lr=0.0, max_epochs=50, patience=4))
    assert result.stopped_early
    assert len(result.history) == 5 and result.best_epoch == 1


def test_best_checkpoint_is_returned(lj):
    result = train(tiny_model(), lj, lj, TrainConfig(lr=3e-2, max_epochs=6, batch_size=4))
    best = min(result.history, key=lambda r: r["val_score"])
    assert result.best_epoch == best["epoch"]
    metrics = evaluate_mae(result.model, lj)
    assert validation_score(metrics, 0.95) == pytest.approx(best["val_score"], rel=1e-12)


def test_rotated_copies_train_identically(lj):
    """An invariant model sees the same loss on rotated data, step by step."""
    rng = np.random.default_rng(11)
    moved = []
    for c in lj:
        q = random_rotation(rng)
        moved.append(MoleculeConf(c.z, c.r @ q.T + rng.normal(size=3), c.energy, c.forces @ q.T))
    cfg = TrainConfig(lr=1e-2, max_epochs=1, batch_size=2)
    a = train(tiny_model(), lj[:10], lj[:10], cfg)
    b = train(tiny_model(), Dataset(moved[:10]), Dataset(moved[:10]), cfg)
    np.testing.assert_allclose(a.step_losses[:5], b.step_losses[:5], rtol=1e-8)


def test_overfit_tiny_toy():
    ds = synthetic_lj_dataset(10, seed=5, z=(6, 1, 1, 1))
    cfg = TrainConfig(lr=3e-3, max_epochs=150, batch_size=10, patience=150, force_weight=0.5, sched_patience=100)
    result = train(tiny_model(species=(1, 6)), ds, ds, cfg)
    first = result.history[0]["val_energy_mae"]
    assert evaluate_mae(result.model, ds)["energy_mae"] < 0.2 * first


def test_diverging_training_raises_with_last_good_model(lj):
    bad = [MoleculeConf(c.z, c.r, c.energy * 1e200, c.forces) for c in lj]
    with pytest.raises(NonFiniteLossError) as info:
        train(tiny_model(), Dataset(bad), lj, TrainConfig(lr=1e-2, max_epochs=2, normalize=False))
    assert info.value.model is not None


def test_training_requires_data(lj):
    with pytest.raises(ValueError):
        train(tiny_model(), lj[:0], lj, TrainConfig(max_epochs=1))


def test_property_training_runs(rng):
    confs = [MoleculeConf([8, 1], [[0, 0, 0], [0.8 + 0.05 * k, 0, 0]], properties={"dipole": 0.5 * k}) for k in range(6)]
    ds = Dataset(confs, target="dipole")
    result = train(tiny_model(target="dipole"), ds, ds, TrainConfig.properties(max_epochs=2, batch_size=3))
    assert "val_dipole_mae" in result.history[0]
