"""Optimization loop, metrics and the small synthetic potential used for tests."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .geometry import MoleculeConf, find_edges
from .model import GNNLF
from .tensor import Tensor

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Training diverged; ``model`` holds the last good (best-validation) weights."""

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history or []


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 6000
    patience: int = 500
    force_weight: float = 0.95
    seed: int = 0
    sched_factor: float = 0.8
    sched_patience: int = 30
    min_lr: float = 1e-6
    normalize: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if not 0.0 <= self.force_weight <= 1.0:
            raise ValueError("force_weight must lie in [0, 1]")
        if not 0.0 < self.sched_factor < 1.0:
            raise ValueError("sched_factor must lie in (0, 1)")

    @classmethod
    def pes(cls, **overrides) -> "TrainConfig":
        return cls(**{"lr": 1e-3, "batch_size": 16, "max_epochs": 6000, "patience": 500, **overrides})

    @classmethod
    def properties(cls, **overrides) -> "TrainConfig":
        return cls(**{"lr": 3e-4, "batch_size": 64, "max_epochs": 1000, "patience": 50, **overrides})


# ----------------------------------------------------------------------
# losses and metrics


def loss_pes(pred_energy, pred_forces, target_energy, target_forces, rho: float = 0.95, scale: float = 1.0) -> Tensor:
    """``(1 - rho) * MSE(E) + rho * MSE(F)`` with errors divided by ``scale``.

    MSE(E) averages over molecules, MSE(F) over all force components.
    """
    if target_energy is None or (rho > 0 and target_forces is None):
        raise ValueError("energy and force targets are required")
    de = (T.as_tensor(pred_energy) - T.as_tensor(target_energy)) * (1.0 / scale)
    loss = (de * de).mean() * (1.0 - rho)
    if rho > 0:
        df = (T.as_tensor(pred_forces) - T.as_tensor(target_forces)) * (1.0 / scale)
        loss = loss + (df * df).mean() * rho
    return loss


def mae(pred, target) -> float:
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(target))))


# ----------------------------------------------------------------------
# optimizer and scheduler


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update on dicts of numpy arrays."""
    t = state.t + 1
    m, v, out = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != np.shape(p):
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {np.shape(p)}")
        m[name] = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v[name] = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        m_hat = m[name] / (1 - beta1**t)
        v_hat = v[name] / (1 - beta2**t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, AdamState(m, v, t)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` evaluations without improvement."""

    def __init__(self, lr: float, factor: float = 0.8, patience: int = 30, min_lr: float = 1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_evals = 0

    def step(self, metric: float) -> float:
        if not np.isfinite(metric):
            raise ValueError("scheduler metric must be finite")
        if metric < self.best:
            self.best = metric
            self.bad_evals = 0
        else:
            self.bad_evals += 1
            if self.bad_evals > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_evals = 0
        return self.lr


# ----------------------------------------------------------------------
# prediction and evaluation


def _chunks(n: int, size: int):
    return [np.arange(k, min(k + size, n)) for k in range(0, n, size)]


def predict(model: GNNLF, confs, batch_size: int = 64, forces: bool = True, edges=None):
    """Energies (and forces) for a list of conformations, in input order."""
    energies, force_list = [], []
    for idx in _chunks(len(confs), batch_size):
        chunk = [confs[i] for i in idx]
        b = model.batch(chunk, None if edges is None else [edges[i] for i in idx])
        if forces:
            e, f = model.energy_and_forces(b)
            energies.append(e.data)
            splits = np.cumsum([c.n_atoms for c in chunk])[:-1]
            force_list.extend(np.split(np.array(f.data), splits))
        else:
            with T.no_grad():
                energies.append(model.predict_property(b).data)
    return np.concatenate(energies), (force_list if forces else None)


def _predict_worker(args):
    model, confs, batch_size, forces = args
    return predict(model, confs, batch_size, forces)


def predict_parallel(model: GNNLF, confs, batch_size: int = 64, forces: bool = True, workers: int = 1):
    if workers <= 1 or len(confs) < 2:
        return predict(model, confs, batch_size, forces)
    parts = np.array_split(np.arange(len(confs)), workers)
    jobs = [(model, [confs[i] for i in p], batch_size, forces) for p in parts if len(p)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_predict_worker, jobs))
    energies = np.concatenate([r[0] for r in results])
    force_list = [f for r in results for f in r[1]] if forces else None
    return energies, force_list


def evaluate_mae(model: GNNLF, ds: Dataset, batch_size: int = 64, workers: int = 1, edges=None) -> dict:
    """MAE per target: energy (kcal/mol) and, when present, forces (kcal/mol/Å)."""
    if ds.target is None:
        raise ValueError("dataset has no targets")
    if ds.target != "energy":
        pred, _ = predict(model, ds.confs, batch_size, forces=False, edges=edges)
        return {f"{ds.target}_mae": mae(pred, ds.targets()), "n": len(ds)}
    want_forces = ds.has_forces
    if workers > 1 and edges is None:
        pred_e, pred_f = predict_parallel(model, ds.confs, batch_size, want_forces, workers)
    else:
        pred_e, pred_f = predict(model, ds.confs, batch_size, want_forces, edges)
    result = {"energy_mae": mae(pred_e, ds.targets()), "n": len(ds)}
    if want_forces:
        result["force_mae"] = mae(np.concatenate(pred_f), np.concatenate([c.forces for c in ds.confs]))
    return result


def validation_score(metrics: dict, rho: float) -> float:
    """Weighted L1 used for model selection and scheduling."""
    if "energy_mae" not in metrics:
        return next(v for k, v in metrics.items() if k.endswith("_mae"))
    if "force_mae" not in metrics:
        return metrics["energy_mae"]
    return (1 - rho) * metrics["energy_mae"] + rho * metrics["force_mae"]


# ----------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: GNNLF
    history: list
    best_epoch: int
    best_score: float
    step_losses: list
    stopped_early: bool
    meta: dict


def fit_normalization(model: GNNLF, ds: Dataset) -> None:
    """Per-atom energy offset and energy scale from the training targets."""
    if ds.target != "energy":
        model.energy_scale, model.atom_offset = 1.0, 0.0
        model.normalization_note = "none"
        return
    e = ds.targets()
    n = np.array([c.n_atoms for c in ds.confs], dtype=np.float64)
    offset = float(e.sum() / n.sum())
    std = float(np.std(e - offset * n))
    model.atom_offset = offset
    model.energy_scale = std if std > 0 else 1.0
    model.normalization_note = "energy = scale * network + offset * n_atoms; scale = std, offset = mean per atom"


def train(model: GNNLF, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig, callback=None) -> TrainResult:
    """Adam + plateau scheduling with early stopping on the validation score.

    The returned model carries the best-validation weights.  Everything is
    deterministic for a fixed ``cfg.seed``.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation sets must be non-empty")
    model = model.clone()
    if cfg.normalize:
        fit_normalization(model, train_ds)
    energy_task = train_ds.target == "energy"
    rho = cfg.force_weight if (energy_task and train_ds.has_forces) else 0.0
    scale = model.energy_scale if energy_task else 1.0
    rc = model.config.cutoff
    train_edges = [find_edges(c.r, rc) for c in train_ds.confs]
    val_edges = [find_edges(c.r, rc) for c in val_ds.confs]
    targets = train_ds.targets()

    rng = np.random.default_rng(cfg.seed)
    names = list(model.trainable())
    opt_state = AdamState()
    sched = PlateauScheduler(cfg.lr, cfg.sched_factor, cfg.sched_patience, cfg.min_lr)
    history, step_losses = [], []
    best = (np.inf, 0, model.arrays())
    stale = 0
    stopped_early = False

    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(len(train_ds))
        epoch_loss = 0.0
        for idx in _chunks(len(order), cfg.batch_size):
            sel = order[idx]
            batch = model.batch([train_ds.confs[i] for i in sel], [train_edges[i] for i in sel])
            params = model.trainable()
            try:
                if energy_task:
                    if rho > 0:
                        e, f = model.energy_and_forces(batch, create_graph=True)
                        tf = np.concatenate([train_ds.confs[i].forces for i in sel])
                    else:
                        e, f, tf = model.forward(batch).energy, None, None
                    loss = loss_pes(e, f, targets[sel], tf, rho, scale)
                else:
                    d = (model.predict_property(batch) - targets[sel]) * (1.0 / scale)
                    loss = (d * d).mean()
                grads = T.grad(loss, [params[n] for n in names])
            except FloatingPointError as exc:
                raise _diverged(model, best, history, f"epoch {epoch}: {exc}") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise _diverged(model, best, history, f"epoch {epoch}: non-finite loss")
            step_losses.append(value)
            epoch_loss += value * len(sel)
            new, opt_state = adam_step(
                {n: params[n].data for n in names}, {n: g.data for n, g in zip(names, grads)}, opt_state, lr
            )
            model.load_arrays({**model.arrays(), **new})

        metrics = evaluate_mae(model, val_ds, edges=val_edges)
        score = validation_score(metrics, rho)
        row = {"epoch": epoch, "train_loss": epoch_loss / len(train_ds), "val_score": score, "lr": lr}
        row.update({f"val_{k}": v for k, v in metrics.items() if k.endswith("_mae")})
        history.append(row)
        if callback is not None:
            callback(row)
        if score < best[0]:
            best = (score, epoch, model.arrays())
            stale = 0
        else:
            stale += 1
        sched.step(score)
        if stale >= cfg.patience:
            stopped_early = True
            break

    model.load_arrays(best[2])
    meta = {"normalization": model.normalization_note, "energy_scale": model.energy_scale,
            "atom_offset": model.atom_offset, "force_weight": rho}
    return TrainResult(model, history, best[1], float(best[0]), step_losses, stopped_early, meta)


def _diverged(model: GNNLF, best, history, message) -> NonFiniteLossError:
    good = model.clone()
    good.load_arrays(best[2])
    return NonFiniteLossError(message, good, history)


# ----------------------------------------------------------------------
# synthetic data

LJ_PARAMS = {1: (0.9, 0.05), 6: (1.3, 0.10), 7: (1.25, 0.12), 8: (1.2, 0.15)}


def lennard_jones(conf_z, r, params=LJ_PARAMS) -> tuple[float, np.ndarray]:
    """Pairwise LJ energy (kcal/mol) and forces with Lorentz-Berthelot mixing."""
    r = np.asarray(r, dtype=np.float64)
    n = len(conf_z)
    energy = 0.0
    forces = np.zeros_like(r)
    for i in range(n):
        for j in range(i + 1, n):
            si, ei = params[int(conf_z[i])]
            sj, ej = params[int(conf_z[j])]
            sigma, eps = 0.5 * (si + sj), np.sqrt(ei * ej)
            d = r[i] - r[j]
            dist = np.linalg.norm(d)
            sr6 = (sigma / dist) ** 6
            energy += 4 * eps * (sr6 * sr6 - sr6)
            # -dE/dr_i
            mag = 24 * eps * (2 * sr6 * sr6 - sr6) / dist**2
            forces[i] += mag * d
            forces[j] -= mag * d
    return energy, forces


SYNTHETIC_BASE = np.array([[0.0, 0.0, 0.0], [1.45, 0.1, 0.0], [2.0, 1.2, 0.15], [2.1, -1.05, 0.3]])


def angle_energy(z, r, reference, k_angle: float) -> tuple[float, np.ndarray]:
    """Three-body term ``k * sum (cos t_jik - cos t0_jik)^2`` over heavy centers ``i``.

    ``t0`` are the angles of ``reference``; forces come from the autodiff engine.
    """
    z = np.asarray(z)
    centers = [i for i in range(len(z)) if z[i] > 1]
    triples = [(i, j, k) for i in centers for j in range(len(z)) for k in range(j + 1, len(z)) if i not in (j, k)]
    if not triples or k_angle == 0:
        return 0.0, np.zeros_like(np.asarray(r, dtype=np.float64))
    ii, jj, kk = (np.array(t) for t in zip(*triples))

    def cosines(pos):
        a = T.take(pos, jj) - T.take(pos, ii)
        b = T.take(pos, kk) - T.take(pos, ii)
        dot = (a * b).sum(axis=-1)
        return dot / T.sqrt((a * a).sum(axis=-1) * (b * b).sum(axis=-1))

    with T.no_grad():
        cos0 = cosines(Tensor(reference)).data
    pos = Tensor(np.asarray(r, dtype=np.float64), requires_grad=True)
    d = cosines(pos) - cos0
    energy = (d * d).sum() * k_angle
    return energy.item(), -np.array(T.grad(energy, pos).data)


def synthetic_pes(z, r, k_angle: float = 0.5) -> tuple[float, np.ndarray]:
    """Pairwise LJ plus a bond-angle term so the energy is not a function of distances alone."""
    e_lj, f_lj = lennard_jones(z, r)
    e_ang, f_ang = angle_energy(z, r, SYNTHETIC_BASE, k_angle)
    return e_lj + e_ang, f_lj + f_ang


def synthetic_lj_dataset(n_confs: int, seed: int = 0, noise: float = 0.1, z=(8, 6, 1, 1),
                         k_angle: float = 0.5) -> Dataset:
    """Thermal-like perturbations of a fixed 4-atom geometry labelled by :func:`synthetic_pes`."""
    rng = np.random.default_rng(seed)
    z = np.asarray(z)
    confs = []
    for _ in range(n_confs):
        r = SYNTHETIC_BASE + rng.normal(scale=noise, size=SYNTHETIC_BASE.shape)
        e, f = synthetic_pes(z, r, k_angle)
        confs.append(MoleculeConf(z, r, e, f))
    return Dataset(confs)


def time_inference(model: GNNLF, confs, batch_size: int = 32, repeats: int = 3) -> float:
    """Median wall-clock milliseconds per molecule for energy+force prediction."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        predict(model, confs, batch_size, forces=True)
        times.append((time.perf_counter() - t0) * 1e3 / max(len(confs), 1))
    return float(np.median(times))
