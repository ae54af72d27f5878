"""Symmetry, gradient and oracle checks run against a model.

Every suite takes a model and returns a :class:`SuiteResult` with a pass flag
and the measured quantities, so reports can be compared across models (for
example a deliberately broken one).
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import frames as fr
from . import tensor as T
from .geometry import MoleculeConf, random_conf, random_rotation
from .model import GNNLF, ModelConfig

SUITES = (
    "equivariance",
    "gradcheck",
    "netforce",
    "cancellation",
    "global_degeneracy",
    "separation",
    "relational_pooling",
    "cutoff_smoothness",
)

TOL_INVARIANT = 1e-10
TOL_EQUIVARIANT = 1e-8
TOL_GRADCHECK = 1e-5
TOL_NET_FORCE = 1e-9
TOL_ZERO_FRAME = 1e-12
TOL_SCHNET_EQUAL = 1e-12
MIN_D1_GAP = 0.1
MIN_ENERGY_GAP = 1e-6
TOL_POOL = 1e-12
MAX_STEP_JUMP = 1e-6


@dataclass
class SuiteResult:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0


def default_model(seed: int = 0) -> GNNLF:
    """Default-sized random model with every projection channel switched on."""
    return GNNLF(ModelConfig(use_d2=True), seed=seed)


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def _sized_conf(rng, n_atoms, species):
    return random_conf(rng, n_atoms, species, box=1.3 * n_atoms ** (1 / 3) + 1.0, min_dist=0.9)


# ----------------------------------------------------------------------
# equivariance


def _edge_lookup(batch, molecule: int) -> dict:
    sel = np.nonzero(batch.molecule_ids[batch.centers] == molecule)[0]
    start = int(np.searchsorted(batch.molecule_ids, molecule))
    return {(int(batch.centers[e]) - start, int(batch.neighbors[e]) - start): int(e) for e in sel}


def check_equivariance(model: GNNLF, n_confs: int = 100, n_transforms: int = 10, seed: int = 0,
                       sizes=(3, 20)) -> SuiteResult:
    """Energies, frames, forces and projections under rotation/reflection, translation and permutation."""
    rng = np.random.default_rng(seed)
    worst = {"energy": 0.0, "forces": 0.0, "frames": 0.0, "d1": 0.0, "d2": 0.0, "d3": 0.0}
    for _ in range(n_confs):
        conf = _sized_conf(rng, int(rng.integers(sizes[0], sizes[1] + 1)), model.config.species)
        transforms = []
        for _ in range(n_transforms):
            q = random_rotation(rng)
            t = rng.normal(scale=5.0, size=3)
            perm = rng.permutation(conf.n_atoms)
            transforms.append((q, perm, conf.transformed(q, t, perm)))
        batch = model.batch([conf] + [tc for _, _, tc in transforms])
        pos = T.Tensor(batch.positions, requires_grad=True)
        out = model.forward(batch, pos)
        forces = -T.grad(out.energy.sum(), pos).data
        n = conf.n_atoms
        e = out.energy.data
        ref_lookup = _edge_lookup(batch, 0)
        worst["energy"] = max(worst["energy"], float(np.max(np.abs(e[1:] - e[0])) / max(1.0, abs(e[0]))))
        for k, (q, perm, _) in enumerate(transforms, start=1):
            rows = slice(k * n, (k + 1) * n)
            worst["forces"] = max(worst["forces"], _rel(forces[rows], forces[:n][perm] @ q.T))
            if out.frames is not None:
                f0 = out.frames.data[:n][perm]
                worst["frames"] = max(worst["frames"], _rel(out.frames.data[rows], f0 @ q.T))
            lookup = _edge_lookup(batch, k)
            new_idx = np.array([lookup[p] for p in sorted(lookup)], dtype=np.int64)
            old_idx = np.array([ref_lookup[(int(perm[i]), int(perm[j]))] for i, j in sorted(lookup)], dtype=np.int64)
            for name, d in out.projections.items():
                if len(new_idx):
                    worst[name] = max(worst[name], _rel(d.data[new_idx], d.data[old_idx]))
    passed = (
        worst["energy"] <= TOL_INVARIANT
        and worst["forces"] <= TOL_EQUIVARIANT
        and worst["frames"] <= TOL_EQUIVARIANT
        and max(worst["d1"], worst["d2"], worst["d3"]) <= TOL_INVARIANT
    )
    return SuiteResult("equivariance", passed, {f"max_err_{k}": v for k, v in worst.items()})


# ----------------------------------------------------------------------
# forces


def force_fd_error(model: GNNLF, conf: MoleculeConf, h: float = 1e-4, eps: float = 1e-12) -> float:
    """Max over coordinates of ``|F - F_fd| / (|F| + eps)`` with central differences."""
    forces = model.predict_forces(conf)
    fd = np.zeros_like(forces)
    base = conf.r.copy()
    for i in range(conf.n_atoms):
        for a in range(3):
            plus, minus = base.copy(), base.copy()
            plus[i, a] += h
            minus[i, a] -= h
            pair = model.batch([MoleculeConf(conf.z, plus), MoleculeConf(conf.z, minus)])
            with T.no_grad():
                ep, em = model.forward(pair).energy.data
            fd[i, a] = -(ep - em) / (2 * h)
    return float(np.max(np.abs(forces - fd) / (np.abs(forces) + eps)))


def check_gradcheck(model: GNNLF, n_confs: int = 20, seed: int = 1, h: float = 1e-4) -> SuiteResult:
    rng = np.random.default_rng(seed)
    errors = [force_fd_error(model, _sized_conf(rng, int(rng.integers(3, 9)), model.config.species), h)
              for _ in range(n_confs)]
    worst = max(errors)
    return SuiteResult("gradcheck", worst <= TOL_GRADCHECK, {"max_rel_err": worst, "h": h, "n_confs": n_confs})


def check_netforce(model: GNNLF, n_confs: int = 20, seed: int = 2) -> SuiteResult:
    rng = np.random.default_rng(seed)
    confs = [_sized_conf(rng, int(rng.integers(2, 16)), model.config.species) for _ in range(n_confs)]
    worst = max(float(np.max(np.abs(model.predict_forces(c).sum(axis=0)))) for c in confs)
    return SuiteResult("netforce", worst <= TOL_NET_FORCE, {"max_abs_net_force": worst})


# ----------------------------------------------------------------------
# symmetric fixtures


def centrosymmetric_fixtures(species=(1, 6, 7, 8)) -> dict[str, tuple[MoleculeConf, int]]:
    """Molecules whose atom ``center`` sees each neighbor mirrored through itself."""
    heavy, light = species[1], species[0]
    octa = np.vstack([np.zeros(3), np.eye(3) * 1.1, -np.eye(3) * 1.1])
    square = np.array([[0, 0, 0], [1.2, 0, 0], [-1.2, 0, 0], [0, 1.2, 0], [0, -1.2, 0]], dtype=float)
    linear = np.array([[0, 0, 0], [0, 0, 1.16], [0, 0, -1.16]], dtype=float)
    v = np.array([0.7, -0.4, 0.9])
    w = np.array([-0.3, 1.1, 0.2])
    mixed = np.array([np.zeros(3), v, -v, w, -w])
    return {
        "linear_triatomic": (MoleculeConf(np.array([heavy, species[-1], species[-1]]), linear), 0),
        "octahedral": (MoleculeConf(np.array([heavy] + [light] * 6), octa), 0),
        "square_planar": (MoleculeConf(np.array([heavy] + [light] * 4), square), 0),
        "skew_pairs": (MoleculeConf(np.array([heavy, light, light, heavy, heavy]), mixed), 0),
    }


def regular_polygon(n: int, radius: float, z: int, center_atom: int | None = None) -> MoleculeConf:
    angles = 2 * np.pi * np.arange(n) / n
    r = np.stack([radius * np.cos(angles), radius * np.sin(angles), np.zeros(n)], axis=1)
    zs = np.full(n, z)
    if center_atom is not None:
        r = np.vstack([np.zeros(3), r])
        zs = np.concatenate([[center_atom], zs])
    return MoleculeConf(zs, r)


def symmetric_fixtures(species=(1, 6, 7, 8)) -> dict[str, MoleculeConf]:
    """Small molecules with a non-trivial point group, all within one cutoff sphere."""
    h, c, n, o = species[0], species[1], species[2], species[-1]
    theta = np.deg2rad(104.5) / 2
    water = np.array([[0, 0, 0], [0.96 * np.sin(theta), 0.96 * np.cos(theta), 0],
                      [-0.96 * np.sin(theta), 0.96 * np.cos(theta), 0]])
    ring = 0.94 * np.array([[np.cos(a), np.sin(a), 0.0] for a in 2 * np.pi * np.arange(3) / 3]) + [0, 0, -0.38]
    ammonia = np.vstack([np.zeros(3), ring])
    return {
        "hexagon": regular_polygon(6, 1.4, c),
        "water": MoleculeConf(np.array([o, h, h]), water),
        "ammonia": MoleculeConf(np.array([n, h, h, h]), ammonia),
        "co2": MoleculeConf(np.array([c, o, o]), np.array([[0, 0, 0], [1.16, 0, 0], [-1.16, 0, 0.0]])),
        "methane_like": MoleculeConf(
            np.array([c, h, h, h, h]),
            np.vstack([np.zeros(3), 0.63 * np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]])]),
        ),
    }


def model_frames(model: GNNLF, conf: MoleculeConf) -> np.ndarray:
    with T.no_grad():
        out = model.forward(model.batch([conf]))
    if out.frames is None:
        raise ValueError("model has no frames (SchNet mode)")
    return np.array(out.frames.data)


def check_cancellation(model: GNNLF) -> SuiteResult:
    norms = {}
    for name, (conf, center) in centrosymmetric_fixtures(model.config.species).items():
        norms[name] = float(np.max(np.abs(model_frames(model, conf)[center])))
    worst = max(norms.values())
    return SuiteResult("cancellation", worst <= TOL_ZERO_FRAME, {"max_abs_frame": worst, **norms})


def check_global_degeneracy(model: GNNLF, n_random: int = 10, seed: int = 3) -> SuiteResult:
    """Symmetric molecules: a rank-deficient local frame implies a rank-deficient global frame.

    Also checks that generic random molecules have full-rank frames at every
    atom whose neighbors are not coplanar.
    """
    metrics: dict = {}
    ok = True
    for name, conf in symmetric_fixtures(model.config.species).items():
        frames = model_frames(model, conf)
        local = [fr.frame_rank(f) for f in frames]
        glob = fr.frame_rank(fr.global_frame(frames).data)
        metrics[name] = {"local_ranks": local, "global_rank": glob}
        if min(local) < 3 and glob >= 3:
            ok = False
    if metrics["hexagon"]["global_rank"] >= 3:
        ok = False
    rng = np.random.default_rng(seed)
    checked, failures = 0, 0
    for _ in range(n_random):
        conf = _sized_conf(rng, int(rng.integers(5, 12)), model.config.species)
        frames = model_frames(model, conf)
        dist = np.linalg.norm(conf.r[:, None] - conf.r[None], axis=-1)
        for i in range(conf.n_atoms):
            nbrs = np.nonzero((dist[i] < model.config.cutoff) & (np.arange(conf.n_atoms) != i))[0]
            if len(nbrs) >= 3 and np.linalg.matrix_rank(conf.r[nbrs] - conf.r[i], tol=1e-6) == 3:
                checked += 1
                failures += fr.frame_rank(frames[i]) < 3
    metrics["random_atoms_checked"] = checked
    metrics["random_rank_deficient"] = failures
    return SuiteResult("global_degeneracy", ok and failures == 0 and checked > 0, metrics)


# ----------------------------------------------------------------------
# separation of equal-distance environments


def angle_pair(bond: float = 3.0, angles=(90.0, 120.0), species=(1, 6, 7, 8)) -> list[MoleculeConf]:
    """Center atom with two equal bonds at different angles.

    With ``bond = 3`` and cutoff 4 the outer atoms are out of each other's
    range, so every atom sees the same distances in both molecules.  With
    ``bond = 1`` only the center atom does.
    """
    confs = []
    for deg in angles:
        a = np.deg2rad(deg)
        r = np.array([[0.0, 0.0, 0.0], [bond, 0.0, 0.0], [bond * np.cos(a), bond * np.sin(a), 0.0]])
        confs.append(MoleculeConf(np.array([species[1], species[0], species[0]]), r))
    return confs


def separation_metrics(model: GNNLF, pair: list[MoleculeConf]) -> dict:
    """Gaps between the two molecules of ``pair``.

    ``d1_signed_delta`` is the entry of largest magnitude in the edge-wise
    difference of ``d1`` (both molecules list their edges in the same order).
    """
    with T.no_grad():
        outs = [model.forward(model.batch([c])) for c in pair]
    result = {
        "energy_gap": float(abs(outs[0].energy.item() - outs[1].energy.item())),
        "embedding_gap": float(np.max(np.abs(outs[0].node_scalars.data - outs[1].node_scalars.data))),
        "center_embedding_gap": float(np.max(np.abs(outs[0].embedding.data[0] - outs[1].embedding.data[0]))),
    }
    if "d1" in outs[0].projections:
        delta = outs[0].projections["d1"].data - outs[1].projections["d1"].data
        k = np.unravel_index(np.argmax(np.abs(delta)), delta.shape)
        result["d1_gap"] = float(np.abs(delta[k]))
        result["d1_signed_delta"] = float(delta[k])
    return result


def check_separation(model: GNNLF, seeds=range(10), cutoff: float = 4.0) -> SuiteResult:
    """Distances-only models cannot tell the pairs apart; frame projections can.

    Fresh models with the configuration of ``model`` (at ``cutoff``) are
    drawn for each seed.  On the far pair (bond 3) SchNet mode must give
    identical node scalars and the full model distinct energies.  On the
    near pair (bond 1) SchNet mode must give identical center embeddings and
    ``d1`` must differ.
    """
    base = {**model.config.to_dict(), "cutoff": cutoff}
    far = angle_pair(bond=3.0, species=model.config.species)
    near = angle_pair(bond=1.0, species=model.config.species)
    schnet_gap, schnet_center_gap, energy_gaps, d1 = 0.0, 0.0, [], []
    for s in seeds:
        sch = GNNLF(ModelConfig.from_dict({**base, "schnet_mode": True}), seed=s)
        m_far = separation_metrics(sch, far)
        schnet_gap = max(schnet_gap, m_far["embedding_gap"], m_far["energy_gap"])
        schnet_center_gap = max(schnet_center_gap, separation_metrics(sch, near)["center_embedding_gap"])
        full = GNNLF(ModelConfig.from_dict({**base, "schnet_mode": False}), seed=s)
        full._d1_sign = model._d1_sign
        energy_gaps.append(separation_metrics(full, far)["energy_gap"])
        d1.append(separation_metrics(full, near)["d1_signed_delta"])
    metrics = {
        "schnet_max_gap": schnet_gap,
        "schnet_center_embedding_gap": schnet_center_gap,
        "min_energy_gap": float(min(energy_gaps)),
        "min_d1_gap": float(min(abs(x) for x in d1)),
        "d1_signed_delta": d1,
    }
    passed = (
        schnet_gap <= TOL_SCHNET_EQUAL
        and schnet_center_gap <= TOL_SCHNET_EQUAL
        and metrics["min_energy_gap"] >= MIN_ENERGY_GAP
        and metrics["min_d1_gap"] >= MIN_D1_GAP
    )
    return SuiteResult("separation", passed, metrics)


# ----------------------------------------------------------------------
# relational pooling oracle


def _heap_permutations(n: int):
    """Heap's algorithm; a different visiting order from itertools."""
    a = list(range(n))
    c = [0] * n
    yield tuple(a)
    i = 0
    while i < n:
        if c[i] < i:
            j = 0 if i % 2 == 0 else c[i]
            a[j], a[i] = a[i], a[j]
            yield tuple(a)
            c[i] += 1
            i = 0
        else:
            c[i] = 0
            i += 1


def check_relational_pooling(n_confs: int = 10, seed: int = 4, max_atoms: int = 5) -> SuiteResult:
    rng = np.random.default_rng(seed)
    readout = fr.IdentityReadout(hidden=8, seed=seed)
    worst_oracle, bitwise = 0.0, True
    for k in range(n_confs):
        n = 1 + k % max_atoms
        conf = random_conf(rng, n, box=3.0)
        pooled = fr.relational_pool_reference(conf, readout, max_atoms=max_atoms)
        values = [readout(conf.z[list(p)], conf.r[list(p)]) for p in _heap_permutations(n)]
        oracle = sum(values) / len(values)
        worst_oracle = max(worst_oracle, abs(pooled - oracle))
        for _ in range(3):
            permuted = conf.transformed(permutation=rng.permutation(n))
            bitwise &= fr.relational_pool_reference(permuted, readout, max_atoms=max_atoms) == pooled
    passed = bitwise and worst_oracle <= TOL_POOL
    return SuiteResult("relational_pooling", passed, {"max_oracle_err": worst_oracle, "bitwise_invariant": bitwise})


# ----------------------------------------------------------------------
# cutoff smoothness


def cutoff_sweep(model: GNNLF, conf: MoleculeConf, anchor: int, direction, span: float = 5e-3,
                 step: float = 1e-4) -> tuple[np.ndarray, np.ndarray | None]:
    """Energies ``(S,)`` and frames ``(S, N, F, 3)`` as a new atom crosses the cutoff of ``anchor``.

    The new atom moves along ``direction`` from ``anchor`` in steps of
    ``step`` over ``r_c +- span``.  Frames are ``None`` in SchNet mode.
    """
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.linalg.norm(u)
    rc = model.config.cutoff
    offsets = rc + np.arange(-span, span + step / 2, step)
    z = np.concatenate([conf.z, [conf.z[anchor]]])
    confs = [MoleculeConf(z, np.vstack([conf.r, conf.r[anchor] + d * u])) for d in offsets]
    with T.no_grad():
        out = model.forward(model.batch(confs))
    energies = np.array(out.energy.data)
    if out.frames is None:
        return energies, None
    return energies, np.array(out.frames.data).reshape(len(confs), len(z), *out.frames.shape[1:])


def check_cutoff_smoothness(model: GNNLF, n_trials: int = 5, seed: int = 5) -> SuiteResult:
    """Largest per-step change of every frame entry (and of the energy) across ``r_c``."""
    rng = np.random.default_rng(seed)
    frame_jump, energy_jump = 0.0, 0.0
    for k in range(n_trials):
        if k == 0:
            conf, anchor = MoleculeConf(np.array([model.config.species[1]]), np.zeros((1, 3))), 0
        else:
            conf = random_conf(rng, int(rng.integers(2, 5)), model.config.species, box=2.0)
            anchor = int(np.argmax(conf.r[:, 0]))
            if np.sort(conf.r[:, 0])[-2] > conf.r[anchor, 0] - 0.05:
                continue
        energies, frames = cutoff_sweep(model, conf, anchor, [1.0, 0.0, 0.0])
        energy_jump = max(energy_jump, float(np.max(np.abs(np.diff(energies)))))
        if frames is not None:
            frame_jump = max(frame_jump, float(np.max(np.abs(np.diff(frames, axis=0)))))
    metrics = {"max_frame_step_change": frame_jump, "max_energy_step_change": energy_jump, "step": 1e-4}
    return SuiteResult("cutoff_smoothness", frame_jump < MAX_STEP_JUMP and energy_jump < MAX_STEP_JUMP, metrics)


# ----------------------------------------------------------------------

RUNNERS: dict[str, Callable[[GNNLF], SuiteResult]] = {
    "equivariance": check_equivariance,
    "gradcheck": check_gradcheck,
    "netforce": check_netforce,
    "cancellation": check_cancellation,
    "global_degeneracy": check_global_degeneracy,
    "separation": check_separation,
    "relational_pooling": lambda model: check_relational_pooling(),
    "cutoff_smoothness": check_cutoff_smoothness,
}


def run_suites(model: GNNLF, suites=None) -> dict:
    """Run the selected suites (all by default) and return a JSON-serializable report."""
    selected = list(SUITES if not suites else suites)
    unknown = [s for s in selected if s not in RUNNERS]
    if unknown:
        raise ValueError(f"unknown suites {unknown}; choose from {list(SUITES)}")
    results = []
    for name in selected:
        t0 = time.perf_counter()
        res = RUNNERS[name](model)
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return {
        "passed": all(r.passed for r in results),
        "suites": {r.name: {**asdict(r), "passed": bool(r.passed)} for r in results},
    }
