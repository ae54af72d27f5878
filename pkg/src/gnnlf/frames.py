"""Local frames and the scalar projections built from them.

A frame ``E_i`` is an ``F x 3`` matrix per atom whose rows rotate with the
molecule.  Projecting unit edge directions and neighboring frames onto it
yields rotation-invariant edge features (``d1``, ``d2``, ``d3``).

The second half of the module is an exact but exponential-cost reference:
orthonormal frames from node-identity ordering, averaged over every atom
permutation.  It is only meant as a test oracle for small molecules.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable

import numpy as np

from . import tensor as T
from .geometry import MoleculeConf
from .tensor import SegmentIndex, Tensor

RANK_RTOL = 1e-7
RANK_ATOL = 1e-12


def _edge_dirs(graph, unit_dir):
    u = T.as_tensor(graph.unit_dir if unit_dir is None else unit_dir)
    return u.reshape(u.shape[0], 1, 3)


def generate_frames(graph, node_scalars, filters, unit_dir=None, edge_weight=None) -> Tensor:
    """Sum of ``w_ij (f_ij * s_j) o u_ij`` over incoming edges -> ``(N, F, 3)``.

    ``u_ij`` is the unit vector from atom i to neighbor j.  Atoms without
    neighbors get an all-zero frame.
    """
    s = T.as_tensor(node_scalars)
    f = T.as_tensor(filters)
    n_edges = len(graph.centers)
    if f.shape[0] != n_edges or f.shape[-1] != s.shape[-1]:
        raise ValueError(f"filters {f.shape} do not match {n_edges} edges x F={s.shape[-1]}")
    w = T.as_tensor(graph.edge_weight if edge_weight is None else edge_weight)
    if w.ndim == 1:
        w = w.reshape(-1, 1)
    coef = w * (f * T.take(s, graph.neighbor_seg))
    width = coef.shape[-1]
    outer = T.broadcast_to(coef.reshape(n_edges, width, 1), (n_edges, width, 3)) * _edge_dirs(graph, unit_dir)
    return T.segment_sum(outer, graph.center_seg)


def _project(frames_per_edge: Tensor, dirs: Tensor) -> Tensor:
    return (frames_per_edge * dirs).sum(axis=-1)


def project_d1(graph, frames, unit_dir=None) -> Tensor:
    """Edge direction projected on the center atom's frame, ``(E, F)``."""
    frames = T.as_tensor(frames)
    return _project(T.take(frames, graph.center_seg), _edge_dirs(graph, unit_dir))


def project_d2(graph, frames, unit_dir=None) -> Tensor:
    """Edge direction projected on the neighbor atom's frame, ``(E, F)``."""
    frames = T.as_tensor(frames)
    return _project(T.take(frames, graph.neighbor_seg), _edge_dirs(graph, unit_dir))


def mix_frames(frames, weight) -> Tensor:
    """Apply ``W`` to every frame: ``(W E_n)`` for all atoms n."""
    frames = T.as_tensor(frames)
    weight = T.as_tensor(weight)
    n, f, _ = frames.shape
    if weight.shape != (f, f):
        raise ValueError(f"mixing matrix must be {f}x{f}, got {weight.shape}")
    flat = frames.transpose((0, 2, 1)).reshape(n * 3, f)
    return (flat @ weight.T).reshape(n, 3, f).transpose((0, 2, 1))


def project_d3(graph, frames, w1, w2) -> Tensor:
    """Row-wise inner products of ``W1 E_j`` and ``W2 E_i`` per edge, ``(E, F)``."""
    a = mix_frames(frames, w1)
    b = mix_frames(frames, w2)
    return _project(T.take(a, graph.neighbor_seg), T.take(b, graph.center_seg))


def global_frame(frames, molecule_seg: SegmentIndex | None = None) -> Tensor:
    """Sum of the local frames of each molecule (all atoms when no ids are given)."""
    frames = T.as_tensor(frames)
    if molecule_seg is None:
        return frames.sum(axis=0)
    return T.segment_sum(frames, molecule_seg)


def frame_rank(frame, tol: float = RANK_RTOL) -> int:
    """Numerical rank from singular values relative to the largest one."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = np.asarray(getattr(frame, "data", frame), dtype=np.float64)
    if m.size == 0:
        return 0
    sv = np.linalg.svd(m, compute_uv=False)
    if sv.max() < RANK_ATOL:
        return 0
    return int(np.sum(sv > tol * sv.max()))


def project(x, frame) -> np.ndarray:
    """``x Eᵀ``: coordinates of each row of ``x`` along the frame rows."""
    return np.asarray(x, dtype=np.float64) @ np.asarray(frame, dtype=np.float64).T


def unproject(p, frame) -> np.ndarray:
    """Inverse of :func:`project` for a full-rank 3x3 frame."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (3, 3) or frame_rank(frame, 1e-9) < 3:
        raise np.linalg.LinAlgError("frame must be an invertible 3x3 matrix")
    return np.linalg.solve(frame, np.asarray(p, dtype=np.float64).T).T


def project_and_invert(x, frame) -> np.ndarray:
    return unproject(project(x, frame), frame)


# ----------------------------------------------------------------------
# node-identity frames and relational pooling


def node_identity_frame(conf, center: int, tol: float = 1e-9) -> np.ndarray:
    """Orthonormal frame from relative positions scanned in atom-index order.

    Each ``r_j - r_center`` that is linearly independent of the rows taken so
    far is orthogonalized against them and appended; unused rows stay zero.
    """
    r = conf.r if isinstance(conf, MoleculeConf) else np.asarray(conf, dtype=np.float64)
    rows: list[np.ndarray] = []
    for j in range(r.shape[0]):
        if j == center or len(rows) == 3:
            continue
        v = r[j] - r[center]
        res = v.copy()
        for e in rows:
            res = res - (res @ e) * e
        norm = np.linalg.norm(res)
        if norm > tol * max(np.linalg.norm(v), 1.0):
            rows.append(res / norm)
    frame = np.zeros((3, 3))
    if rows:
        frame[: len(rows)] = np.array(rows)
    return frame


class IdentityReadout:
    """One message-passing layer with node-identity features, read at atom 0.

    Neighbor messages are ``phi([P_E(r_j - r_0), emb(z_j), j])`` with ``E`` the
    node-identity frame of atom 0; the sum goes through ``rho`` and a linear
    readout.  The result depends on atom order, which is what relational
    pooling removes.
    """

    def __init__(self, hidden: int = 8, seed: int = 0, n_species: int = 119):
        rng = np.random.default_rng(seed)
        emb_dim = 4
        self.embedding = rng.normal(size=(n_species, emb_dim))
        d_in = 3 + emb_dim + 1
        self.w_phi = rng.normal(size=(d_in, hidden)) / np.sqrt(d_in)
        self.b_phi = rng.normal(size=hidden) * 0.1
        self.w_rho = rng.normal(size=(hidden, hidden)) / np.sqrt(hidden)
        self.b_rho = rng.normal(size=hidden) * 0.1
        self.w_self = rng.normal(size=emb_dim + 1)
        self.w_out = rng.normal(size=hidden)

    def __call__(self, z, r) -> float:
        z = np.asarray(z)
        r = np.asarray(r, dtype=np.float64)
        frame = node_identity_frame(r, 0)
        ident = np.arange(len(z), dtype=np.float64)
        agg = np.zeros(self.w_phi.shape[1])
        for j in range(1, len(z)):
            x = np.concatenate([project(r[j] - r[0], frame), self.embedding[z[j]], ident[j : j + 1]])
            agg = agg + np.tanh(x @ self.w_phi + self.b_phi)
        hidden = np.tanh(agg @ self.w_rho + self.b_rho)
        own = np.concatenate([self.embedding[z[0]], ident[:1]])
        return float(hidden @ self.w_out + own @ self.w_self)


def relational_pool_reference(
    conf: MoleculeConf, model_eval: Callable[[np.ndarray, np.ndarray], float], max_atoms: int = 6
) -> float:
    """Average of ``model_eval`` over every reordering of the atoms.

    The terms are combined with ``math.fsum`` (exactly rounded), so the result
    does not depend on the order in which permutations are visited and is
    bitwise invariant to permuting the input.
    """
    n = conf.n_atoms
    if n > max_atoms:
        raise ValueError(f"relational pooling enumerates {n}! orderings; limit is {max_atoms} atoms")
    values = [model_eval(conf.z[list(p)], conf.r[list(p)]) for p in itertools.permutations(range(n))]
    return math.fsum(values) / len(values)
