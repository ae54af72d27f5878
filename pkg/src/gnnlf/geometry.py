"""Molecular conformations, neighbor graphs, cutoff weights and radial bases."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import tensor as T
from .tensor import SegmentIndex, Tensor

MIN_DISTANCE = 1e-6


class CoincidentAtomsError(ValueError):
    pass


@dataclass
class MoleculeConf:
    """One conformation: atomic numbers ``z`` and coordinates ``r`` in Ångström.

    ``energy`` is in kcal/mol and ``forces`` in kcal/mol/Å when present.
    ``properties`` holds any other per-molecule scalar targets.
    """

    z: np.ndarray
    r: np.ndarray
    energy: float | None = None
    forces: np.ndarray | None = None
    properties: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.int64).reshape(-1)
        self.r = np.asarray(self.r, dtype=np.float64)
        n = self.z.size
        if n < 1:
            raise ValueError("a conformation needs at least one atom")
        if self.r.shape != (n, 3):
            raise ValueError(f"coordinates must have shape ({n}, 3), got {self.r.shape}")
        if not np.isfinite(self.r).all():
            raise ValueError("coordinates must be finite")
        if self.energy is not None:
            self.energy = float(self.energy)
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != (n, 3):
                raise ValueError(f"forces must have shape ({n}, 3), got {self.forces.shape}")
        if n > 1:
            d = pairwise_distances(self.r)
            d[np.diag_indices(n)] = np.inf
            i, j = np.unravel_index(np.argmin(d), d.shape)
            if d[i, j] <= MIN_DISTANCE:
                raise CoincidentAtomsError(f"atoms {i} and {j} are closer than {MIN_DISTANCE} Å")

    @property
    def n_atoms(self) -> int:
        return self.z.size

    def transformed(self, rotation=None, translation=None, permutation=None) -> "MoleculeConf":
        """Apply ``r -> r Qᵀ + t`` and reorder atoms; forces rotate along."""
        r = self.r
        forces = self.forces
        if rotation is not None:
            q = np.asarray(rotation, dtype=np.float64)
            r = r @ q.T
            forces = None if forces is None else forces @ q.T
        if translation is not None:
            r = r + np.asarray(translation, dtype=np.float64)
        z = self.z
        if permutation is not None:
            p = np.asarray(permutation)
            z, r = z[p], r[p]
            forces = None if forces is None else forces[p]
        return MoleculeConf(z, r, self.energy, forces, dict(self.properties))


def pairwise_distances(r: np.ndarray) -> np.ndarray:
    diff = r[None, :, :] - r[:, None, :]
    return np.sqrt((diff**2).sum(-1))


@dataclass
class NeighborGraph:
    """Directed edges ``(center, neighbor)`` with ``0 < r_ij < r_c``.

    ``unit_dir`` points from the center atom to the neighbor.  Edge order is
    lexicographic in ``(center, neighbor)``.
    """

    n_atoms: int
    centers: np.ndarray
    neighbors: np.ndarray
    dist: np.ndarray
    unit_dir: np.ndarray
    edge_weight: np.ndarray
    rbf: np.ndarray | None
    cutoff: float

    @property
    def n_edges(self) -> int:
        return self.centers.size

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.centers.tolist(), self.neighbors.tolist()))

    @cached_property
    def center_seg(self) -> SegmentIndex:
        return SegmentIndex(self.centers, self.n_atoms)

    @cached_property
    def neighbor_seg(self) -> SegmentIndex:
        return SegmentIndex(self.neighbors, self.n_atoms)


def find_edges(r: np.ndarray, r_c: float) -> tuple[np.ndarray, np.ndarray]:
    """All ordered pairs within the cutoff, by brute force."""
    if r_c <= 0:
        raise ValueError("cutoff radius must be positive")
    r = np.asarray(r, dtype=np.float64)
    n = r.shape[0]
    d = pairwise_distances(r)
    off = ~np.eye(n, dtype=bool)
    if n > 1 and d[off].min() <= MIN_DISTANCE:
        raise CoincidentAtomsError(f"two atoms are closer than {MIN_DISTANCE} Å")
    centers, neighbors = np.nonzero(off & (d < r_c))
    return centers.astype(np.int64), neighbors.astype(np.int64)


def build_neighbor_graph(conf: MoleculeConf, r_c: float, betas=None, mus=None) -> NeighborGraph:
    """Neighbor graph of one conformation.

    RBF features are computed when ``betas``/``mus`` are given, otherwise with
    the default initialization for 32 bases.
    """
    centers, neighbors = find_edges(conf.r, r_c)
    vec = conf.r[neighbors] - conf.r[centers]
    dist = np.sqrt((vec**2).sum(-1))
    unit = vec / dist[:, None]
    if betas is None or mus is None:
        betas, mus = rbf_init(32, r_c)
    return NeighborGraph(
        n_atoms=conf.n_atoms,
        centers=centers,
        neighbors=neighbors,
        dist=dist,
        unit_dir=unit,
        edge_weight=cutoff_weight(dist, r_c),
        rbf=rbf_expand(dist, betas, mus),
        cutoff=float(r_c),
    )


def cutoff_weight(r, r_c: float):
    """Cosine cutoff ``0.5 (1 + cos(pi r / r_c))`` inside ``r_c``, zero outside.

    Accepts floats, arrays or tensors.  Tensors are assumed to hold
    in-cutoff distances only (edges are filtered when the graph is built).
    """
    if isinstance(r, Tensor):
        return (T.cos(r * (np.pi / r_c)) + 1.0) * 0.5
    r = np.asarray(r, dtype=np.float64)
    w = np.where(r < r_c, 0.5 * (np.cos(np.pi * np.minimum(r, r_c) / r_c) + 1.0), 0.0)
    return float(w) if w.ndim == 0 else w


def rbf_expand(r, betas, mus):
    """``exp(-beta_k (exp(-r) - mu_k)^2)`` for each basis k (last axis)."""
    if isinstance(r, Tensor) or isinstance(betas, Tensor) or isinstance(mus, Tensor):
        r = T.as_tensor(r)
        if r.ndim == 1:
            r = r.reshape(-1, 1)
        mus = T.as_tensor(mus)
        diff = T.broadcast_to(T.exp(-r), (r.shape[0], mus.shape[-1])) - mus
        return T.exp(-(betas * diff * diff))
    r = np.asarray(r, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    mus = np.asarray(mus, dtype=np.float64)
    return np.exp(-betas * (np.exp(-r)[..., None] - mus) ** 2)


def rbf_init(k: int, r_c: float) -> tuple[np.ndarray, np.ndarray]:
    """Centers evenly spaced in ``[exp(-r_c), 1]`` and a shared width."""
    if k < 1:
        raise ValueError("need at least one radial basis")
    lo = np.exp(-r_c)
    mus = np.array([(lo + 1.0) / 2.0]) if k == 1 else np.linspace(lo, 1.0, k)
    betas = np.full(k, (2.0 / k * (1.0 - lo)) ** -2)
    return betas, mus


def random_rotation(rng: np.random.Generator, reflect: bool | None = None) -> np.ndarray:
    """Haar-random orthogonal matrix; ``reflect`` forces the determinant sign."""
    q, rr = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(rr))
    if reflect is None:
        reflect = bool(rng.integers(2))
    if (np.linalg.det(q) < 0) != reflect:
        q[:, 0] = -q[:, 0]
    return q


def random_conf(
    rng: np.random.Generator,
    n_atoms: int,
    species=(1, 6, 7, 8),
    box: float = 3.0,
    min_dist: float = 0.8,
) -> MoleculeConf:
    """Random atoms in a cube with a minimum separation (rejection sampling)."""
    pts: list[np.ndarray] = []
    while len(pts) < n_atoms:
        p = rng.uniform(-box / 2, box / 2, size=3)
        if all(np.linalg.norm(p - q) >= min_dist for q in pts):
            pts.append(p)
    z = rng.choice(np.asarray(species), size=n_atoms)
    return MoleculeConf(z, np.array(pts))
