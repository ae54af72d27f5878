"""The local-frame message-passing network for molecular energies and forces.

Pipeline per batch of molecules:

1. edge features from coordinates (distance, unit direction, cosine cutoff
   weight, radial basis expansion);
2. neighborhood embedding of atom types;
3. per-atom frames and their projections ``d1`` (edge on center frame),
   ``d2`` (edge on neighbor frame) and ``d3`` (frame on frame);
4. decomposed filters ``g1(rbf) * g2(d1, d2, d3)``, optionally shared across
   layers;
5. residual message-passing layers and a sum-pooled linear readout.

Forces are the negative coordinate gradient of the energy.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import elements
from . import frames as fr
from . import tensor as T
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .geometry import MoleculeConf, cutoff_weight, find_edges, rbf_expand, rbf_init
from .tensor import SegmentIndex, Tensor

CUTOFF_RANGE = (4.0, 12.0)
TARGETS = ("energy", "dipole", "r2")


class UnknownSpeciesError(KeyError):
    pass


@dataclass
class ModelConfig:
    hidden: int = 64
    rbf: int = 32
    layers: int = 4
    cutoff: float = 5.0
    use_d2: bool = False
    use_d3: bool = True
    share_filters: bool = True
    schnet_mode: bool = False
    global_frame_mode: bool = False
    species: tuple = (1, 6, 7, 8)
    species_offsets: bool = True
    target: str = "energy"

    def __post_init__(self):
        for name in ("hidden", "rbf", "layers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
            setattr(self, name, int(getattr(self, name)))
        self.cutoff = float(self.cutoff)
        lo, hi = CUTOFF_RANGE
        if not lo <= self.cutoff <= hi:
            raise ValueError(f"cutoff must lie in [{lo}, {hi}] Å, got {self.cutoff}")
        self.species = tuple(sorted({int(z) for z in self.species}))
        if not self.species or self.species[0] < 1:
            raise ValueError("species must be a non-empty list of atomic numbers")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.schnet_mode:
            self.use_d2 = False
            self.use_d3 = False

    @property
    def projection_width(self) -> int:
        return self.hidden * (1 + int(self.use_d2) + int(self.use_d3))

    @property
    def n_filter_sets(self) -> int:
        return 1 if self.share_filters else self.layers

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["species"] = list(self.species)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class Batch:
    """Several molecules merged into one disjoint graph.

    Atom, edge and molecule indices are offset so no edge crosses molecules.
    """

    def __init__(
        self,
        confs: Sequence[MoleculeConf],
        cutoff: float,
        species: Sequence[int],
        edges: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
    ):
        if not confs:
            raise ValueError("a batch needs at least one conformation")
        lookup = {z: k for k, z in enumerate(species)}
        zs, rs, mol, ctr, nbr = [], [], [], [], []
        offset = 0
        for m, conf in enumerate(confs):
            unknown = sorted(set(conf.z.tolist()) - lookup.keys())
            if unknown:
                raise UnknownSpeciesError(
                    f"atomic numbers {unknown} are not in the model's species {list(species)}"
                )
            c, n = find_edges(conf.r, cutoff) if edges is None else edges[m]
            zs.append(conf.z)
            rs.append(conf.r)
            mol.append(np.full(conf.n_atoms, m))
            ctr.append(c + offset)
            nbr.append(n + offset)
            offset += conf.n_atoms
        self.confs = list(confs)
        self.z = np.concatenate(zs)
        self.positions = np.concatenate(rs)
        self.n_atoms = offset
        self.n_molecules = len(confs)
        self.centers = np.concatenate(ctr).astype(np.int64)
        self.neighbors = np.concatenate(nbr).astype(np.int64)
        self.molecule_ids = np.concatenate(mol).astype(np.int64)
        self.atoms_per_molecule = np.array([c.n_atoms for c in confs], dtype=np.float64)
        species_idx = np.array([lookup[z] for z in self.z.tolist()], dtype=np.int64)
        self.species_idx = species_idx
        self.species_seg = SegmentIndex(species_idx, len(species))
        self.neighbor_species_seg = SegmentIndex(species_idx[self.neighbors], len(species))
        self.center_seg = SegmentIndex(self.centers, self.n_atoms)
        self.neighbor_seg = SegmentIndex(self.neighbors, self.n_atoms)
        self.molecule_seg = SegmentIndex(self.molecule_ids, self.n_molecules)

    @property
    def n_edges(self) -> int:
        return self.centers.size


@dataclass
class EdgeFeatures:
    """Differentiable per-edge geometry of a batch."""

    centers: np.ndarray
    center_seg: SegmentIndex
    neighbor_seg: SegmentIndex
    n_atoms: int
    dist: Tensor  # (E, 1)
    unit_dir: Tensor  # (E, 3), center -> neighbor
    edge_weight: Tensor  # (E, 1)
    rbf: Tensor  # (E, K)


@dataclass
class ModelOutput:
    energy: Tensor
    node_scalars: Tensor
    embedding: Tensor
    positions: Tensor
    edges: EdgeFeatures
    frames: Tensor | None = None
    projections: dict = field(default_factory=dict)
    filters: list = field(default_factory=list)


def linear(x: Tensor, params: dict, name: str) -> Tensor:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def edge_features(batch: Batch, positions: Tensor, params: dict, cutoff: float) -> EdgeFeatures:
    vec = T.take(positions, batch.neighbor_seg) - T.take(positions, batch.center_seg)
    dist = T.sqrt((vec * vec).sum(axis=-1, keepdims=True))
    return EdgeFeatures(
        centers=batch.centers,
        center_seg=batch.center_seg,
        neighbor_seg=batch.neighbor_seg,
        n_atoms=batch.n_atoms,
        dist=dist,
        unit_dir=vec / dist,
        edge_weight=cutoff_weight(dist, cutoff),
        rbf=rbf_expand(dist, params["rbf.betas"], params["rbf.mus"]),
    )


def embed_atoms(batch: Batch, edges: EdgeFeatures, params: dict) -> Tensor:
    """``Emb1(z_i) + sum_j w_ij Emb2(z_j) * f(rbf_ij)`` -> ``(N, F)``.

    The cutoff weight keeps the sum continuous as atoms cross ``r_c``.
    """
    own = T.take(params["embed.self"], batch.species_seg)
    nbr = T.take(params["embed.neighbor"], batch.neighbor_species_seg)
    msg = edges.edge_weight * (nbr * linear(edges.rbf, params, "embed.filter"))
    return own + T.segment_sum(msg, edges.center_seg)


def compute_projections(edges: EdgeFeatures, frames: Tensor, params: dict, config: ModelConfig, d1_sign: float = 1.0) -> dict:
    out = {"d1": fr.project_d1(edges, frames, edges.unit_dir)}
    if d1_sign != 1.0:
        out["d1"] = out["d1"] * d1_sign
    if config.use_d2:
        out["d2"] = fr.project_d2(edges, frames, edges.unit_dir)
    if config.use_d3:
        out["d3"] = fr.project_d3(edges, frames, params["frame.w1"], params["frame.w2"])
    return out


def build_filters(edges: EdgeFeatures, projections: dict, params: dict, config: ModelConfig) -> list[Tensor]:
    """One ``(E, F)`` filter per layer: ``g1(rbf) * g2(d1, d2, d3)``.

    With shared filters every layer rebuilds the filter from the single
    parameter set, so the autodiff graph matches an unshared model with
    cloned weights and forces agree bit for bit. In SchNet mode the filter
    is ``g1(rbf)`` alone.
    """
    sets = [0 if config.share_filters else layer for layer in range(config.layers)]
    if config.schnet_mode:
        return [linear(edges.rbf, params, f"filter{k}.g1") for k in sets]
    names = ["d1"] + (["d2"] if config.use_d2 else []) + (["d3"] if config.use_d3 else [])
    missing = [n for n in names if n not in projections]
    if missing:
        raise ValueError(f"projections {missing} are required by the configuration")
    d = T.concat([projections[n] for n in names], axis=-1)
    filters = []
    for k in sets:
        g1 = linear(edges.rbf, params, f"filter{k}.g1")
        g2 = linear(T.silu(linear(d, params, f"filter{k}.g2a")), params, f"filter{k}.g2b")
        filters.append(g1 * g2)
    return filters


def message_pass_layer(s: Tensor, edges: EdgeFeatures, filters: Tensor, params: dict, layer: int) -> Tensor:
    """Messages ``w_ij (f_ij * s_j)`` summed per center, then a residual MLP update."""
    msg = edges.edge_weight * (filters * T.take(s, edges.neighbor_seg))
    agg = T.segment_sum(msg, edges.center_seg)
    update = linear(T.silu(linear(agg, params, f"layer{layer}.a")), params, f"layer{layer}.b")
    return s + update


class GNNLF:
    """Local-frame GNN with trainable parameters held as leaf tensors."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.energy_scale = 1.0
        self.atom_offset = 0.0
        self.normalization_note = "none"
        self._d1_sign = 1.0
        self.params = self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------------
    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c = self.config
        f, k, s = c.hidden, c.rbf, len(c.species)
        arrays: dict[str, np.ndarray] = {}

        def dense(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            arrays[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            arrays[f"{name}.bias"] = rng.uniform(-bound, bound, size=(fan_out,))

        betas, mus = rbf_init(k, c.cutoff)
        arrays["rbf.betas"] = betas
        arrays["rbf.mus"] = mus
        arrays["embed.self"] = rng.normal(size=(s, f))
        arrays["embed.neighbor"] = rng.normal(size=(s, f))
        dense("embed.filter", k, f)
        if not c.schnet_mode:
            dense("frame.filter", k, f)
            if c.use_d3:
                bound = 1.0 / np.sqrt(f)
                arrays["frame.w1"] = rng.uniform(-bound, bound, size=(f, f))
                arrays["frame.w2"] = rng.uniform(-bound, bound, size=(f, f))
        for n in range(c.n_filter_sets):
            dense(f"filter{n}.g1", k, f)
            if not c.schnet_mode:
                dense(f"filter{n}.g2a", c.projection_width, f)
                dense(f"filter{n}.g2b", f, f)
        for layer in range(c.layers):
            dense(f"layer{layer}.a", f, f)
            dense(f"layer{layer}.b", f, f)
        dense("head.energy", f, 1)
        arrays["head.species_shift"] = np.zeros(s)
        dense("head.charge", f, 1)
        dense("head.extent", f, 1)
        return {name: Tensor(a, requires_grad=True, name=name) for name, a in arrays.items()}

    def trainable(self) -> dict[str, Tensor]:
        p = dict(self.params)
        if not self.config.species_offsets:
            p.pop("head.species_shift")
        return p

    def filter_parameter_count(self) -> int:
        names = [n for n in self.params if n.startswith("filter")]
        return int(sum(self.params[n].size for n in names))

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # ------------------------------------------------------------------
    def batch(self, confs: Sequence[MoleculeConf], edges=None) -> Batch:
        return Batch(confs, self.config.cutoff, self.config.species, edges)

    def forward(self, batch: Batch, positions: Tensor | None = None) -> ModelOutput:
        c = self.config
        p = self.params
        if positions is None:
            positions = Tensor(batch.positions)
        edges = edge_features(batch, positions, p, c.cutoff)
        s0 = embed_atoms(batch, edges, p)
        frames = None
        projections: dict = {}
        if not c.schnet_mode:
            frame_filter = linear(edges.rbf, p, "frame.filter")
            frames = fr.generate_frames(edges, s0, frame_filter, edges.unit_dir, edges.edge_weight)
            if c.global_frame_mode:
                frames = T.take(fr.global_frame(frames, batch.molecule_seg), batch.molecule_seg)
            projections = compute_projections(edges, frames, p, c, self._d1_sign)
        filters = build_filters(edges, projections, p, c)
        s = s0
        for layer in range(c.layers):
            s = message_pass_layer(s, edges, filters[layer], p, layer)
        atom_energy = linear(s, p, "head.energy")
        if c.species_offsets:
            atom_energy = atom_energy + T.take(p["head.species_shift"], batch.species_seg).reshape(-1, 1)
        raw = T.segment_sum(atom_energy, batch.molecule_seg).reshape(-1)
        energy = raw * self.energy_scale + Tensor(batch.atoms_per_molecule * self.atom_offset)
        return ModelOutput(energy, s, s0, positions, edges, frames, projections, filters)

    def energy_and_forces(self, batch: Batch, create_graph: bool = False) -> tuple[Tensor, Tensor]:
        pos = Tensor(batch.positions, requires_grad=True)
        out = self.forward(batch, pos)
        g = T.grad(out.energy.sum(), pos, create_graph=create_graph)
        return out.energy, -g

    # per-molecule heads ------------------------------------------------
    def dipole(self, out: ModelOutput, batch: Batch) -> Tensor:
        """``|sum_i (q_i - mean q) r_i|`` per molecule."""
        q = linear(out.node_scalars, self.params, "head.charge")
        counts = Tensor(batch.atoms_per_molecule.reshape(-1, 1))
        q_mean = T.segment_sum(q, batch.molecule_seg) / counts
        q = q - T.take(q_mean, batch.molecule_seg)
        moment = T.segment_sum(T.broadcast_to(q, (batch.n_atoms, 3)) * out.positions, batch.molecule_seg)
        return T.sqrt((moment * moment).sum(axis=-1))

    def spatial_extent(self, out: ModelOutput, batch: Batch, masses=None) -> Tensor:
        """``|sum_i x_i |r_i - r_com|^2|`` per molecule with mass-weighted center."""
        if masses is None:
            masses = np.array([elements.mass(z) for z in batch.z.tolist()])
        m = np.asarray(masses, dtype=np.float64).reshape(-1, 1)
        if m.shape[0] != batch.n_atoms or np.any(m <= 0):
            raise ValueError("need one positive mass per atom")
        total = T.segment_sum(Tensor(m), batch.molecule_seg)
        com = T.segment_sum(T.broadcast_to(Tensor(m), (batch.n_atoms, 3)) * out.positions, batch.molecule_seg) / total
        rel = out.positions - T.take(com, batch.molecule_seg)
        sq = (rel * rel).sum(axis=-1, keepdims=True)
        x = linear(out.node_scalars, self.params, "head.extent")
        return T.absolute(T.segment_sum(x * sq, batch.molecule_seg).reshape(-1))

    def predict_property(self, batch: Batch, positions: Tensor | None = None) -> Tensor:
        out = self.forward(batch, positions)
        target = self.config.target
        if target == "energy":
            return out.energy
        if target == "dipole":
            return self.dipole(out, batch)
        return self.spatial_extent(out, batch)

    # single-conformation conveniences ---------------------------------
    def predict_energy(self, conf: MoleculeConf) -> float:
        with T.no_grad():
            return self.forward(self.batch([conf])).energy.item()

    def predict_forces(self, conf: MoleculeConf) -> np.ndarray:
        _, forces = self.energy_and_forces(self.batch([conf]))
        if not np.isfinite(forces.data).all():
            raise FloatingPointError("non-finite force")
        return np.array(forces.data)

    def predict_dipole(self, conf: MoleculeConf) -> float:
        with T.no_grad():
            b = self.batch([conf])
            return self.dipole(self.forward(b), b).item()

    def predict_r2(self, conf: MoleculeConf, masses=None) -> float:
        with T.no_grad():
            b = self.batch([conf])
            return self.spatial_extent(self.forward(b), b, masses).item()

    # persistence -------------------------------------------------------
    def state(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "energy_scale": self.energy_scale,
            "atom_offset": self.atom_offset,
            "normalization": self.normalization_note,
        }

    def save(self, path: str | os.PathLike) -> None:
        save_tensors(path, self.params, {"model": self.state()})

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GNNLF":
        tensors, meta = load_tensors(path)
        if "model" not in meta:
            raise CheckpointError(f"{path}: no model metadata")
        model = cls.from_state(meta["model"], tensors)
        return model

    @classmethod
    def from_state(cls, state: dict, arrays: dict) -> "GNNLF":
        model = cls(ModelConfig.from_dict(state["config"]))
        model.energy_scale = float(state["energy_scale"])
        model.atom_offset = float(state["atom_offset"])
        model.normalization_note = state.get("normalization", "none")
        model.load_arrays(arrays)
        return model

    def load_arrays(self, arrays: dict) -> None:
        if set(arrays) != set(self.params):
            diff = sorted(set(arrays) ^ set(self.params))
            raise CheckpointError(f"parameter names differ from the configuration: {diff}")
        for name, a in arrays.items():
            if tuple(a.shape) != self.params[name].shape:
                raise CheckpointError(f"{name}: shape {a.shape} != expected {self.params[name].shape}")
        self.params = {n: Tensor(np.array(a), requires_grad=True, name=n) for n, a in arrays.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: np.array(t.data) for n, t in self.params.items()}

    def clone(self) -> "GNNLF":
        other = copy.copy(self)
        other.config = ModelConfig.from_dict(self.config.to_dict())
        other.params = {n: Tensor(np.array(t.data), requires_grad=True, name=n) for n, t in self.params.items()}
        return other


def unshare_filters(model: GNNLF) -> GNNLF:
    """Copy of a shared-filter model with one cloned filter set per layer."""
    if not model.config.share_filters:
        raise ValueError("model already has per-layer filters")
    cfg = ModelConfig.from_dict({**model.config.to_dict(), "share_filters": False})
    other = GNNLF(cfg)
    other.energy_scale = model.energy_scale
    other.atom_offset = model.atom_offset
    arrays = {}
    for name in other.params:
        if name.startswith("filter"):
            suffix = name.split(".", 1)[1]
            arrays[name] = model.params[f"filter0.{suffix}"].data
        else:
            arrays[name] = model.params[name].data
    other.load_arrays(arrays)
    return other
