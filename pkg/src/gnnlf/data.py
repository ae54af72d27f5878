"""Extended-XYZ reading/writing and dataset splitting."""

from __future__ import annotations

import os
import shlex
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import elements
from .geometry import MoleculeConf


class ExtXYZError(ValueError):
    pass


@dataclass
class Dataset:
    """Conformations that all carry the same kind of target.

    ``target`` is ``"energy"`` (energies, optionally forces), the name of a
    scalar property, or ``None`` for unlabeled data.
    """

    confs: list[MoleculeConf]
    target: str | None = "energy"
    units: dict = field(default_factory=lambda: {"energy": "kcal/mol", "forces": "kcal/mol/Å", "length": "Å"})

    def __post_init__(self):
        self.confs = list(self.confs)
        if self.target == "energy":
            flags = {c.energy is not None for c in self.confs}
            if flags == {False}:
                self.target = None
            elif len(flags) > 1:
                raise ValueError("some conformations have an energy and some do not")
            if len({c.forces is not None for c in self.confs}) > 1:
                raise ValueError("some conformations have forces and some do not")
        elif self.target is not None:
            missing = [k for k, c in enumerate(self.confs) if self.target not in c.properties]
            if missing:
                raise ValueError(f"conformations {missing[:5]} lack property {self.target!r}")

    def __len__(self) -> int:
        return len(self.confs)

    def __iter__(self) -> Iterator[MoleculeConf]:
        return iter(self.confs)

    def __getitem__(self, idx):
        if isinstance(idx, (slice, list, np.ndarray)):
            items = self.confs[idx] if isinstance(idx, slice) else [self.confs[i] for i in idx]
            return Dataset(items, self.target, dict(self.units))
        return self.confs[idx]

    @property
    def has_energy(self) -> bool:
        return bool(self.confs) and self.confs[0].energy is not None

    @property
    def has_forces(self) -> bool:
        return bool(self.confs) and self.confs[0].forces is not None

    def targets(self) -> np.ndarray:
        if self.target == "energy":
            return np.array([c.energy for c in self.confs])
        if self.target is None:
            raise ValueError("dataset has no targets")
        return np.array([c.properties[self.target] for c in self.confs])

    def species(self) -> list[int]:
        return sorted({int(z) for c in self.confs for z in c.z})


def split_dataset(ds: Dataset, sizes: Sequence[int], seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Random train/validation split of the given sizes; the rest is the test set."""
    n_train, n_val = (int(s) for s in sizes)
    if n_train < 0 or n_val < 0:
        raise ValueError("split sizes must be non-negative")
    if n_train + n_val > len(ds):
        raise ValueError(f"need {n_train + n_val} conformations, dataset has {len(ds)}")
    order = np.random.default_rng(seed).permutation(len(ds))
    train = order[:n_train]
    val = order[n_train : n_train + n_val]
    test = order[n_train + n_val :]
    return ds[list(train)], ds[list(val)], ds[list(test)]


# ----------------------------------------------------------------------
# extended XYZ


def _parse_properties(descriptor: str, where: str) -> dict[str, tuple[int, int, str]]:
    parts = descriptor.split(":")
    if len(parts) % 3:
        raise ExtXYZError(f"{where}: malformed Properties descriptor {descriptor!r}")
    columns = {}
    col = 0
    for name, kind, count in zip(parts[0::3], parts[1::3], parts[2::3]):
        try:
            n = int(count)
        except ValueError:
            raise ExtXYZError(f"{where}: bad column count {count!r} in Properties") from None
        columns[name.lower()] = (col, n, kind.upper())
        col += n
    return columns


def _parse_comment(line: str, where: str) -> dict[str, str]:
    try:
        tokens = shlex.split(line)
    except ValueError as exc:
        raise ExtXYZError(f"{where}: {exc}") from None
    info = {}
    for tok in tokens:
        if "=" in tok:
            key, value = tok.split("=", 1)
            info[key] = value
    return info


def read_extxyz(path: str | os.PathLike) -> list[MoleculeConf]:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    confs = []
    pos = 0
    frame = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        where = f"{os.fspath(path)}: frame {frame} (line {pos + 1})"
        try:
            n = int(lines[pos].strip())
        except ValueError:
            raise ExtXYZError(f"{where}: expected an atom count, got {lines[pos]!r}") from None
        if n < 1:
            raise ExtXYZError(f"{where}: atom count must be positive")
        if pos + 1 >= len(lines):
            raise ExtXYZError(f"{where}: missing comment line")
        info = _parse_comment(lines[pos + 1], where)
        columns = _parse_properties(info.pop("Properties", "species:S:1:pos:R:3"), where)
        if "species" not in columns or "pos" not in columns:
            raise ExtXYZError(f"{where}: Properties must contain species and pos")
        body = lines[pos + 2 : pos + 2 + n]
        if len(body) < n:
            raise ExtXYZError(f"{where}: expected {n} atom lines, found {len(body)}")
        width = sum(c[1] for c in columns.values())
        z = np.empty(n, dtype=np.int64)
        table = np.empty((n, width), dtype=object)
        for k, row in enumerate(body):
            fields = row.split()
            if len(fields) != width:
                raise ExtXYZError(
                    f"{os.fspath(path)}: frame {frame} (line {pos + 3 + k}): "
                    f"expected {width} columns, found {len(fields)}"
                )
            table[k] = fields
        try:
            sc = columns["species"][0]
            z[:] = [elements.atomic_number(s) if not s.isdigit() else int(s) for s in table[:, sc]]
            c0, cn, _ = columns["pos"]
            r = table[:, c0 : c0 + cn].astype(np.float64)
            forces = None
            if "forces" in columns:
                f0, fn, _ = columns["forces"]
                forces = table[:, f0 : f0 + fn].astype(np.float64)
            energy = None
            props = {}
            for key, value in info.items():
                try:
                    num = float(value)
                except ValueError:
                    continue
                if key.lower() == "energy":
                    energy = num
                else:
                    props[key] = num
            confs.append(MoleculeConf(z, r, energy, forces, props))
        except (ValueError, KeyError) as exc:
            raise ExtXYZError(f"{where}: {exc}") from None
        pos += 2 + n
        frame += 1
    return confs


def load_extxyz(path: str | os.PathLike, target: str = "energy") -> Dataset:
    return Dataset(read_extxyz(path), target=target)


def format_frame(conf: MoleculeConf, extra: dict | None = None) -> str:
    props = "species:S:1:pos:R:3" + (":forces:R:3" if conf.forces is not None else "")
    head = []
    if conf.energy is not None:
        head.append(f"energy={conf.energy!r}")
    head.append(f"Properties={props}")
    for key, value in {**conf.properties, **(extra or {})}.items():
        head.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={shlex.quote(str(value))}")
    rows = []
    for k in range(conf.n_atoms):
        cols = [elements.symbol(int(conf.z[k]))] + [repr(float(x)) for x in conf.r[k]]
        if conf.forces is not None:
            cols += [repr(float(x)) for x in conf.forces[k]]
        rows.append(" ".join(cols))
    return "\n".join([str(conf.n_atoms), " ".join(head), *rows]) + "\n"


def write_extxyz(path: str | os.PathLike, confs: Sequence[MoleculeConf]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for conf in confs:
            fh.write(format_frame(conf))
