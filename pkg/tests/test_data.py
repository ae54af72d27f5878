import numpy as np
import pytest

from gnnlf.data import Dataset, ExtXYZError, load_extxyz, read_extxyz, split_dataset, write_extxyz
from gnnlf.geometry import MoleculeConf, random_conf

WATER = """3
energy=-76.4 Properties=species:S:1:pos:R:3:forces:R:3 pbc="F F F"
O 0.0 0.0 0.0 0.1 0.0 0.0
H 0.757 0.586 0.0 -0.05 0.01 0.0
H -0.757 0.586 0.0 -0.05 -0.01 0.0
"""


def write(tmp_path, text, name="d.xyz"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_parse_water(tmp_path):
    (conf,) = read_extxyz(write(tmp_path, WATER))
    assert conf.z.tolist() == [8, 1, 1]
    assert conf.energy == -76.4
    np.testing.assert_array_equal(conf.forces[0], [0.1, 0.0, 0.0])
    np.testing.assert_array_equal(conf.r[1], [0.757, 0.586, 0.0])


def test_parse_property_and_default_columns(tmp_path):
    text = "2\nmu=1.85 name=hcl\nH 0 0 0\nCl 0 0 1.27\n"
    (conf,) = read_extxyz(write(tmp_path, text))
    assert conf.energy is None and conf.forces is None
    assert conf.properties == {"mu": 1.85}
    ds = load_extxyz(tmp_path / "d.xyz", target="mu")
    assert ds.targets().tolist() == [1.85]


def test_multiple_frames_and_blank_lines(tmp_path):
    confs = read_extxyz(write(tmp_path, WATER + "\n" + WATER))
    assert len(confs) == 2


def test_empty_file_gives_no_frames(tmp_path):
    assert read_extxyz(write(tmp_path, "")) == []
    assert len(load_extxyz(tmp_path / "d.xyz")) == 0


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("x\ncomment\n", "expected an atom count"),
        ("2\nProperties=species:S:1:pos:R:3\nH 0 0 0\n", "expected 2 atom lines"),
        ("1\nProperties=species:S:1:pos:R:3\nH 0 0\n", "line 3"),
        ("1\nProperties=species:S:1:pos:R\nH 0 0 0\n", "malformed Properties"),
        ("1\nProperties=species:S:1\nH\n", "must contain species and pos"),
        ("1\nProperties=species:S:1:pos:R:3\nXx 0 0 0\n", "frame 0"),
        ("1\nProperties=species:S:1:pos:R:3\nH 0 a 0\n", "frame 0"),
    ],
)
def test_parse_errors_name_location(tmp_path, text, fragment):
    with pytest.raises(ExtXYZError, match=fragment):
        read_extxyz(write(tmp_path, text))


def test_error_names_second_frame(tmp_path):
    bad = WATER + "3\nenergy=1 Properties=species:S:1:pos:R:3:forces:R:3\nO 0 0 0 0 0 0\n"
    with pytest.raises(ExtXYZError, match="frame 1"):
        read_extxyz(write(tmp_path, bad))


def test_round_trip_to_twelve_digits(tmp_path, rng):
    confs = []
    for n in (1, 3, 7):
        c = random_conf(rng, n)
        confs.append(MoleculeConf(c.z, c.r, float(rng.normal() * 100), rng.normal(size=(n, 3))))
    path = tmp_path / "out.xyz"
    write_extxyz(path, confs)
    back = read_extxyz(path)
    for a, b in zip(confs, back):
        assert a.z.tolist() == b.z.tolist()
        np.testing.assert_allclose(b.r, a.r, rtol=1e-12)
        np.testing.assert_allclose(b.forces, a.forces, rtol=1e-12)
        assert b.energy == pytest.approx(a.energy, rel=1e-12)


def test_mixed_labels_are_rejected():
    a = MoleculeConf([1], [[0, 0, 0]], energy=1.0)
    b = MoleculeConf([1], [[0, 0, 0]])
    with pytest.raises(ValueError):
        Dataset([a, b])


def test_missing_property_is_rejected():
    with pytest.raises(ValueError):
        Dataset([MoleculeConf([1], [[0, 0, 0]])], target="mu")


def test_split_sizes_and_disjointness(rng):
    confs = [MoleculeConf([1], [[float(k), 0, 0]], energy=float(k)) for k in range(20)]
    ds = Dataset(confs)
    train, val, test = split_dataset(ds, (12, 5), seed=3)
    assert (len(train), len(val), len(test)) == (12, 5, 3)
    ids = [c.energy for part in (train, val, test) for c in part]
    assert sorted(ids) == list(range(20))
    again = split_dataset(ds, (12, 5), seed=3)[0]
    assert [c.energy for c in again] == [c.energy for c in train]
    with pytest.raises(ValueError):
        split_dataset(ds, (15, 10))
    with pytest.raises(ValueError):
        split_dataset(ds, (-1, 2))
