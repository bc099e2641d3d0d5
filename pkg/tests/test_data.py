import struct

import numpy as np
import pytest

from slothlab.data import (
    Dataset, DatasetFormatError, gen_domain_shift, gen_synthetic, import_csv, load_dataset, save_dataset, split,
)


def test_zero_difficulty_is_linearly_separable():
    ds = gen_synthetic(8, 800, difficulty=0.0, seed=3)
    centred = ds.X.reshape(len(ds), -1) - 0.5
    # class means are amplitude-weighted signatures; normalized matching is a linear rule
    means = np.stack([centred[ds.y == c].mean(0) for c in range(8)])
    W = means / np.linalg.norm(means, axis=1, keepdims=True)
    assert np.all((centred @ W.T).argmax(1) == ds.y)


def test_same_seed_same_bytes():
    a, b = gen_synthetic(seed=7, n=300), gen_synthetic(seed=7, n=300)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert gen_synthetic(seed=8, n=300).X.tobytes() != a.X.tobytes()


def test_generator_contract():
    ds = gen_synthetic()
    assert ds.X.shape == (4000, 1, 16, 16) and ds.num_classes == 8
    assert ds.X.min() >= 0 and ds.X.max() <= 1
    assert np.all(np.bincount(ds.y) == 500)
    with pytest.raises(ValueError):
        gen_synthetic(difficulty=-1)


def test_domain_shift_is_a_different_task():
    a, b = gen_synthetic(n=200), gen_domain_shift(n=200)
    assert a.X.shape == b.X.shape and a.X.tobytes() != b.X.tobytes()


def test_split_is_disjoint_and_complete():
    ds = gen_synthetic(n=1000)
    ds.X[:, 0, 0, 0] = np.arange(1000) / 1000  # tag each sample
    parts = split(ds, 0.2, 0.1, seed=0)
    tags = [set(np.round(p.X[:, 0, 0, 0] * 1000).astype(int)) for p in parts.values()]
    assert [len(t) for t in tags] == [720, 80, 200]
    assert set.union(*tags) == set(range(1000))


def test_round_trip(tmp_path):
    ds = gen_synthetic(n=50)
    save_dataset(ds, tmp_path / "d.mxds")
    back = load_dataset(tmp_path / "d.mxds")
    assert back.X.tobytes() == ds.X.tobytes() and back.y.tobytes() == ds.y.tobytes()
    assert back.num_classes == ds.num_classes


def test_truncated_and_bad_magic(tmp_path):
    path = tmp_path / "d.mxds"
    save_dataset(gen_synthetic(n=20), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(DatasetFormatError, match="truncated"):
        load_dataset(path)
    path.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(DatasetFormatError, match="bad magic"):
        load_dataset(path)


def test_out_of_range_pixel_is_rejected(tmp_path):
    import zlib

    X = np.full((2, 1, 2, 2), 0.5)
    X[1, 0, 1, 1] = 1.5
    y = np.array([0, 1], dtype="<u4")
    payload = X.astype("<f8").tobytes() + y.tobytes()
    blob = b"MXDS" + struct.pack("<6I", 1, 2, 1, 2, 2, 2) + payload + struct.pack("<I", zlib.crc32(payload))
    (tmp_path / "bad.mxds").write_bytes(blob)
    with pytest.raises(DatasetFormatError, match="pixel"):
        load_dataset(tmp_path / "bad.mxds")


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2)), [0, 5], 3)
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 2, 2), -0.1), [0], 2)


def test_csv_import(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("label,a,b,c,d\n1,0.1,0.2,0.3,0.4\n0,0.5,0.5,0.5,0.5\n")
    ds = import_csv(path, shape=(1, 2, 2))
    assert ds.num_classes == 2 and ds.X.shape == (2, 1, 2, 2)
    np.testing.assert_array_equal(ds.X[0].ravel(), [0.1, 0.2, 0.3, 0.4])
