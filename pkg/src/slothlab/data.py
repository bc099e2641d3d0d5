"""Datasets: seeded synthetic image benchmark, the MXDS file format, CSV import."""
from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_MAGIC = b"MXDS"
DATA_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray  # (n, c, h, w) float64 in [0, 1]
    y: np.ndarray  # (n,) int64 in [0, m)
    num_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim == 2:
            self.X = self.X[:, None, None, :]
        if self.X.ndim != 4 or len(self.X) != len(self.y):
            raise ValueError("X must be (n, c, h, w) with one label per sample")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.X.size and (not np.all(np.isfinite(self.X)) or self.X.min() < 0.0 or self.X.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.X.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], self.num_classes)

    def of_class(self, c: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.y == c))


def _smooth_patterns(rng: np.random.Generator, k: int, shape) -> np.ndarray:
    """Zero-mean smooth images in [-1, 1]: three plane waves plus a bump."""
    c, h, w = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    out = np.zeros((k, c, h, w))
    for i in range(k):
        for ch in range(c):
            img = np.zeros((h, w))
            for _ in range(3):
                theta = rng.uniform(0, np.pi)
                freq = rng.uniform(0.5, 3.0)
                phase = rng.uniform(0, 2 * np.pi)
                img += np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            cy, cx = rng.uniform(0.2, 0.8, size=2)
            img += 2.0 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.02)
            img -= img.mean()
            out[i, ch] = img / np.abs(img).max()
    return out


def gen_synthetic(num_classes: int = 8, n: int = 4000, shape=(1, 16, 16), difficulty: float = 1.0,
                  seed: int = 0, *, amplitude=(0.035, 0.1), max_shift: int = 4, clutter: float = 0.05,
                  noise: float = 0.01, n_nuisance: int = 6) -> Dataset:
    """Faint, randomly shifted class signatures on a grey background.

    Each sample is ``0.5 + clutter + a * roll(S_y, shift) + noise`` where
    ``a`` is drawn from ``amplitude``, the circular shift is uniform in
    ``[-max_shift, max_shift]`` on both axes, and the clutter mixes fixed
    nuisance patterns at a per-sample level in ``[0, clutter]``. Shifts
    make shallow exits weaker than deep ones, and the spread of ``a``
    gives a mix of easy and hard samples.

    ``difficulty`` scales clutter, noise and the shift range; at 0 every
    sample is its class signature at some amplitude, so matching against
    the signatures separates classes perfectly.
    """
    if n < 2 or num_classes < 2:
        raise ValueError("need n >= 2 and num_classes >= 2")
    lo, hi = amplitude
    if not 0 < lo <= hi or difficulty < 0 or max_shift < 0 or clutter < 0 or noise < 0:
        raise ValueError("generator knobs must be non-negative with 0 < amplitude lo <= hi")
    clutter, noise = clutter * difficulty, noise * difficulty
    max_shift = int(round(max_shift * difficulty))
    shape = tuple(int(d) for d in shape)
    rng = np.random.default_rng(seed)
    signatures = _smooth_patterns(rng, num_classes, shape)
    nuisance = _smooth_patterns(rng, n_nuisance, shape)
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    amp = rng.uniform(lo, hi, n)
    level = clutter * rng.random(n)
    coef = rng.normal(0, 1, (n, n_nuisance)) * level[:, None]
    shifts = rng.integers(-max_shift, max_shift + 1, (n, 2))
    signal = np.stack([np.roll(signatures[c], tuple(s), axis=(1, 2)) for c, s in zip(y, shifts)])
    X = (0.5 + np.einsum("nk,kchw->nchw", coef, nuisance) + amp[:, None, None, None] * signal
         + noise * rng.standard_normal((n,) + shape))
    return Dataset(np.clip(X, 0.0, 1.0), y, num_classes)


def gen_domain_shift(num_classes: int = 8, n: int = 4000, shape=(1, 16, 16), difficulty: float = 1.0,
                     seed: int = 0, **knobs) -> Dataset:
    """A disjoint task from the same generator family with fresh signatures."""
    return gen_synthetic(num_classes, n, shape, difficulty, seed=seed + 7919, **knobs)


def split(ds: Dataset, test_frac: float = 0.2, holdout_frac: float = 0.1, seed: int = 0) -> dict[str, Dataset]:
    """Disjoint train/holdout/test splits; holdout is carved from the training part."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_test = int(round(test_frac * len(ds)))
    n_hold = int(round(holdout_frac * (len(ds) - n_test)))
    test, hold, train = perm[:n_test], perm[n_test:n_test + n_hold], perm[n_test + n_hold:]
    return {"train": ds.subset(np.sort(train)), "holdout": ds.subset(np.sort(hold)),
            "test": ds.subset(np.sort(test))}


def save_dataset(ds: Dataset, path) -> None:
    n, c, h, w = ds.X.shape
    payload = ds.X.astype("<f8").tobytes() + ds.y.astype("<u4").tobytes()
    header = DATA_MAGIC + struct.pack("<6I", DATA_VERSION, n, c, h, w, ds.num_classes)
    Path(path).write_bytes(header + payload + struct.pack("<I", zlib.crc32(payload)))


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < 28 or blob[:4] != DATA_MAGIC:
        raise DatasetFormatError("bad magic")
    version, n, c, h, w, m = struct.unpack_from("<6I", blob, 4)
    if version != DATA_VERSION:
        raise DatasetFormatError(f"unsupported dataset format version {version}")
    nx = n * c * h * w
    expected = 28 + 8 * nx + 4 * n + 4
    if len(blob) != expected:
        raise DatasetFormatError(f"truncated file: {len(blob)} bytes, expected {expected}")
    payload = blob[28:expected - 4]
    (crc,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(payload) != crc:
        raise DatasetFormatError("checksum failure")
    X = np.frombuffer(payload[:8 * nx], dtype="<f8").astype(np.float64).reshape(n, c, h, w)
    y = np.frombuffer(payload[8 * nx:], dtype="<u4").astype(np.int64)
    try:
        return Dataset(X, y, m)
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from exc


def import_csv(path, num_classes: int | None = None, shape=None) -> Dataset:
    """Read ``label,v0,v1,...`` rows of flat vectors."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    y = np.array([int(r[0]) for r in rows])
    X = np.array([[float(v) for v in r[1:]] for r in rows])
    m = int(num_classes if num_classes is not None else y.max() + 1)
    if shape is not None:
        X = X.reshape((len(X),) + tuple(shape))
    return Dataset(X, y, m)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True
