"""Procedural image classification data and a raw tensor file format.

Tensor file layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"NATN"
    4       1     format version (1)
    5       1     dtype code: 1 float32, 2 float64, 3 int32, 4 int64, 5 uint8
    6       1     ndim
    7       1     reserved, 0
    8       8*nd  dims, uint64 each
    ...           data, row-major (C order)
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import _streams

MAGIC = b"NATN"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i4"): 3,
               np.dtype("<i8"): 4, np.dtype("u1"): 5}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
PATTERNS = ("bars_0", "bars_45", "bars_90", "bars_135", "blob", "ring", "checker",
            "cross", "two_blobs", "corner")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 4
    samples_per_class: int = 200
    image_size: int = 16
    channels: int = 3
    noise_level: float = 0.5
    seed: int = 0
    val_fraction: float = 0.2
    test_fraction: float = 0.2

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(PATTERNS):
            raise ValueError(f"num_classes must be in [2, {len(PATTERNS)}]")
        if self.samples_per_class < 3:
            raise ValueError("samples_per_class must be at least 3")
        if self.val_fraction <= 0 or self.test_fraction <= 0 or self.val_fraction + self.test_fraction >= 1:
            raise ValueError("val and test fractions must be positive and sum below 1")


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    spec: SyntheticDatasetSpec | None = None

    def split(self, name):
        try:
            return {"train": (self.X_train, self.y_train), "val": (self.X_val, self.y_val),
                    "test": (self.X_test, self.y_test)}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None


def _pattern(kind, size, rng):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    if kind.startswith("bars_"):
        theta = np.deg2rad(float(kind[5:]) + rng.uniform(-12, 12))
        freq = rng.uniform(2.0, 4.0)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        return np.sin(2 * np.pi * freq * u + rng.uniform(0, 2 * np.pi))
    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    r = np.hypot(xx - cx, yy - cy)
    if kind == "blob":
        return 2 * np.exp(-(r / rng.uniform(0.12, 0.2)) ** 2) - 0.5
    if kind == "ring":
        return 2 * np.exp(-((r - rng.uniform(0.2, 0.3)) / 0.06) ** 2) - 0.5
    if kind == "checker":
        f = rng.uniform(2.0, 3.0)
        return np.sign(np.sin(2 * np.pi * f * (xx - cx)) * np.sin(2 * np.pi * f * (yy - cy)))
    if kind == "cross":
        w = rng.uniform(0.05, 0.09)
        return 1.5 * ((np.abs(xx - cx) < w) | (np.abs(yy - cy) < w)) - 0.5
    if kind == "two_blobs":
        d = rng.uniform(0.15, 0.25)
        r2 = np.hypot(xx + cx, yy + cy + d)
        return 2 * (np.exp(-(r / 0.1) ** 2) + np.exp(-(r2 / 0.1) ** 2)) - 0.5
    corner = np.array([[-1, -1], [1, -1], [-1, 1], [1, 1]])[rng.integers(4)] * 0.35
    return 2 * np.exp(-(np.hypot(xx - corner[0], yy - corner[1]) / 0.2) ** 2) - 0.5


def make_dataset(spec: SyntheticDatasetSpec) -> Dataset:
    """Render the dataset for ``spec``; identical specs give identical bytes.

    Every image gets a random per-channel gain so colour carries no class
    information. Each class's samples are split into train/val/test by a
    seeded permutation, so the splits are disjoint by construction.
    """
    n = spec.samples_per_class
    n_val = max(1, int(round(spec.val_fraction * n)))
    n_test = max(1, int(round(spec.test_fraction * n)))
    parts = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for k in range(spec.num_classes):
        rng = _streams.rng(spec.seed, "data", k)
        images = np.empty((n, spec.channels, spec.image_size, spec.image_size))
        for i in range(n):
            base = _pattern(PATTERNS[k], spec.image_size, rng)
            gains = rng.uniform(0.5, 1.5, size=spec.channels)
            noise = rng.standard_normal(images.shape[1:]) * spec.noise_level
            images[i] = gains[:, None, None] * base + noise
        order = rng.permutation(n)
        cuts = {"val": order[:n_val], "test": order[n_val:n_val + n_test],
                "train": order[n_val + n_test:]}
        for name, idx in cuts.items():
            parts[name][0].append(images[np.sort(idx)])
            parts[name][1].append(np.full(len(idx), k, dtype=np.int64))
    out = {}
    for name, (xs, ys) in parts.items():
        out[f"X_{name}"] = np.concatenate(xs)
        out[f"y_{name}"] = np.concatenate(ys)
    return Dataset(spec=spec, **out)


def save_tensor(path, array):
    arr = np.asarray(array)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dtype not in DTYPE_CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<BBBB", VERSION, DTYPE_CODES[dtype], arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes(order="C"))


def load_tensor(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor file (bad magic)")
    version, code, ndim, _ = struct.unpack_from("<BBBB", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    if code not in CODE_DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 8)
    offset = 8 + 8 * ndim
    dtype = CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - offset != count * dtype.itemsize:
        raise ValueError(f"{path}: payload size does not match header")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims).copy()


def export_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        X, y = dataset.split(name)
        save_tensor(directory / f"X_{name}.bin", X)
        save_tensor(directory / f"y_{name}.bin", y)
    if dataset.spec is not None:
        (directory / "spec.txt").write_text(
            "".join(f"{k}: {v}\n" for k, v in asdict(dataset.spec).items()))


def import_dataset(directory):
    directory = Path(directory)
    arrays = {}
    for name in ("train", "val", "test"):
        arrays[f"X_{name}"] = load_tensor(directory / f"X_{name}.bin")
        arrays[f"y_{name}"] = load_tensor(directory / f"y_{name}.bin")
    return Dataset(**arrays)
