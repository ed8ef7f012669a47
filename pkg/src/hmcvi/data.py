"""Datasets: IDX image files, binarisation, synthetic sets and persisted
evaluation draws."""
from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagic(IdxError):
    pass


class TruncatedFile(IdxError):
    pass


class DimensionMismatch(IdxError):
    pass


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic=None) -> np.ndarray:
    """Raw uint8 array from an IDX file (optionally gzip-compressed)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: missing header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC) or (expected_magic is not None and magic != expected_magic):
        raise BadMagic(f"{path}: magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFile(f"{path}: expected {size} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_images(path) -> np.ndarray:
    """Images as float64 rows in [0, 1) (pixel / 256)."""
    arr = read_idx(path, IMAGE_MAGIC)
    return arr.reshape(arr.shape[0], int(np.prod(arr.shape[1:]))).astype(np.float64) / 256.0


def load_labels(path) -> np.ndarray:
    return read_idx(path, LABEL_MAGIC).astype(np.int64)


def load_idx(images_path, labels_path=None):
    """Load an image file and, optionally, its labels (counts must agree)."""
    x = load_images(images_path)
    if labels_path is None:
        return x, None
    y = load_labels(labels_path)
    if y.shape[0] != x.shape[0]:
        raise DimensionMismatch(f"{x.shape[0]} images but {y.shape[0]} labels")
    return x, y


def save_idx(path, array):
    """Write uint8 images (n, rows, cols) or labels (n,) in IDX format."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise TypeError("IDX writer expects uint8 data")
    if a.ndim not in (1, 3):
        raise DimensionMismatch("expected labels (n,) or images (n, rows, cols)")
    magic = LABEL_MAGIC if a.ndim == 1 else IMAGE_MAGIC
    payload = struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


# --- binarisation ------------------------------------------------------------------

def binarize_threshold(x, level=0.5):
    return (np.asarray(x) >= level).astype(np.float64)


def binarize_stochastic(x, rng):
    """Pixel i becomes 1 with probability equal to its intensity."""
    x = np.asarray(x)
    return (rng.random(x.shape) < x).astype(np.float64)


@dataclass
class EvalDraws:
    draws: np.ndarray  # (k, n, D)
    seeds: list

    def __len__(self):
        return len(self.seeds)


def make_eval_draws(x, k=5, seed=0) -> EvalDraws:
    """``k`` stochastic binarisations of ``x``, draw ``i`` seeded with ``seed + i``."""
    if k < 1:
        raise ValueError("need at least one draw")
    seeds = [seed + i for i in range(k)]
    draws = [binarize_stochastic(x, np.random.default_rng(s)) for s in seeds]
    return EvalDraws(np.stack(draws), seeds)


# --- datasets -----------------------------------------------------------------------

@dataclass
class Dataset:
    train: np.ndarray
    valid: np.ndarray
    binary: bool  # already binary; otherwise intensities to re-binarise
    name: str = ""

    @property
    def dim(self):
        return self.train.shape[1]


def split(x, n_valid, seed=0):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(x.shape[0])
    return x[perm[n_valid:]], x[perm[:n_valid]]


def synthetic_conjugate(n, rng, dim=1):
    """Draw z ~ N(0, I), x | z ~ N(z, I); returns ``(x, log p(x))``."""
    z = rng.standard_normal((n, dim))
    x = z + rng.standard_normal((n, dim))
    return x, conjugate_log_marginal(x)


def conjugate_log_marginal(x):
    """Exact log N(x; 0, 2 I) per row."""
    x = np.atleast_2d(x)
    d = x.shape[1]
    return -0.5 * (np.sum(x * x, axis=1) / 2.0 + d * math.log(4.0 * math.pi))


def synthetic_binary(n, rng, dim=16, n_clusters=2, flip=0.1):
    """Binary vectors from noisy copies of random prototypes."""
    protos = (rng.random((n_clusters, dim)) < 0.5).astype(np.float64)
    labels = rng.integers(0, n_clusters, size=n)
    flips = rng.random((n, dim)) < flip
    return np.abs(protos[labels] - flips), labels


def load_dataset(spec: dict, seed=0) -> Dataset:
    """Build a dataset from a config entry.

    ``{"kind": "idx", "images": path, "n_valid": 1000}`` reads intensities,
    ``{"kind": "conjugate", "n": ..., "dim": 1}`` and
    ``{"kind": "binary", "n": ..., "dim": 16}`` make synthetic sets.
    """
    kind = spec.get("kind", "idx")
    n_valid = int(spec.get("n_valid", 0))
    rng = np.random.default_rng(seed)
    if kind == "idx":
        x, _ = load_idx(spec["images"])
        if "limit" in spec:
            x = x[: int(spec["limit"])]
        tr, va = split(x, n_valid, seed)
        return Dataset(tr, va, binary=False, name=Path(spec["images"]).name)
    if kind == "conjugate":
        x, _ = synthetic_conjugate(int(spec["n"]) + n_valid, rng, int(spec.get("dim", 1)))
        return Dataset(x[n_valid:], x[:n_valid], binary=True, name="conjugate")
    if kind == "binary":
        x, _ = synthetic_binary(int(spec["n"]) + n_valid, rng, int(spec.get("dim", 16)))
        return Dataset(x[n_valid:], x[:n_valid], binary=True, name="binary")
    raise ValueError(f"unknown dataset kind {kind!r}")


def write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def prepare_mnist_subset(out_dir, source_csv):
    """Convert a ``p0..p783,label`` CSV of digits into gzip IDX files."""
    raw = np.loadtxt(source_csv, delimiter=",", dtype=np.int64)
    labels = raw[:, -1].astype(np.uint8)
    images = raw[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_idx(out / "images-idx3-ubyte.gz", images)
    save_idx(out / "labels-idx1-ubyte.gz", labels)
    return out / "images-idx3-ubyte.gz", out / "labels-idx1-ubyte.gz"
