"""IDX (MNIST container) reading/writing and seeded synthetic datasets."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .chain import ChainSpec, Parameters, forward

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"
    labels: Optional[np.ndarray] = None
    normalisation: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have the same number of rows")
        if self.inputs.shape[0] < 1:
            raise ValueError("a dataset needs at least one row")
        for a in (self.inputs, self.targets, self.labels):
            if a is not None:
                a.flags.writeable = False

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, index, split: Optional[str] = None) -> "Dataset":
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.inputs[index].copy(), self.targets[index].copy(),
                       split or self.split, None if labels is None else labels.copy(),
                       dict(self.normalisation))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------- IDX

def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Raw unsigned-byte IDX array (images: N x rows x cols, labels: N)."""
    raw = _open(path)
    if len(raw) < 8:
        raise IDXFormatError(f"{path}: truncated header ({len(raw)} bytes, need >= 8)")
    magic, count = struct.unpack(">II", raw[:8])
    if magic == IMAGE_MAGIC:
        if len(raw) < 16:
            raise IDXFormatError(f"{path}: truncated image header at byte offset {len(raw)}")
        rows, cols = struct.unpack(">II", raw[8:16])
        shape, offset = (count, rows, cols), 16
    elif magic == LABEL_MAGIC:
        shape, offset = (count,), 8
    else:
        raise IDXFormatError(f"{path}: bad magic number 0x{magic:08x} at byte offset 0")
    need = offset + int(np.prod(shape))
    if len(raw) < need:
        raise IDXFormatError(
            f"{path}: truncated payload, expected {need} bytes but file ends at byte offset {len(raw)}")
    if len(raw) > need:
        raise IDXFormatError(
            f"{path}: {len(raw) - need} trailing bytes after offset {need}; header count is {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=need - offset, offset=offset).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-D -> images, 1-D -> labels)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        if np.any((a < 0) | (a > 255)) or np.any(a != np.round(a)):
            raise ValueError("IDX payload must be integers in [0, 255]")
        a = a.astype(np.uint8)
    if a.ndim == 3:
        header = struct.pack(">IIII", IMAGE_MAGIC, *a.shape)
    elif a.ndim == 1:
        header = struct.pack(">II", LABEL_MAGIC, a.shape[0])
    else:
        raise ValueError("IDX writer supports 3-D images or 1-D labels")
    Path(path).write_bytes(header + np.ascontiguousarray(a).tobytes())


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IDXFormatError(f"{images_path}: not an image file (magic 0x{IMAGE_MAGIC:08x} expected)")
    if labels.ndim != 1:
        raise IDXFormatError(f"{labels_path}: not a label file (magic 0x{LABEL_MAGIC:08x} expected)")
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(
            f"count mismatch: {images.shape[0]} images (byte offset 4 of {images_path}) "
            f"vs {labels.shape[0]} labels (byte offset 4 of {labels_path})")
    bad = np.flatnonzero(labels >= N_CLASSES)
    if bad.size:
        raise IDXFormatError(
            f"{labels_path}: label out of range ({labels[bad[0]]}) at byte offset {8 + bad[0]}")
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    lab = labels.astype(np.int64)
    return Dataset(inputs, one_hot(lab, N_CLASSES), split, lab, {"scale": "1/255"})


def data_dir(explicit=None) -> Path:
    return Path(explicit or os.environ.get("PC_LAB_DATA_DIR", "data"))


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory=None, n_validation: int = 10000) -> dict:
    """train / validation / test splits; validation is the last block of the training file."""
    d = data_dir(directory)
    train = load_idx(*(_find(d, s) for s in MNIST_FILES["train"]), split="train")
    test = load_idx(*(_find(d, s) for s in MNIST_FILES["test"]), split="test")
    n = len(train)
    return {
        "train": train.subset(slice(0, n - n_validation), "train"),
        "validation": train.subset(slice(n - n_validation, n), "validation"),
        "test": test,
    }


# ---------------------------------------------------------------- synthetic

def teacher_parameters(seed: int, d_in: int, d_out: int, hidden=(32,),
                       scale: float = 1.0) -> Parameters:
    """Random tanh teacher with a linear read-out layer."""
    rng = np.random.default_rng([seed, 7919])
    dims = (d_in,) + tuple(hidden) + (d_out,)
    spec = ChainSpec(dims, ("tanh",) * len(hidden) + ("identity",))
    ws, bs = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        ws.append(rng.normal(0.0, scale * np.sqrt(4.0 / a), size=(b, a)))
        bs.append(rng.normal(0.0, 0.1, size=b))
    # centre the uniform[0, 1] inputs so classes stay roughly balanced
    bs[0] = bs[0] - ws[0].sum(axis=1) * 0.5
    return Parameters(spec, tuple(ws), tuple(bs))


def synthetic_dataset(seed: int, n: int, d_in: int, d_out: int,
                      task: str = "classification", teacher: Optional[Parameters] = None,
                      split: str = "train") -> Dataset:
    """Inputs uniform in [0, 1]; targets from a hidden teacher chain.

    Regression targets are the teacher outputs; classification targets are
    one-hot argmax of the teacher logits.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if task not in ("regression", "classification"):
        raise ValueError(f"unknown task {task!r}")
    teacher = teacher or teacher_parameters(seed, d_in, d_out)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, d_in))
    logits = forward(teacher, x, np.zeros((n, d_out))).mu[-1]
    if task == "regression":
        return Dataset(x, logits.copy(), split, None, {"inputs": "uniform[0,1]"})
    labels = np.argmax(logits, axis=1)
    return Dataset(x, one_hot(labels, d_out), split, labels, {"inputs": "uniform[0,1]"})


def synthetic_splits(seed: int, d_in: int = 20, n_classes: int = 10, n_train: int = 2000,
                     n_validation: int = 500, n_test: int = 500) -> dict:
    """Disjoint train / validation / test splits drawn from one synthetic set."""
    total = n_train + n_validation + n_test
    ds = synthetic_dataset(seed, total, d_in, n_classes, "classification")
    return {
        "train": ds.subset(slice(0, n_train), "train"),
        "validation": ds.subset(slice(n_train, n_train + n_validation), "validation"),
        "test": ds.subset(slice(n_train + n_validation, total), "test"),
    }
