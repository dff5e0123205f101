"""Datasets: the CIFAR-10 binary format, augmentation and synthetic generators."""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Dataset",
    "FormatError",
    "load_cifar10_bin",
    "load_cifar10",
    "find_cifar10",
    "augment_batch",
    "crop_padded",
    "mirror",
    "make_synthetic",
    "load_dataset",
    "SYNTHETIC_KINDS",
    "CIFAR_RECORD",
]

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
SYNTHETIC_KINDS = ("separable-2class", "independent-noise", "group-correlated")


class FormatError(ValueError):
    """A data file does not follow the expected binary layout."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray          # (n, c, h, w) float32
    labels: np.ndarray          # (n,) int64
    classes: int
    split: str = "train"
    mean: np.ndarray | None = None   # per-channel mean already subtracted, if any

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"images must be n x c x h x w, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def channel_mean(self) -> np.ndarray:
        return self.images.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)

    def subtract_mean(self, mean: np.ndarray | None = None) -> "Dataset":
        """Return a copy with ``mean`` (default: this split's mean) removed per channel.

        Pass the training split's mean when normalising a test split.
        """
        m = self.channel_mean() if mean is None else np.asarray(mean, np.float32)
        return replace(self, images=self.images - m.reshape(1, -1, 1, 1), mean=m)

    def subset(self, n: int, start: int = 0) -> "Dataset":
        return replace(self, images=self.images[start:start + n], labels=self.labels[start:start + n])


# ----------------------------------------------------------------------
# CIFAR-10 binary

def _parse_cifar(buf: bytes, origin: str) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) % CIFAR_RECORD:
        off = len(buf) - len(buf) % CIFAR_RECORD
        raise FormatError(f"{origin}: incomplete record at byte offset {off} "
                          f"(length {len(buf)} is not a multiple of {CIFAR_RECORD})")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{origin}: label {labels[bad[0]]} out of range at byte offset {bad[0] * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return images, labels


def load_cifar10_bin(paths: str | os.PathLike | Sequence[str | os.PathLike], split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batch files (1 label byte + 3072 R/G/B plane bytes per record)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    ims, labs = [], []
    for p in paths:
        im, lab = _parse_cifar(Path(p).read_bytes(), str(p))
        ims.append(im)
        labs.append(lab)
    images = np.concatenate(ims) if ims else np.zeros((0, 3, 32, 32), np.float32)
    labels = np.concatenate(labs) if labs else np.zeros(0, np.int64)
    return Dataset(images, labels, 10, split)


def find_cifar10(data_dir: str | os.PathLike | None = None) -> Path | None:
    """Directory holding the CIFAR-10 ``.bin`` batches, or ``None``.

    Looks in ``data_dir`` (or ``$ROOTCONV_CIFAR_DIR``) and its
    ``cifar-10-batches-bin`` subdirectory.
    """
    root = data_dir or os.environ.get("ROOTCONV_CIFAR_DIR")
    if not root:
        return None
    for cand in (Path(root), Path(root) / "cifar-10-batches-bin"):
        if (cand / CIFAR_TRAIN_FILES[0]).exists():
            return cand
    return None


def load_cifar10(data_dir: str | os.PathLike | None = None, split: str = "train") -> Dataset:
    d = find_cifar10(data_dir)
    if d is None:
        raise FileNotFoundError(f"CIFAR-10 binary batches not found under {data_dir or '$ROOTCONV_CIFAR_DIR'}")
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    return load_cifar10_bin([d / f for f in files if (d / f).exists()], split)


# ----------------------------------------------------------------------
# augmentation

def crop_padded(img: np.ndarray, oy: int, ox: int, pad: int = 4) -> np.ndarray:
    """Zero-pad ``img`` (c, h, w) by ``pad`` and cut an h x w window at ``(oy, ox)``."""
    c, h, w = img.shape
    if not (0 <= oy <= 2 * pad and 0 <= ox <= 2 * pad):
        raise ValueError(f"crop offset ({oy}, {ox}) outside [0, {2 * pad}]")
    p = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    return p[:, oy:oy + h, ox:ox + w]


def mirror(img: np.ndarray) -> np.ndarray:
    """Horizontal flip of the last axis."""
    return img[..., ::-1].copy()


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad_crop: bool = True, mirror_p: float = 0.5,
                  mirror: bool = True, pad: int = 4, return_params: bool = False):
    """Random zero-padded crop and horizontal mirror for each image of ``x``.

    Crop offsets are drawn uniformly from ``[0, 2*pad]`` on each axis; an
    offset of ``(pad, pad)`` leaves the image unchanged.
    """
    n, _, h, w = x.shape
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2)) if pad_crop else np.full((n, 2), pad)
    flips = (rng.random(n) < mirror_p) if mirror else np.zeros(n, bool)
    out = np.empty_like(x)
    if pad_crop:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        for i in range(n):
            oy, ox = offs[i]
            out[i] = xp[i, :, oy:oy + h, ox:ox + w]
    else:
        out[...] = x
    out[flips] = out[flips][..., ::-1]
    return (out, offs, flips) if return_params else out


# ----------------------------------------------------------------------
# synthetic data (Philox, so streams are identical on every platform)

def _philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def make_synthetic(kind: str, seed: int = 0, n: int = 200, channels: int | None = None, size: int = 8,
                   classes: int | None = None, margin: float = 1.0, noise: float = 1.0,
                   blocks: Sequence[Sequence[int]] | None = None, rho: float = 0.8) -> Dataset:
    """Deterministic synthetic datasets.

    ``separable-2class``: noise orthogonal to a fixed direction ``u`` plus a
    class-signed offset along ``u`` of at least ``margin/2``, so ``sign(u.x)``
    classifies every sample.  ``u`` is constant over pixels within each
    channel.

    ``independent-noise``: iid unit normal channels, random labels.

    ``group-correlated``: channels inside each block share a common factor
    (correlation ``rho``); different blocks are independent.
    """
    rng = _philox(seed)
    if kind == "separable-2class":
        c = channels or 1
        d = c * size * size
        signs = np.where(rng.random(c) < 0.5, -1.0, 1.0)
        u = np.repeat(signs, size * size) / np.sqrt(d)
        z = rng.standard_normal((n, d)) * noise
        z -= np.outer(z @ u, u)
        labels = (np.arange(n) % 2).astype(np.int64)
        rng.shuffle(labels)
        s = np.where(labels == 1, 1.0, -1.0)
        along = s * (margin / 2 + np.abs(rng.standard_normal(n)) * margin / 2)
        x = z + np.outer(along, u)
        return Dataset(x.reshape(n, c, size, size).astype(np.float32), labels, 2, "train")
    if kind == "independent-noise":
        c = channels or 8
        k = classes or 10
        x = rng.standard_normal((n, c, size, size)).astype(np.float32)
        return Dataset(x, rng.integers(0, k, n).astype(np.int64), k, "train")
    if kind == "group-correlated":
        c = channels or 8
        if blocks is None:
            half = c // 2
            blocks = [range(0, half), range(half, c)]
        blocks = [list(b) for b in blocks]
        flat = sorted(i for b in blocks for i in b)
        if flat != list(range(c)):
            raise ValueError(f"blocks must partition channels 0..{c - 1}")
        if not 0 <= rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        k = classes or 10
        x = np.sqrt(1 - rho) * rng.standard_normal((n, c, size, size))
        for b in blocks:
            shared = rng.standard_normal((n, 1, size, size))
            x[:, b] += np.sqrt(rho) * shared
        return Dataset(x.astype(np.float32), rng.integers(0, k, n).astype(np.int64), k, "train")
    raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")


def load_dataset(address: str, data_dir: str | os.PathLike | None = None, split: str = "train",
                 **synth_kw) -> Dataset:
    """Resolve ``synth:<kind>:<seed>`` or ``cifar10`` (from ``data_dir``)."""
    if address.startswith("synth:"):
        parts = address.split(":")
        if len(parts) != 3:
            raise ValueError(f"synthetic address must be synth:<kind>:<seed>, got {address!r}")
        return make_synthetic(parts[1], int(parts[2]), **synth_kw)
    if address in ("cifar10", "cifar-10"):
        return load_cifar10(data_dir, split)
    raise ValueError(f"unknown dataset {address!r}")
