"""Datasets: CIFAR binary files, a synthetic stand-in, preprocessing and splits."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PIXELS = 32 * 32 * 3
VARIANTS = {"cifar10": (1, 10), "cifar100": (2, 100)}  # label bytes, classes


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x H x W, float
    labels: np.ndarray  # N ints
    C: int
    mean_image: np.ndarray  # 3 x H x W
    name: str = "dataset"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.C):
            raise ValueError(f"labels outside [0, {self.C})")

    def __len__(self):
        return self.labels.shape[0]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.C)

    def subset(self, idx, name=None, mean_image=None):
        return Dataset(self.images[idx], self.labels[idx], self.C,
                       self.mean_image if mean_image is None else mean_image,
                       name or self.name)


@dataclass
class Batch:
    images: np.ndarray  # B x 3 x H' x W', preprocessed
    labels: np.ndarray

    def __post_init__(self):
        if len(self.labels) < 1 or self.images.shape[0] != len(self.labels):
            raise ValueError(f"bad batch: {self.images.shape[0]} images, {len(self.labels)} labels")


def per_pixel_mean(images):
    if len(images) == 0:
        return np.zeros(images.shape[1:])
    return images.mean(axis=0)


# ---------------------------------------------------------------- CIFAR binary


def _decode(raw: bytes, variant, name):
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {sorted(VARIANTS)}, got {variant!r}")
    nlab, C = VARIANTS[variant]
    rec = nlab + PIXELS
    if len(raw) % rec:
        raise DataFormatError(f"{name}: {len(raw)} bytes is not a multiple of the "
                              f"{rec}-byte {variant} record")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, nlab - 1].astype(np.int64)  # cifar100: fine label is the 2nd byte
    bad = np.flatnonzero(labels >= C)
    if bad.size:
        raise DataFormatError(f"{name}: record {bad[0]} has label {labels[bad[0]]} >= {C}")
    pixels = arr[:, nlab:].reshape(-1, 3, 32, 32)
    coarse = arr[:, 0].astype(np.int64) if nlab == 2 else None
    return pixels, labels, C, coarse


def load_cifar_binary(path, variant="cifar10", name=None) -> Dataset:
    """Load one or more CIFAR binary files (a path or a list of paths)."""
    paths = [path] if isinstance(path, (str, Path)) else list(path)
    chunks, labs = [], []
    C = None
    for p in paths:
        pixels, labels, C, _ = _decode(Path(p).read_bytes(), variant, str(p))
        chunks.append(pixels)
        labs.append(labels)
    images = np.concatenate(chunks).astype(np.float64) / 255.0
    labels = np.concatenate(labs)
    return Dataset(images, labels, C, per_pixel_mean(images), name or Path(paths[0]).stem)


def load_cifar_dir(root, variant="cifar10"):
    """(train, test) from the standard CIFAR binary distribution layout."""
    root = Path(root)
    if variant == "cifar10":
        train = sorted(root.glob("data_batch_*.bin"))
        test = [root / "test_batch.bin"]
    else:
        train, test = [root / "train.bin"], [root / "test.bin"]
    missing = [str(p) for p in train + test if not p.exists()]
    if not train or missing:
        raise FileNotFoundError(f"CIFAR files missing under {root}: {missing or 'data_batch_*.bin'}")
    tr = load_cifar_binary(train, variant, f"{variant}-train")
    te = load_cifar_binary(test, variant, f"{variant}-test")
    te.mean_image = tr.mean_image
    return tr, te


def encode_cifar(ds: Dataset, variant="cifar10", coarse_labels=None) -> bytes:
    """Quantize to bytes in the CIFAR record layout (images must be 3x32x32, values in [0, 1])."""
    nlab, C = VARIANTS[variant]
    if ds.images.shape[1:] != (3, 32, 32):
        raise DataFormatError(f"CIFAR records are 3x32x32, got {ds.images.shape[1:]}")
    if ds.C > C:
        raise DataFormatError(f"{ds.C} classes do not fit {variant}")
    px = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8).reshape(len(ds), -1)
    out = np.empty((len(ds), nlab + PIXELS), dtype=np.uint8)
    out[:, nlab - 1] = ds.labels
    if nlab == 2:
        out[:, 0] = 0 if coarse_labels is None else coarse_labels
    out[:, nlab:] = px
    return out.tobytes()


def write_cifar_binary(ds: Dataset, path, variant="cifar10"):
    path = Path(path)
    path.write_bytes(encode_cifar(ds, variant))
    write_sidecar(ds, path.with_suffix(path.suffix + ".json"))
    return path


def mean_checksum(mean_image) -> str:
    return hashlib.sha256(np.ascontiguousarray(mean_image, dtype="<f8").tobytes()).hexdigest()


def write_sidecar(ds: Dataset, path):
    meta = {"name": ds.name, "C": int(ds.C), "N": len(ds), "mean_sha256": mean_checksum(ds.mean_image)}
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


# ---------------------------------------------------------------- synthetic


def make_templates(C, hw, rng, blobs=3):
    """One smooth RGB pattern per class: a few Gaussian blobs with random colour."""
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    templates = np.zeros((C, 3, hw, hw))
    for c in range(C):
        for _ in range(blobs):
            cy, cx = rng.uniform(0, hw, size=2)
            sigma = rng.uniform(hw / 8, hw / 4)
            colour = rng.uniform(0, 1, size=3)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            templates[c] += colour[:, None, None] * blob
    return np.clip(templates, 0.0, 1.0)


def generate_synthetic(C=10, n_per_class=100, hw=32, seed=0, noise=0.3, name=None) -> Dataset:
    """Class template + i.i.d. Gaussian pixel noise; ordered by class."""
    if C < 2:
        raise ValueError(f"need C >= 2, got {C}")
    if hw < 8:
        raise ValueError(f"need hw >= 8, got {hw}")
    rng = np.random.default_rng(seed)
    templates = make_templates(C, hw, rng)
    labels = np.repeat(np.arange(C), n_per_class)
    images = templates[labels] + noise * rng.standard_normal((labels.size, 3, hw, hw))
    return Dataset(images, labels, C, per_pixel_mean(images),
                   name or f"synthetic-C{C}-n{n_per_class}-hw{hw}-s{seed}")


# ---------------------------------------------------------------- preprocessing


def preprocess(images, mean_image, crop=None, mirror=False, mode="eval", rng=None):
    """Mean subtraction, then crop/mirror.

    train mode draws, per image and in this order: crop-x, crop-y (only when
    cropping) and the mirror coin (only when mirroring).  eval mode takes the
    centre crop and never mirrors.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(images) - mean_image
    n, c, h, w = x.shape
    if crop is not None and (crop > h or crop > w):
        raise ValueError(f"crop {crop} larger than {h}x{w} image")
    if mode == "eval":
        if crop is None:
            return x
        oy, ox = center_offset(h, crop), center_offset(w, crop)
        return x[:, :, oy:oy + crop, ox:ox + crop].copy()
    if crop is None and not mirror:
        return x
    if rng is None:
        raise ValueError("train-mode preprocessing needs an rng")
    th, tw = (crop, crop) if crop is not None else (h, w)
    out = np.empty((n, c, th, tw), dtype=x.dtype)
    for i in range(n):
        ox = oy = 0
        if crop is not None:
            ox = int(rng.integers(0, w - crop + 1))
            oy = int(rng.integers(0, h - crop + 1))
        img = x[i, :, oy:oy + th, ox:ox + tw]
        if mirror and rng.random() < 0.5:
            img = img[:, :, ::-1]
        out[i] = img
    return out


def center_offset(size, crop):
    return (size - crop) // 2


def hflip(images):
    return np.asarray(images)[..., ::-1]


# ---------------------------------------------------------------- splitting


def split(ds: Dataset, n_train: int, n_test: int, seed=0):
    """Seeded shuffle, then disjoint prefixes.  Both halves carry the train mean."""
    if n_train < 0 or n_test < 0 or n_train + n_test > len(ds):
        raise ValueError(f"cannot take {n_train} + {n_test} records from {len(ds)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    tr_idx, te_idx = perm[:n_train], perm[n_train:n_train + n_test]
    mean = per_pixel_mean(ds.images[tr_idx])
    train = ds.subset(tr_idx, f"{ds.name}-train", mean)
    test = ds.subset(te_idx, f"{ds.name}-test", mean)
    return train, test
