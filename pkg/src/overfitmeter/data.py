"""Datasets: binary readers, synthetic generators, splitting and label noise."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
RANGE_MAX = {"unit": 1.0, "byte": 255.0}
ROLES = ("train", "validation", "test")

PathLike = Union[str, Path]


class DataError(Exception):
    """Base class for dataset ingestion errors."""


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (m, h, w, c) float64
    labels: np.ndarray  # (m,) int64
    num_classes: int
    value_range: str = "unit"
    role: str = "train"
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (m, h, w, c), got {self.images.shape}")
        m = self.images.shape[0]
        if m < 1:
            raise DataError("dataset must hold at least one sample")
        if self.labels.shape != (m,):
            raise CountMismatchError(f"{m} images but labels of shape {self.labels.shape}")
        if self.value_range not in RANGE_MAX:
            raise DataError(f"unknown value_range {self.value_range!r}")
        if self.role not in ROLES:
            raise DataError(f"unknown role {self.role!r}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        hi = RANGE_MAX[self.value_range]
        if self.images.min() < 0 or self.images.max() > hi:
            raise DataError(f"pixel values outside the {self.value_range} range [0, {hi:g}]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return replace(self, labels=np.asarray(labels, dtype=np.int64))

    def take(self, indices: Sequence[int], role: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            images=self.images[idx].copy(),
            labels=self.labels[idx].copy(),
            role=role or self.role,
        )

    def to_range(self, value_range: str) -> "Dataset":
        """Rescale pixels into ``value_range``; returns ``self`` if already there."""
        if value_range == self.value_range:
            return self
        factor = RANGE_MAX[value_range] / RANGE_MAX[self.value_range]
        images = np.clip(self.images * factor, 0.0, RANGE_MAX[value_range])
        return replace(self, images=images, value_range=value_range)


def _make(images, labels, num_classes, value_range, role, name) -> Dataset:
    return Dataset(
        images=np.asarray(images, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        num_classes=num_classes,
        value_range=value_range,
        role=role,
        name=name,
    )


# ------------------------------------------------------------------ readers


def _read_idx(path: PathLike, expected_magic: int) -> Tuple[Tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: shorter than the IDX magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    need = int(np.prod(dims, dtype=np.int64))
    if len(body) < need:
        raise TruncatedFileError(f"{path}: {len(body)} payload bytes, header promises {need}")
    return dims, body[:need]


def load_idx(
    images_path: PathLike,
    labels_path: PathLike,
    role: str = "train",
    num_classes: int = 10,
) -> Dataset:
    """Read an MNIST-style IDX image/label file pair (byte range)."""
    img_dims, img_body = _read_idx(images_path, IDX_IMAGES_MAGIC)
    lbl_dims, lbl_body = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if img_dims[0] != lbl_dims[0]:
        raise CountMismatchError(
            f"{images_path} holds {img_dims[0]} images but {labels_path} holds {lbl_dims[0]} labels"
        )
    m, h, w = img_dims
    images = np.frombuffer(img_body, dtype=np.uint8).reshape(m, h, w, 1)
    labels = np.frombuffer(lbl_body, dtype=np.uint8)
    return _make(images, labels, num_classes, "byte", role, Path(images_path).stem)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: PathLike, labels_path: PathLike) -> None:
    """Write uint8 ``images`` (m, h, w[, 1]) and ``labels`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim == 4:
        images = images[..., 0]
    labels = np.asarray(labels, dtype=np.uint8)
    m, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, m, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_cifar_binary(
    paths: Union[PathLike, Iterable[PathLike]],
    role: str = "train",
) -> Dataset:
    """Read CIFAR-10 binary batches; pixels become interleaved (m, 32, 32, 3)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise TruncatedFileError(f"{p}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    labels = records[:, 0]
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return _make(images, labels, 10, "byte", role, "cifar10")


def write_cifar_binary(images: np.ndarray, labels: np.ndarray, path: PathLike) -> None:
    images = np.asarray(images, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(len(labels), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(records.tobytes())


# --------------------------------------------------------------- generators


def synth_blobs(
    classes: int,
    per_class: int,
    image_side: int,
    seed: int,
    jitter: float = 0.05,
    channels: int = 1,
) -> Dataset:
    """Seeded class-template images with per-sample Gaussian pixel jitter.

    Each class gets a blocky random template with pixel values in
    [0.15, 0.85], mirror-symmetric about the vertical axis so that
    horizontal flips preserve the class.  Samples add N(0, jitter^2) per
    pixel and are clipped to [0, 1].  Samples are ordered class by class.
    """
    if classes < 2 or per_class < 1 or image_side < 4:
        raise ValueError("synth_blobs needs classes >= 2, per_class >= 1, image_side >= 4")
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B]))
    coarse = max(2, image_side // 2)
    raw = rng.uniform(0.0, 1.0, (classes, coarse, coarse, channels))
    # nearest-neighbour upsampling of a coarse grid gives blocky, well-separated templates
    reps = math.ceil(image_side / coarse)
    templates = raw.repeat(reps, axis=1).repeat(reps, axis=2)[:, :image_side, :image_side, :]
    templates = 0.15 + 0.7 * np.maximum(templates, templates[:, :, ::-1, :])
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C]))
    labels = np.repeat(np.arange(classes), per_class)
    images = templates[labels] + jitter * noise_rng.standard_normal((len(labels),) + templates.shape[1:])
    images = np.clip(images, 0.0, 1.0)
    return _make(images, labels, classes, "unit", "train", f"blobs{classes}x{per_class}")


# ------------------------------------------------------------ split/sample


def split(dataset: Dataset, train_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded shuffle split into (train, validation)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    m = len(dataset)
    n_train = int(math.floor(train_fraction * m + 0.5))
    if not 1 <= n_train <= m - 1:
        raise ValueError(f"split of {m} samples at {train_fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(m)
    return dataset.take(np.sort(perm[:n_train]), "train"), dataset.take(np.sort(perm[n_train:]), "validation")


def subsample(dataset: Dataset, count: int, seed: int) -> Dataset:
    """Stratified sample without replacement; per-class counts within +-1 of proportional."""
    m = len(dataset)
    if count > m or count < 1:
        raise ValueError(f"cannot subsample {count} of {m} samples")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(dataset.labels, return_counts=True)
    quota = counts * count / m
    take = np.floor(quota).astype(np.int64)
    # largest remainders get the leftover slots
    order = np.argsort(-(quota - take), kind="stable")
    take[order[: count - take.sum()]] += 1
    chosen = []
    for cls, k in zip(classes, take):
        members = np.flatnonzero(dataset.labels == cls)
        chosen.append(rng.choice(members, size=int(k), replace=False))
    return dataset.take(np.sort(np.concatenate(chosen)))


# ---------------------------------------------------------- transformations


def shift_images(images: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation of an (..., h, w, c) batch with zero fill."""
    out = np.zeros_like(images)
    h, w = images.shape[-3], images.shape[-2]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_r, dst_c, :] = images[..., src_r, src_c, :]
    return out


def rotate_images(images: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate an (..., h, w, c) batch about the image centre.

    Bilinear interpolation; samples falling outside the image read zero.
    Positive angles rotate counter-clockwise in display coordinates.
    """
    if degrees == 0:
        return images.copy()
    h, w = images.shape[-3], images.shape[-2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(degrees)
    cos_t, sin_t = math.cos(t), math.sin(t)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: output pixel -> source coordinate
    y = cy + cos_t * (rr - cy) + sin_t * (cc - cx)
    x = cx - sin_t * (rr - cy) + cos_t * (cc - cx)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    fy, fx = y - y0, x - x0
    out = np.zeros_like(images)
    for oy, ox, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (1, 0, fy * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 1, fy * fx),
    ):
        yi, xi = y0 + oy, x0 + ox
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = images[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1), :]
        out += vals * (wgt * valid)[..., None]
    return out


def flip_images(images: np.ndarray) -> np.ndarray:
    return images[..., :, ::-1, :].copy()


@dataclass(frozen=True)
class AugmentParams:
    max_shift: int = 0
    max_rotation: float = 0.0
    flip_probability: float = 0.0


def augment(
    image: np.ndarray,
    params: AugmentParams,
    seed: Union[int, np.random.Generator],
    value_range: str = "unit",
) -> np.ndarray:
    """Random shift, rotation and horizontal flip of one (h, w, c) image."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.asarray(image, dtype=np.float64)
    if params.max_shift > 0:
        dy, dx = rng.integers(-params.max_shift, params.max_shift + 1, size=2)
        out = shift_images(out, int(dy), int(dx))
    if params.max_rotation > 0:
        out = rotate_images(out, float(rng.uniform(-params.max_rotation, params.max_rotation)))
    if params.flip_probability > 0 and rng.random() < params.flip_probability:
        out = flip_images(out)
    return np.clip(out, 0.0, RANGE_MAX[value_range])


# -------------------------------------------------------------- label noise


@dataclass(frozen=True)
class NoiseMask:
    flipped: np.ndarray  # bool (m,)
    original_labels: np.ndarray  # int (m,)

    @property
    def count(self) -> int:
        return int(self.flipped.sum())


def flip_count(rate: float, m: int) -> int:
    """round-half-up of rate*m, robust to binary fractions like 0.29*100."""
    return int(math.floor(round(rate * m, 9) + 0.5))


def inject_label_noise(dataset: Dataset, rate: float, seed) -> Tuple[Dataset, NoiseMask]:
    """Give exactly ``flip_count(rate, m)`` samples a uniformly drawn false label."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate must lie in [0, 1], got {rate}")
    k = dataset.num_classes
    if k < 2:
        raise ValueError("label noise needs at least two classes")
    m = len(dataset)
    n_flip = flip_count(rate, m)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(m, size=n_flip, replace=False)
    original = dataset.labels.copy()
    labels = original.copy()
    # offset in 1..k-1 guarantees a different label, uniform over the k-1 others
    offsets = rng.integers(1, k, size=n_flip)
    labels[chosen] = (original[chosen] + offsets) % k
    flipped = np.zeros(m, dtype=bool)
    flipped[chosen] = True
    return dataset.with_labels(labels), NoiseMask(flipped, original)
