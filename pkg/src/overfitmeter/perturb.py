"""Input-space perturbations: FGSM, spatial grid attack, Gaussian noise, corruptions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .autodiff import input_gradient, per_sample_loss
from .data import RANGE_MAX, rotate_images, shift_images
from .nn import CapabilityError

CORRUPTIONS = ("gaussian_noise_c", "defocus_blur", "fog", "contrast")

# per-severity parameters, monotone in severity 1..5
_NOISE_SIGMA = (0.04, 0.06, 0.08, 0.09, 0.10)
_DISK_RADIUS = (1, 2, 3, 4, 6)
_FOG_INTENSITY = (0.1, 0.2, 0.3, 0.4, 0.5)
_CONTRAST_FACTOR = (0.75, 0.6, 0.45, 0.3, 0.2)

_CHUNK = 256


@dataclass(frozen=True)
class AttackParams:
    epsilon: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")


@dataclass(frozen=True)
class SpatialParams:
    alpha: float
    shift_step: int = 1
    angle_step: Optional[float] = None  # None -> alpha / 4
    mode: str = "worst_case"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.shift_step < 1:
            raise ValueError("shift_step must be a positive integer")
        if self.angle_step is not None and self.angle_step <= 0:
            raise ValueError("angle_step must be positive")
        if self.mode not in ("worst_case", "random"):
            raise ValueError(f"unknown spatial mode {self.mode!r}")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTIONS}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValueError(f"severity must be 1..5, got {self.severity}")


def _clip(x: np.ndarray, value_range: str) -> np.ndarray:
    return np.clip(x, 0.0, RANGE_MAX[value_range])


# --------------------------------------------------------------------- FGSM


def fgsm(model, x: np.ndarray, y, eps: float, value_range: Optional[str] = None) -> np.ndarray:
    """One signed-gradient step of size ``eps`` per pixel, clipped to the value range."""
    AttackParams(eps)
    if not getattr(model, "differentiable", False):
        raise CapabilityError("FGSM needs input gradients; model is black-box")
    value_range = value_range or model.input_range
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y)).astype(np.int64)
    if eps == 0:
        return x.copy()
    out = np.empty_like(x)
    for start in range(0, len(x), _CHUNK):
        sl = slice(start, start + _CHUNK)
        g = input_gradient(model, x[sl], y[sl])
        out[sl] = x[sl] + eps * np.sign(g)
    return _clip(out, value_range)


# ------------------------------------------------------------------ spatial


def _axis_values(limit: float, step: float) -> List[float]:
    n = int(math.floor(limit / step + 1e-9))
    return [k * step for k in range(-n, n + 1)]


def spatial_grid(params: SpatialParams) -> List[Tuple[int, int, float]]:
    """All (dy, dx, angle) candidates in scan order (dy, then dx, then angle)."""
    shifts = [int(s) for s in _axis_values(params.alpha, params.shift_step)]
    if params.alpha == 0:
        angles = [0.0]
    else:
        step = params.angle_step if params.angle_step is not None else params.alpha / 4.0
        angles = _axis_values(params.alpha, step)
    return [(dy, dx, float(a)) for dy in shifts for dx in shifts for a in angles]


def spatial_transform(images: np.ndarray, dy: int, dx: int, angle: float) -> np.ndarray:
    """Shift with zero fill, then rotate (bilinear, zero fill)."""
    return rotate_images(shift_images(images, dy, dx), angle)


def attack_objective(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample (misclassified, cross-entropy) keys packed as a structured array.

    Comparing keys lexicographically ranks any misclassifying candidate above
    every correctly classified one, then by loss.
    """
    wrong = np.argmax(logits, axis=1) != labels
    key = np.empty(len(labels), dtype=[("wrong", "?"), ("loss", "f8")])
    key["wrong"] = wrong
    key["loss"] = per_sample_loss(logits, labels)
    return key


def _better(new, old) -> np.ndarray:
    return (new["wrong"] & ~old["wrong"]) | ((new["wrong"] == old["wrong"]) & (new["loss"] > old["loss"]))


def spatial_attack(
    model,
    x: np.ndarray,
    y,
    params: SpatialParams,
    seed: int = 0,
    value_range: Optional[str] = None,
    return_choice: bool = False,
):
    """Shift-and-rotate attack over the candidate grid of ``params``.

    ``worst_case`` scans every candidate and keeps, per image, the first one
    with the highest :func:`attack_objective`; ``random`` picks one candidate
    per image uniformly.  Only model outputs are queried.
    """
    value_range = value_range or model.input_range
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y)).astype(np.int64)
    grid = spatial_grid(params)
    if params.mode == "random":
        rng = np.random.default_rng(seed)
        choice = rng.integers(0, len(grid), size=len(x))
        out = np.empty_like(x)
        for c in np.unique(choice):
            sel = choice == c
            out[sel] = spatial_transform(x[sel], *grid[c])
    else:
        out = x.copy()
        choice = np.zeros(len(x), dtype=np.int64)
        best = None
        for c, cand in enumerate(grid):
            moved = spatial_transform(x, *cand)
            key = attack_objective(model.predict_logits(_clip(moved, value_range)), y)
            if best is None:
                best, out = key, moved
                continue
            upd = _better(key, best)
            best[upd] = key[upd]
            out[upd] = moved[upd]
            choice[upd] = c
    out = _clip(out, value_range)
    return (out, choice) if return_choice else out


# ----------------------------------------------------------------- gaussian


def gaussian_tensor(shape, seed) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def gaussian_noise(x: np.ndarray, eps: float, seed, value_range: str = "unit") -> np.ndarray:
    """x + eps * n with n ~ N(0, I) shaped like x, clipped to the value range."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    return _clip(x + eps * gaussian_tensor(x.shape, seed), value_range)


# -------------------------------------------------------------- corruptions


def disk_kernel(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(r, r, indexing="ij")
    k = (yy**2 + xx**2 <= radius**2).astype(np.float64)
    return k / k.sum()


def defocus(images: np.ndarray, radius: int) -> np.ndarray:
    """Disk-kernel blur of every channel; borders mirror."""
    k = disk_kernel(radius)
    batch = images.reshape((-1,) + images.shape[-3:])
    out = np.empty_like(batch)
    for i in range(batch.shape[0]):
        for ch in range(batch.shape[-1]):
            out[i, :, :, ch] = ndimage.convolve(batch[i, :, :, ch], k, mode="mirror")
    return out.reshape(images.shape)


def corrupt(x: np.ndarray, spec: CorruptionSpec, value_range: str = "unit", seed: int = 0) -> np.ndarray:
    """Apply one corruption at the given severity to an image or batch."""
    if not isinstance(spec, CorruptionSpec):
        spec = CorruptionSpec(*spec)
    x = np.asarray(x, dtype=np.float64)
    hi = RANGE_MAX[value_range]
    s = spec.severity - 1
    if spec.kind == "gaussian_noise_c":
        out = x + _NOISE_SIGMA[s] * hi * gaussian_tensor(x.shape, seed)
    elif spec.kind == "defocus_blur":
        out = defocus(x, _DISK_RADIUS[s])
    elif spec.kind == "fog":
        i = _FOG_INTENSITY[s]
        out = (1 - i) * x + i * hi
    else:
        f = _CONTRAST_FACTOR[s]
        mean = x.mean(axis=(-3, -2, -1), keepdims=True)
        out = mean + f * (x - mean)
    return _clip(out, value_range)
