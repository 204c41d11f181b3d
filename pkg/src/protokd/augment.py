"""Seeded augmentation pipelines used to build query sets.

Microscope images get affine and photometric transforms; genome pseudo-images
(square symmetric matrices) get Gaussian noise on symmetric cell pairs so the
matrix stays symmetric.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

IMAGE_KINDS = ("zoom", "rotation", "contrast", "horizontal-flip", "vertical-flip", "shear", "solarize")
NOISE_KIND = "symmetric-noise"
KINDS = IMAGE_KINDS + (NOISE_KIND,)
_GEOMETRIC = {"zoom", "rotation", "shear"}
# parameter-free kinds carry no range
_NO_RANGE = {"horizontal-flip", "vertical-flip"}


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) stream identified by ``seed`` and optional sub-keys."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    p: float = 0.5
    low: float = 0.0
    high: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"{self.kind}: probability {self.p} outside [0, 1]")
        if self.low > self.high:
            raise ValueError(f"{self.kind}: invalid range [{self.low}, {self.high}]")
        if self.kind == "zoom" and self.low <= 0:
            raise ValueError("zoom factors must be positive")
        if self.kind == "solarize" and not 0 <= self.low <= self.high <= 1:
            raise ValueError("solarize thresholds must lie in [0, 1]")
        if self.kind == NOISE_KIND and not 0 < self.low <= self.high < 1:
            raise ValueError("noise fraction must lie in (0, 1)")
        if self.kind == "shear" and max(abs(self.low), abs(self.high)) >= 90:
            raise ValueError("shear angles must lie in (-90, 90) degrees")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "p": self.p}
        if self.kind not in _NO_RANGE:
            d["range"] = [self.low, self.high]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TransformSpec:
        unknown = set(d) - {"kind", "p", "range"}
        if unknown:
            raise ValueError(f"unknown transform key(s) {sorted(unknown)}")
        lo, hi = d.get("range", (0.0, 0.0))
        return cls(kind=d["kind"], p=float(d.get("p", 0.5)), low=float(lo), high=float(hi))


@dataclass(frozen=True)
class AugmentPolicy:
    transforms: tuple[TransformSpec, ...] = field(default_factory=tuple)

    @property
    def is_empty(self) -> bool:
        return not self.transforms

    @property
    def has_image_transforms(self) -> bool:
        return any(t.kind in IMAGE_KINDS for t in self.transforms)

    def to_list(self) -> list[dict]:
        return [t.to_dict() for t in self.transforms]

    @classmethod
    def from_list(cls, items: Sequence[dict]) -> AugmentPolicy:
        return cls(tuple(TransformSpec.from_dict(d) for d in items))


def default_image_policy(p: float = 0.5) -> AugmentPolicy:
    return AugmentPolicy(
        (
            TransformSpec("zoom", p, 0.8, 1.2),
            TransformSpec("rotation", p, -30.0, 30.0),
            TransformSpec("contrast", p, 0.7, 1.3),
            TransformSpec("horizontal-flip", p),
            TransformSpec("vertical-flip", p),
            TransformSpec("shear", p, -15.0, 15.0),
            TransformSpec("solarize", p, 0.5, 1.0),
        )
    )


def default_pseudo_image_policy(noise_fraction: float = 0.05) -> AugmentPolicy:
    return AugmentPolicy((TransformSpec(NOISE_KIND, 1.0, noise_fraction, noise_fraction),))


# ------------------------------------------------------------------ warps
def warp_affine(image: np.ndarray, inverse: np.ndarray) -> np.ndarray:
    """Resample ``image`` [C,H,W] at ``inverse @ (p - center) + center``.

    Coordinates are (x, y) in pixel units. Bilinear interpolation; samples
    outside the frame take the nearest edge value.
    """
    _, H, W = image.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    dx, dy = xs - cx, ys - cy
    sx = inverse[0, 0] * dx + inverse[0, 1] * dy + cx
    sy = inverse[1, 0] * dx + inverse[1, 1] * dy + cy
    sx = np.clip(sx, 0, W - 1)
    sy = np.clip(sy, 0, H - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = sx - x0
    wy = sy - y0
    img = image.astype(np.float64)
    top = img[:, y0, x0] * (1 - wx) + img[:, y0, x1] * wx
    bottom = img[:, y1, x0] * (1 - wx) + img[:, y1, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(image.dtype)


def rotation_inverse(degrees: float) -> np.ndarray:
    """Inverse map for a counter-clockwise rotation (y axis pointing down)."""
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    # forward rotation in image coords is [[c, s], [-s, c]]; its inverse is the transpose
    return np.array([[c, -s], [s, c]])


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    return warp_affine(image, rotation_inverse(degrees))


def zoom(image: np.ndarray, factor: float) -> np.ndarray:
    return warp_affine(image, np.eye(2) / factor)


def shear(image: np.ndarray, degrees: float) -> np.ndarray:
    return warp_affine(image, np.array([[1.0, -math.tan(math.radians(degrees))], [0.0, 1.0]]))


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    mean = image.mean(dtype=np.float64)
    return (mean + factor * (image - mean)).astype(image.dtype)


def solarize(image: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(image >= threshold, 1 - image, image).astype(image.dtype)


# ------------------------------------------------------------ pseudo-images
def symmetric_noise_cells(size: int, noise_fraction: float, rng: np.random.Generator):
    """Choose symmetric cells and their noise values.

    Returns ``(rows, cols, noise)`` over upper-triangle cells (``rows <= cols``).
    Off-diagonal picks count as two matrix entries, diagonal picks as one;
    cells are drawn until at least ``ceil(noise_fraction * size**2)`` entries
    are covered, so the total overshoots by at most one entry.
    """
    if not 0 < noise_fraction < 1:
        raise ValueError(f"noise_fraction must lie in (0, 1), got {noise_fraction}")
    target = math.ceil(noise_fraction * size * size)
    iu, ju = np.triu_indices(size)
    order = rng.permutation(iu.size)
    cost = np.where(iu[order] == ju[order], 1, 2)
    covered = np.cumsum(cost)
    n = int(np.searchsorted(covered, target) + 1)
    pick = order[:n]
    noise = rng.standard_normal(n)
    return iu[pick], ju[pick], noise


def augment_pseudo_image(matrix: np.ndarray, noise_fraction: float = 0.05, rng: np.random.Generator | None = None) -> np.ndarray:
    """Add N(0, 1) noise to symmetric pairs of cells; the result stays exactly symmetric."""
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"pseudo-image must be a square matrix, got shape {m.shape}")
    if np.abs(m - m.T).max(initial=0.0) > 1e-6:
        raise ValueError("pseudo-image is not symmetric")
    if rng is None:
        raise ValueError("an rng is required")
    rows, cols, noise = symmetric_noise_cells(m.shape[0], noise_fraction, rng)
    out = m.copy()
    vals = (out[rows, cols] + noise).astype(out.dtype)
    out[rows, cols] = vals
    out[cols, rows] = vals
    return out


# -------------------------------------------------------------- pipelines
def _apply(image: np.ndarray, spec: TransformSpec, value: float) -> np.ndarray:
    k = spec.kind
    if k == "zoom":
        return zoom(image, value)
    if k == "rotation":
        return rotate(image, value)
    if k == "shear":
        return shear(image, value)
    if k == "contrast":
        return adjust_contrast(image, value)
    if k == "horizontal-flip":
        return image[:, :, ::-1].copy()
    if k == "vertical-flip":
        return image[:, ::-1, :].copy()
    if k == "solarize":
        return solarize(image, value)
    raise AssertionError(k)


def augment_image(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply each transform of ``policy`` in order, each with its own probability.

    Every transform consumes the same number of draws whether or not it fires,
    so the stream position after a call depends only on the policy length.
    Image transforms require values in [0, 1] and the result is clamped back
    into that range; ``symmetric-noise`` needs a single-channel square input.
    """
    x = np.asarray(image)
    if x.ndim != 3:
        raise ValueError(f"expected a [C,S,S] array, got shape {x.shape}")
    if policy.is_empty:
        return x.copy()
    if policy.has_image_transforms and (x.min() < 0 or x.max() > 1):
        raise ValueError("image values must lie in [0, 1]")
    for spec in policy.transforms:
        if spec.kind in _GEOMETRIC and x.shape[1] != x.shape[2]:
            raise ValueError(f"{spec.kind} needs a square image, got {x.shape[1]}x{x.shape[2]}")
        fire = rng.random() < spec.p
        value = rng.uniform(spec.low, spec.high)
        if spec.kind == NOISE_KIND:
            if x.shape[0] != 1 or x.shape[1] != x.shape[2]:
                raise ValueError(f"symmetric-noise needs a [1,S,S] input, got {x.shape}")
            sub = make_rng(int(rng.integers(2**63)))
            if fire:
                x = augment_pseudo_image(x[0], value, sub)[None]
            continue
        if fire:
            x = _apply(x, spec, value)
    if policy.has_image_transforms:
        x = np.clip(x, 0.0, 1.0)
    return x


def make_query_set(sample: tuple[np.ndarray, int], policy: AugmentPolicy, k: int, rng: np.random.Generator) -> list[tuple[np.ndarray, int]]:
    """``k`` independent augmentations of one support sample, labels inherited."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    image, label = sample
    return [(augment_image(image, policy, rng), label) for _ in range(k)]
