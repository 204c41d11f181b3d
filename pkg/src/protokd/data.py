"""Datasets, scarce-regime splits, and a synthetic stand-in corpus."""
from __future__ import annotations

import colorsys
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import make_rng

IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm", ".jpg", ".jpeg", ".gif", ".webp"}


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Images as one [N, channels, S, S] array plus dense integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    modality: str = "image"
    indices: np.ndarray | None = None  # positions in the parent dataset, when this is a split

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,S,S], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.modality not in ("image", "pseudo-image"):
            raise DataError(f"unknown modality {self.modality!r}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("labels must be dense in [0, C)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def items(self) -> list[tuple[np.ndarray, int]]:
        return [(img, int(y)) for img, y in zip(self.images, self.labels)]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx: Sequence[int]) -> Dataset:
        idx = np.asarray(idx, dtype=np.intp)
        parent = self.indices if self.indices is not None else np.arange(len(self))
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names), self.modality, parent[idx])

    def check_complete(self) -> None:
        missing = [self.class_names[c] for c, n in enumerate(self.class_counts()) if n == 0]
        if missing:
            raise DataError(f"classes without items: {missing}")


# ---------------------------------------------------------------- splitting
@dataclass(frozen=True)
class SplitSpec:
    train_per_class: int = 1
    val_per_class: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.train_per_class <= 5:
            raise ValueError(f"train_per_class must be in 1..5 (scarce regime), got {self.train_per_class}")
        if self.val_per_class < 0:
            raise ValueError("val_per_class must be >= 0")


def scarce_split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Per-class quotas for train and validation; everything left goes to test."""
    need = spec.train_per_class + spec.val_per_class
    counts = ds.class_counts()
    short = [ds.class_names[c] for c, n in enumerate(counts) if n < need]
    if short:
        raise DataError(f"split needs {need} items per class; too few in {short}")
    rng = make_rng(spec.seed, 0x5B117)
    train, val, test = [], [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(idx.size)]
        train.extend(idx[: spec.train_per_class])
        val.extend(idx[spec.train_per_class : need])
        test.extend(idx[need:])
    return ds.subset(sorted(train)), ds.subset(sorted(val)), ds.subset(sorted(test))


def split_checksum(*splits: Dataset) -> str:
    h = hashlib.sha256()
    for s in splits:
        h.update(np.asarray(s.indices, dtype="<i8").tobytes())
        h.update(b"|")
    return h.hexdigest()


# ------------------------------------------------------------ synthetic data
@dataclass(frozen=True)
class ClassFamily:
    """Base rendering parameters of one synthetic class."""

    shape_power: float  # superellipse exponent: 2 ellipse, larger is boxier
    size: float
    eccentricity: float
    wall: float
    texture_freq: float
    texture_angle: float
    hue: float


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    per_class: int = 16
    intra_class_variance: float = 0.0
    image_size: int = 32
    seed: int = 0
    count_skew: float = 0.0  # 0 = balanced; up to 1 = per-class counts in [per_class*(1-skew), per_class]
    min_per_class: int = 7
    families: tuple[ClassFamily, ...] | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("synthetic corpus needs at least 2 classes")
        if self.intra_class_variance < 0:
            raise ValueError("intra_class_variance must be >= 0")
        if not 0 <= self.count_skew < 1:
            raise ValueError("count_skew must lie in [0, 1)")
        if self.per_class < 1 or self.image_size < 8:
            raise ValueError("per_class must be >= 1 and image_size >= 8")


def class_families(num_classes: int, seed: int) -> list[ClassFamily]:
    """Distinct base parameters per class, spread on a jittered grid."""
    rng = make_rng(seed, 0xFA11)
    # stratify each axis so no two classes share a base tuple
    def strata(lo, hi):
        edges = (np.arange(num_classes) + rng.uniform(0.2, 0.8, num_classes)) / num_classes
        return lo + (hi - lo) * edges[rng.permutation(num_classes)]

    powers = strata(1.6, 4.0)
    sizes = strata(0.55, 0.85)
    ecc = strata(0.5, 1.0)
    walls = strata(0.06, 0.3)
    freqs = strata(1.0, 5.0)
    angles = strata(0.0, math.pi)
    hues = strata(0.0, 1.0)
    return [ClassFamily(*map(float, t)) for t in zip(powers, sizes, ecc, walls, freqs, angles, hues)]


def render_ovum(fam: ClassFamily, size: int, jitter: dict[str, float]) -> np.ndarray:
    """Render one textured, walled superellipse on a light background, [3,S,S] in [0,1]."""
    g = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(g, g, indexing="ij")
    x = xx - jitter.get("dx", 0.0)
    y = yy - jitter.get("dy", 0.0)
    rot = jitter.get("rot", 0.0)
    u = x * math.cos(rot) + y * math.sin(rot)
    v = -x * math.sin(rot) + y * math.cos(rot)
    a = max(fam.size * (1 + jitter.get("size", 0.0)), 0.15)
    b = max(a * min(max(fam.eccentricity + jitter.get("ecc", 0.0), 0.3), 1.0), 0.1)
    p = max(fam.shape_power + jitter.get("power", 0.0), 1.2)
    r = (np.abs(u / a) ** p + np.abs(v / b) ** p) ** (1.0 / p)
    edge = 2.0 / size
    inside = np.clip((1 - r) / edge + 0.5, 0, 1)
    wall = max(fam.wall + jitter.get("wall", 0.0), 0.03)
    interior = np.clip((1 - wall - r) / edge + 0.5, 0, 1)
    freq = max(fam.texture_freq + jitter.get("freq", 0.0), 0.3)
    ang = fam.texture_angle + jitter.get("tex_angle", 0.0)
    tex = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (u * math.cos(ang) + v * math.sin(ang)) / a + jitter.get("phase", 0.0))

    hue = (fam.hue + jitter.get("hue", 0.0)) % 1.0
    body = np.array(colorsys.hsv_to_rgb(hue, 0.55, 0.75))
    body_dark = np.array(colorsys.hsv_to_rgb(hue, 0.7, 0.45))
    shell = np.array(colorsys.hsv_to_rgb((hue + 0.08) % 1.0, 0.6, 0.3))
    bg = np.full(3, 0.85 + jitter.get("bg", 0.0))

    fill = body[:, None, None] * tex + body_dark[:, None, None] * (1 - tex)
    img = bg[:, None, None] * (1 - inside) + (shell[:, None, None] * (1 - interior) + fill * interior) * inside
    img = img + jitter.get("noise", 0.0) * jitter.get("noise_field", 0.0)
    return np.clip(img, 0, 1)


def _jitter(rng: np.random.Generator, v: float, size: int) -> dict:
    if v == 0:
        return {}
    n = rng.standard_normal
    return {
        "dx": 0.12 * v * n(),
        "dy": 0.12 * v * n(),
        "rot": math.pi * v * rng.uniform(-1, 1),
        "size": 0.12 * v * n(),
        "ecc": 0.12 * v * n(),
        "power": 0.5 * v * n(),
        "wall": 0.04 * v * n(),
        "freq": 0.8 * v * n(),
        "tex_angle": 0.6 * v * n(),
        "phase": 2 * math.pi * v * rng.uniform(-1, 1),
        "hue": 0.05 * v * n(),
        "bg": 0.05 * v * n(),
        "noise": 0.08 * v,
        "noise_field": n((3, size, size)),
    }


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Procedural textured-ellipse classes; deterministic under ``spec.seed``."""
    fams = list(spec.families) if spec.families is not None else class_families(spec.num_classes, spec.seed)
    if len(fams) != spec.num_classes:
        raise ValueError("families must have one entry per class")
    rng = make_rng(spec.seed, 0xDA7A)
    if spec.count_skew > 0:
        lo = max(spec.min_per_class, int(round(spec.per_class * (1 - spec.count_skew))))
        counts = rng.integers(lo, max(lo, spec.per_class) + 1, size=spec.num_classes)
    else:
        counts = np.full(spec.num_classes, spec.per_class)
    images, labels = [], []
    for c, fam in enumerate(fams):
        for _ in range(int(counts[c])):
            images.append(render_ovum(fam, spec.image_size, _jitter(rng, spec.intra_class_variance, spec.image_size)))
            labels.append(c)
    return Dataset(
        np.stack(images).astype(np.float32),
        np.array(labels),
        [f"class_{c:02d}" for c in range(spec.num_classes)],
        "image",
    )


# ------------------------------------------------------------- image folders
def load_image_dataset(root: str | Path, input_size: int = 32) -> Dataset:
    """One sub-directory per class, sorted by name; images resized to ``input_size``."""
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no class directories under {root}")
    images, labels = [], []
    for c, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class directory '{d.name}' contains no images")
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((input_size, input_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError) as err:
                raise DataError(f"cannot decode {f}: {err}") from None
            images.append(arr.transpose(2, 0, 1))
            labels.append(c)
    return Dataset(np.stack(images), np.array(labels), [d.name for d in class_dirs], "image")


def save_image_dataset(ds: Dataset, root: str | Path) -> None:
    """Write a dataset as PNG files in the directory-per-class layout."""
    from PIL import Image

    root = Path(root)
    for c, name in enumerate(ds.class_names):
        (root / name).mkdir(parents=True, exist_ok=True)
    per_class = {c: 0 for c in range(ds.num_classes)}
    for img, y in zip(ds.images, ds.labels):
        arr = np.clip(np.round(img.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        name = ds.class_names[int(y)]
        Image.fromarray(arr).save(root / name / f"{per_class[int(y)]:05d}.png")
        per_class[int(y)] += 1


# ------------------------------------------------------ pseudo-image container
PSEUDO_MAGIC = b"PKDPSIM\x00"


def save_pseudo_images(path: str | Path, matrices: np.ndarray, labels: Sequence[int], class_names: Sequence[str] | None = None) -> None:
    """``MAGIC | u64 header length | JSON header | raw little-endian values``."""
    m = np.ascontiguousarray(matrices)
    if m.ndim != 3 or m.shape[1] != m.shape[2]:
        raise DataError(f"expected [N,S,S] square matrices, got {m.shape}")
    labels = [int(y) for y in labels]
    if len(labels) != len(m):
        raise DataError("one label per matrix required")
    if class_names is None:
        class_names = [str(c) for c in range(max(labels) + 1)]
    le = m.astype(m.dtype.newbyteorder("<"), copy=False)
    header = {"count": len(m), "size": m.shape[1], "dtype": le.dtype.str, "labels": labels, "class_names": list(class_names)}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PSEUDO_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(le.tobytes())


def load_pseudo_images(path: str | Path, tol: float = 1e-6) -> Dataset:
    buf = Path(path).read_bytes()
    if not buf.startswith(PSEUDO_MAGIC):
        raise DataError(f"{path}: not a pseudo-image container")
    (hlen,) = struct.unpack_from("<Q", buf, len(PSEUDO_MAGIC))
    start = len(PSEUDO_MAGIC) + 8
    header = json.loads(buf[start : start + hlen])
    dtype = np.dtype(header["dtype"])
    n, s = header["count"], header["size"]
    body = buf[start + hlen :]
    if len(body) != n * s * s * dtype.itemsize:
        raise DataError(f"{path}: payload size does not match {n} matrices of {s}x{s} (ragged or truncated)")
    mats = np.frombuffer(body, dtype=dtype).reshape(n, s, s).astype(dtype.newbyteorder("="))
    for i, m in enumerate(mats):
        dev = np.abs(m - m.T).max()
        if dev > tol:
            raise DataError(f"{path}: matrix {i} is not symmetric (max deviation {dev:.3g})")
    return Dataset(mats[:, None].copy(), np.array(header["labels"]), header["class_names"], "pseudo-image")


# ------------------------------------------------------------------ manifest
def item_checksums(ds: Dataset) -> list[str]:
    return [hashlib.sha256(np.ascontiguousarray(img).tobytes()).hexdigest()[:16] for img in ds.images]


def write_manifest(path: str | Path, ds: Dataset, splits: dict[str, Dataset] | None = None, source: dict | None = None) -> None:
    """JSON record of items (checksum, label) and split membership."""
    entry = {
        "class_names": ds.class_names,
        "modality": ds.modality,
        "shape": list(ds.images.shape[1:]),
        "items": [{"index": i, "label": int(y), "sha256_16": h} for i, (y, h) in enumerate(zip(ds.labels, item_checksums(ds)))],
        "source": source or {},
    }
    if splits:
        entry["splits"] = {k: [int(i) for i in v.indices] for k, v in splits.items()}
        entry["split_checksum"] = split_checksum(*splits.values())
    Path(path).write_text(json.dumps(entry, indent=1, sort_keys=True))


def synthetic_spec_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    d.pop("families")
    return d
