"""Synthetic segmentation data with controllable label corruption.

Images contain 1-3 filled ellipses on a dark background plus Gaussian
texture. Noisy labels are made by eroding or dilating the clean mask with a
disk structuring element, mimicking over/under-segmented annotations. A flat
binary container ("PNTD") persists datasets bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .errors import (
    ContractError,
    DataFormatError,
    DataVersionError,
    DegenerateInputError,
    ShapeError,
    TruncatedFileError,
)

_DATA_MAGIC = b"PNTD"
_DATA_VERSION = 1


@dataclass
class SegmentationSample:
    """One image with its clean mask, its training mask, and a corruption flag."""

    image: np.ndarray  # [1,H,W] float32
    clean_mask: np.ndarray  # [H,W] uint8 class ids, evaluation only
    noisy_mask: np.ndarray  # [H,W] uint8 class ids, what training sees
    is_corrupted: bool = False


@dataclass
class NoiseSpec:
    """Which fraction of labels to corrupt, and how strongly."""

    noise_rate: float = 0.5
    radius_min: int = 2
    radius_max: int = 5
    mode: str = "random"  # erode | dilate | random (per-sample coin flip)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ContractError(f"noise_rate must be in [0,1], got {self.noise_rate}")
        if self.radius_min < 1 or self.radius_max < self.radius_min:
            raise ContractError(
                f"need 1 <= radius_min <= radius_max, got {self.radius_min}..{self.radius_max}"
            )
        if self.mode not in ("erode", "dilate", "random"):
            raise ContractError(f"mode must be erode, dilate or random, got {self.mode!r}")


# ---------------------------------------------------------------------------
# binary morphology


def disk(radius: int) -> np.ndarray:
    """Boolean disk structuring element: {(dy,dx): dy^2+dx^2 <= r^2}."""
    if radius < 0:
        raise ContractError(f"radius must be nonnegative, got {radius}")
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return (yy * yy + xx * xx) <= radius * radius


def _disk_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.nonzero(disk(radius))
    return ys - radius, xs - radius


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a disk. Pixels pushed off the edge are dropped."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeError(f"dilate expects a 2D mask, got shape {mask.shape}")
    out = np.zeros_like(mask)
    h, w = mask.shape
    for dy, dx in zip(*_disk_offsets(radius)):
        src = mask[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
        out[max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)] |= src
    return out


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion by a disk; the region outside the image is background."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeError(f"erode expects a 2D mask, got shape {mask.shape}")
    out = np.ones_like(mask)
    h, w = mask.shape
    for dy, dx in zip(*_disk_offsets(radius)):
        shifted = np.zeros_like(mask)
        shifted[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)] = mask[
            max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)
        ]
        out &= shifted
    return out


# ---------------------------------------------------------------------------
# generation


def _draw_ellipse(mask: np.ndarray, cy, cx, ry, rx, theta) -> None:
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    yr = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
    xr = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    mask |= (yr / ry) ** 2 + (xr / rx) ** 2 <= 1.0


def generate_shapes(n: int, height: int, width: int, seed: int) -> list[SegmentationSample]:
    """n clean samples of 1-3 bright ellipses (fg mean 1, bg mean 0, sigma 0.3).

    Every sample's content comes from its own (seed, index) streams, so any
    subset regenerates identically and generation parallelizes over samples.
    """
    if n <= 0:
        raise ContractError(f"n must be positive, got {n}")
    if height < 16 or width < 16:
        raise ContractError(f"images must be at least 16x16, got {height}x{width}")

    samples = []
    for i in range(n):
        shape_rng = rng_mod.stream(seed, rng_mod.SHAPES, i)
        texture_rng = rng_mod.stream(seed, rng_mod.TEXTURE, i)
        mask = np.zeros((height, width), dtype=bool)
        for _ in range(int(shape_rng.integers(1, 4))):
            cy = shape_rng.uniform(0.25 * height, 0.75 * height)
            cx = shape_rng.uniform(0.25 * width, 0.75 * width)
            ry = shape_rng.uniform(0.12 * height, 0.30 * height)
            rx = shape_rng.uniform(0.12 * width, 0.30 * width)
            theta = shape_rng.uniform(0.0, np.pi)
            _draw_ellipse(mask, cy, cx, ry, rx, theta)
        image = mask.astype(np.float64) + texture_rng.normal(0.0, 0.3, size=mask.shape)
        clean = mask.astype(np.uint8)
        samples.append(
            SegmentationSample(
                image=image[None].astype(np.float32),
                clean_mask=clean,
                noisy_mask=clean.copy(),
            )
        )
    return samples


def _corrupt_one(clean: np.ndarray, rng: np.random.Generator, spec: NoiseSpec) -> np.ndarray:
    radius = int(rng.integers(spec.radius_min, spec.radius_max + 1))
    if spec.mode == "random":
        op = "erode" if rng.random() < 0.5 else "dilate"
    else:
        op = spec.mode
    if op == "dilate":
        return dilate(clean, radius).astype(np.uint8)
    # erosion can wipe the foreground entirely; back off the radius first,
    # and accept an empty mask as a (legal) fully wrong label at radius 1
    for r in range(radius, 0, -1):
        noisy = erode(clean, r)
        if noisy.any():
            return noisy.astype(np.uint8)
    return np.zeros_like(clean)


def corrupt_labels(samples: list[SegmentationSample], spec: NoiseSpec) -> list[SegmentationSample]:
    """Replace noisy_mask on exactly round(rate*n) samples, chosen by spec.seed.

    Mutates and returns ``samples``. Images and clean masks are never touched.
    """
    n = len(samples)
    if n == 0:
        raise ContractError("corrupt_labels on an empty sample list")
    n_corrupt = int(np.floor(spec.noise_rate * n + 0.5))
    if n_corrupt == 0:
        return samples
    pick_rng = rng_mod.stream(spec.seed, rng_mod.LABEL_NOISE)
    chosen = pick_rng.choice(n, size=n_corrupt, replace=False)
    for i in sorted(int(c) for c in chosen):
        sample_rng = rng_mod.stream(spec.seed, rng_mod.LABEL_NOISE, i + 1)
        samples[i].noisy_mask = _corrupt_one(samples[i].clean_mask, sample_rng, spec)
        samples[i].is_corrupted = True
    return samples


def generate_dataset(
    n: int,
    height: int,
    width: int,
    seed: int,
    noise: NoiseSpec | None = None,
) -> list[SegmentationSample]:
    """Clean generation followed by label corruption in one call."""
    samples = generate_shapes(n, height, width, seed)
    if noise is not None and noise.noise_rate > 0.0:
        corrupt_labels(samples, noise)
    return samples


# ---------------------------------------------------------------------------
# normalization and batching


def normalize(image: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance copy of one image; rejects constant input."""
    image = np.asarray(image, dtype=np.float64)
    std = image.std()
    if std < 1e-12:
        raise DegenerateInputError("constant image cannot be normalized")
    return (image - image.mean()) / std


def batch_arrays(samples, indices, use_noisy: bool = True):
    """Stack chosen samples into ([B,1,H,W] normalized images, [B,H,W] labels)."""
    images = np.stack([normalize(samples[i].image) for i in indices])
    key = "noisy_mask" if use_noisy else "clean_mask"
    labels = np.stack([getattr(samples[i], key) for i in indices]).astype(np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# dataset container ("PNTD")


def save_dataset(path, samples: list[SegmentationSample], num_classes: int = 2) -> None:
    if not samples:
        raise ContractError("refusing to save an empty dataset")
    h, w = samples[0].image.shape[-2:]
    for i, s in enumerate(samples):
        if (
            s.image.shape != (1, h, w)
            or s.clean_mask.shape != (h, w)
            or s.noisy_mask.shape != (h, w)
        ):
            raise ShapeError(f"sample {i} shape mismatch")
        if s.clean_mask.max() >= num_classes or s.noisy_mask.max() >= num_classes:
            raise ContractError(f"sample {i} has labels >= num_classes={num_classes}")
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(struct.pack("<5I", _DATA_VERSION, len(samples), h, w, num_classes))
        for s in samples:
            fh.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.clean_mask, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(s.noisy_mask, dtype=np.uint8).tobytes())
            fh.write(struct.pack("B", 1 if s.is_corrupted else 0))


def load_dataset(path) -> list[SegmentationSample]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _DATA_MAGIC:
        raise DataFormatError(f"{path}: not a PNTD dataset file")
    if len(blob) < 24:
        raise TruncatedFileError(f"{path}: header truncated")
    version, count, h, w, num_classes = struct.unpack("<5I", blob[4:24])
    if version != _DATA_VERSION:
        raise DataVersionError(f"{path}: version {version}, expected {_DATA_VERSION}")
    if count == 0 or h == 0 or w == 0 or num_classes < 2:
        raise DataFormatError(f"{path}: bad header (count={count}, {h}x{w}, C={num_classes})")
    frame = 4 * h * w + 2 * h * w + 1
    expected = 24 + count * frame
    if len(blob) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(blob)}")

    samples: list[SegmentationSample] = []
    pos = 24
    for i in range(count):
        image = np.frombuffer(blob, dtype="<f4", count=h * w, offset=pos).reshape(1, h, w)
        pos += 4 * h * w
        clean = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w)
        pos += h * w
        noisy = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w)
        pos += h * w
        flag = blob[pos]
        pos += 1
        if flag not in (0, 1):
            raise DataFormatError(f"{path}: sample {i} has corruption flag {flag}")
        if clean.max() >= num_classes or noisy.max() >= num_classes:
            raise DataFormatError(f"{path}: sample {i} labels exceed num_classes")
        samples.append(
            SegmentationSample(
                image=image.copy(),
                clean_mask=clean.copy(),
                noisy_mask=noisy.copy(),
                is_corrupted=bool(flag),
            )
        )
    return samples
