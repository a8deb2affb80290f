"""Procedural organ phantoms with a graded severity label.

An organ is a star-shaped region: an ellipse whose boundary radius is
perturbed by a sinusoid of severity-scaled amplitude ("nodularity"), filled
with a bright base intensity plus severity-scaled speckle. Geometry depends
only on the seed, so one seed rendered at every severity differs only in
amplitude and speckle variance.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .rng import RngState

# design constants of the generator
AMPLITUDE = (0.0, 0.05, 0.10, 0.18)  # boundary perturbation, fraction of min(H, W)
SPECKLE_VAR = (0.001, 0.004, 0.008, 0.015)
BACKGROUND = 0.15
BACKGROUND_VAR = 0.0005  # faint acquisition noise outside the organ
ORGAN = 0.65
THRESHOLD = 0.5 * (BACKGROUND + ORGAN)
POOL = 8
COND_DIM = POOL * POOL + 4
PHANTOM_MAGIC = b"TWPH"


class Severity(IntEnum):
    NONE = 0
    LOW = 1
    MILD = 2
    SEVERE = 3


@dataclass(frozen=True, eq=False)
class PhantomSample:
    image: np.ndarray  # (H, W) in [0, 1]
    mask: np.ndarray  # (H, W) uint8, 1 = organ
    severity: Severity
    seed: int

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape


@dataclass(frozen=True)
class Geometry:
    center: tuple[float, float]
    axes: tuple[float, float]
    rotation: float
    lobes: int
    phase: float


def _geometry(seed: int, size: int) -> Geometry:
    g = RngState(seed).child("phantom", "geometry").generator()
    c = size / 2.0 + g.uniform(-0.05, 0.05, size=2) * size
    a = g.uniform(0.24, 0.30) * size
    b = g.uniform(0.21, 0.26) * size
    return Geometry((float(c[0]), float(c[1])), (float(a), float(b)), float(g.uniform(0, np.pi)), int(g.integers(5, 9)), float(g.uniform(0, 2 * np.pi)))


def boundary_radius(geom: Geometry, angle: np.ndarray, amplitude: float) -> np.ndarray:
    a, b = geom.axes
    phi = angle - geom.rotation
    r_ellipse = a * b / np.sqrt((b * np.cos(phi)) ** 2 + (a * np.sin(phi)) ** 2)
    return r_ellipse + amplitude * np.sin(geom.lobes * angle + geom.phase)


def organ_mask(seed: int, severity: int, size: int = 32) -> np.ndarray:
    geom = _geometry(seed, size)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - geom.center[0], xx - geom.center[1]
    rho = np.hypot(dx, dy)
    ang = np.arctan2(dy, dx)
    amp = AMPLITUDE[int(severity)] * size
    inside = rho < boundary_radius(geom, ang, amp)
    # thin lobes can pixelate into islands at small sizes; keep the main body
    labels, count = ndimage.label(inside)
    if count > 1:
        sizes = np.bincount(labels.ravel())[1:]
        inside = labels == 1 + int(np.argmax(sizes))
    return inside.astype(np.uint8)


def gen_phantom(seed: int, severity: int | Severity, size: int = 32) -> PhantomSample:
    try:
        sev = Severity(int(severity))
    except ValueError as exc:
        raise ConfigError(f"unknown severity {severity!r}") from exc
    if size < POOL or size % POOL:
        raise ConfigError(f"image size must be a positive multiple of {POOL}")
    mask = organ_mask(seed, sev, size)
    noise = RngState(seed).child("phantom", "speckle").generator().standard_normal((size, size))
    organ = mask.astype(bool)
    img = BACKGROUND + np.sqrt(BACKGROUND_VAR) * noise
    img[organ] = ORGAN + np.sqrt(SPECKLE_VAR[sev]) * noise[organ]
    return PhantomSample(np.clip(img, 0.0, 1.0), mask, sev, int(seed))


def encode_condition(sample: PhantomSample) -> np.ndarray:
    """8x8 average-pooled mask followed by the severity one-hot (68 values)."""
    return condition_vector(sample.mask, sample.severity)


def condition_vector(mask: np.ndarray, severity: int) -> np.ndarray:
    h, w = mask.shape
    if h % POOL or w % POOL:
        raise ConfigError(f"mask size {mask.shape} is not divisible by {POOL}")
    pooled = mask.astype(np.float64).reshape(POOL, h // POOL, POOL, w // POOL).mean(axis=(1, 3))
    onehot = np.zeros(4)
    onehot[int(severity)] = 1.0
    return np.concatenate([pooled.ravel(), onehot])


def _index_hash(seed: int, i: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{i}".encode()).digest()[:8], "little")


@dataclass
class PhantomDataset:
    samples: list[PhantomSample]
    splits: dict[str, list[int]]

    def split(self, name: str) -> list[PhantomSample]:
        return [self.samples[i] for i in self.splits[name]]


def build_dataset(n: int, severity_mix, seed: int, size: int = 32) -> PhantomDataset:
    """``n`` phantoms with severities drawn from ``severity_mix``; 80/10/10 split."""
    if n < 10:
        raise ConfigError("a dataset needs at least 10 samples")
    mix = np.asarray(severity_mix, dtype=np.float64)
    if mix.shape != (4,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
        raise ConfigError("severity mix must be 4 nonnegative weights summing to 1")
    g = RngState(seed).child("phantom", "dataset").generator()
    sevs = g.choice(4, size=n, p=mix / mix.sum())
    seeds = [_index_hash(seed, i) & 0x7FFFFFFFFFFFFFFF for i in range(n)]
    samples = [gen_phantom(s, int(v), size) for s, v in zip(seeds, sevs)]
    order = sorted(range(n), key=lambda i: _index_hash(seed + 1, i))
    n_train, n_val = (8 * n) // 10, n // 10
    splits = {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val :]),
    }
    return PhantomDataset(samples, splits)


def write_sample(path: str | Path, sample: PhantomSample) -> None:
    h, w = sample.image.shape
    with open(path, "wb") as f:
        f.write(PHANTOM_MAGIC + struct.pack("<IIQ", h, w, sample.seed))
        f.write(np.ascontiguousarray(sample.image, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes())
        f.write(bytes([int(sample.severity)]))


def read_sample(path: str | Path) -> PhantomSample:
    raw = Path(path).read_bytes()
    if raw[:4] != PHANTOM_MAGIC:
        raise ConfigError(f"{path}: not a phantom file")
    h, w, seed = struct.unpack("<IIQ", raw[4:20])
    off = 20
    img = np.frombuffer(raw[off : off + 8 * h * w], dtype="<f8").reshape(h, w).astype(np.float64)
    off += 8 * h * w
    mask = np.frombuffer(raw[off : off + h * w], dtype=np.uint8).reshape(h, w).copy()
    sev = Severity(raw[off + h * w])
    return PhantomSample(img, mask, sev, seed)


def export_dataset(out_dir: str | Path, dataset: PhantomDataset) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_of = {i: name for name, idx in dataset.splits.items() for i in idx}
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "file", "seed", "severity", "split"])
        for i, s in enumerate(dataset.samples):
            name = f"phantom_{i:05d}.bin"
            write_sample(out / name, s)
            w.writerow([i, name, s.seed, int(s.severity), split_of[i]])
    return manifest


def intra_organ_variance(image: np.ndarray, mask: np.ndarray) -> float:
    vals = np.asarray(image)[np.asarray(mask).astype(bool)]
    return float(vals.var()) if vals.size > 1 else 0.0


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0
