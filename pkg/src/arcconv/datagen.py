"""Deterministic synthetic dataset of rotated bars.

Every sample is a single anti-aliased bar at a uniformly random orientation
in [0, 180) degrees, labelled by its orientation bin. All randomness comes
from splitmix64 so datasets are bit-reproducible across languages/platforms:
sample i draws from its own stream seeded by output i of the master stream.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
import re
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import ConfigurationError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4B9B79


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based splitmix64 generator (vectorized draws)."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, count: int) -> np.ndarray:
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            out = _mix64(states)
        self.state = (self.state + count * GOLDEN_GAMMA) & MASK64
        return out

    def uniform(self, count: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal(self, count: int) -> np.ndarray:
        """Standard normals by Box-Muller, consuming two uniforms per pair."""
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        angle = 2.0 * math.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).reshape(-1)
        return z[:count]


@dataclass(frozen=True)
class DatasetConfig:
    size: int = 32
    bar_length: float = 20.0
    bar_width: float = 4.0
    bins: int = 8
    jitter: float = 2.0
    noise: float = 0.05
    supersample: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.bins < 2:
            raise ConfigurationError("need at least 2 orientation bins")
        if self.supersample < 1 or self.size < 1:
            raise ConfigurationError("size and supersample must be positive")
        if self.noise < 0 or self.jitter < 0:
            raise ConfigurationError("noise and jitter must be non-negative")
        half_diag = 0.5 * math.hypot(self.bar_length, self.bar_width)
        if half_diag + self.jitter * math.sqrt(2.0) > self.size / 2:
            raise ConfigurationError(
                f"bar (half diagonal {half_diag:.2f}) with jitter {self.jitter} does not fit a {self.size}px image"
            )


@dataclass
class OrientedBarSample:
    image: np.ndarray  # [1, H, W] in [0, 1]
    orientation: float  # degrees in [0, 180)
    label: int

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.image, dtype="<f8").tobytes())
        h.update(np.float64(self.orientation).astype("<f8").tobytes())
        h.update(int(self.label).to_bytes(4, "little"))
        return h.hexdigest()[:16]


def orientation_label(orientation: float, bins: int) -> int:
    return min(int(orientation // (180.0 / bins)), bins - 1)


def render_bar(config: DatasetConfig, orientation: float, offset: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Coverage image [H, W] of a bar rotated `orientation` degrees counter-clockwise.

    `offset` = (dx, dy) moves the bar centre right / down, in pixels.
    """
    ss, size = config.supersample, config.size
    sub = (np.arange(size * ss) + 0.5) / ss
    xs, ys = np.meshgrid(sub, sub)
    phi = math.radians(orientation)
    c, s = math.cos(phi), math.sin(phi)
    dx = xs - (size / 2 + offset[0])
    dy = -(ys - (size / 2 + offset[1]))
    along = dx * c + dy * s
    across = -dx * s + dy * c
    inside = (np.abs(along) <= config.bar_length / 2) & (np.abs(across) <= config.bar_width / 2)
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def generate_sample(config: DatasetConfig, index: int, orientation: Optional[float] = None) -> OrientedBarSample:
    master = SplitMix64(config.seed)
    master.state = (master.state + index * GOLDEN_GAMMA) & MASK64
    stream = SplitMix64(int(master.next_u64(1)[0]))
    u = stream.uniform(3)
    theta = float(u[0] * 180.0) if orientation is None else float(orientation) % 180.0
    offset = ((2 * u[1] - 1) * config.jitter, (2 * u[2] - 1) * config.jitter)
    img = render_bar(config, theta, offset)
    if config.noise > 0:
        img = np.clip(img + config.noise * stream.normal(img.size).reshape(img.shape), 0.0, 1.0)
    return OrientedBarSample(image=img[None], orientation=theta, label=orientation_label(theta, config.bins))


def generate(config: DatasetConfig, count: int, orientation: Optional[float] = None) -> List[OrientedBarSample]:
    """Generate `count` samples; `orientation` pins every sample's angle (for tests)."""
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    config.validate()
    return [generate_sample(config, i, orientation) for i in range(count)]


def split(dataset: Sequence, train_fraction: float, seed: int = 0):
    """Deterministic shuffled split into (train, test)."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError("train_fraction must lie in (0, 1)")
    count = len(dataset)
    n_train = int(round(count * train_fraction))
    if n_train < 1 or n_train >= count:
        raise ConfigurationError(f"split of {count} samples at {train_fraction} leaves an empty side")
    order = list(range(count))
    draws = SplitMix64(seed).next_u64(count)
    for i in range(count - 1, 0, -1):  # Fisher-Yates
        j = int(draws[i]) % (i + 1)
        order[i], order[j] = order[j], order[i]
    return [dataset[i] for i in order[:n_train]], [dataset[i] for i in order[n_train:]]


def to_arrays(samples: Sequence[OrientedBarSample], dtype=np.float64):
    x = np.stack([s.image for s in samples]).astype(dtype)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def dataset_checksum(samples: Iterable[OrientedBarSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.checksum().encode())
    return h.hexdigest()


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write a [H, W] or [1, H, W] image in [0, 1] as 8-bit binary PGM (P5)."""
    img = np.asarray(image).reshape(image.shape[-2:])
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(raw[m.end(): m.end() + w * h], dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / maxval


MANIFEST_HEADER = ("index", "orientation_deg", "label", "checksum")


def write_manifest(path: str, samples: Sequence[OrientedBarSample]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for i, s in enumerate(samples):
            writer.writerow([i, repr(s.orientation), s.label, s.checksum()])


def export(out_dir: str, samples: Sequence[OrientedBarSample], pgm: bool = False) -> str:
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest, samples)
    if pgm:
        for i, s in enumerate(samples):
            write_pgm(os.path.join(out_dir, f"sample_{i:05d}.pgm"), s.image)
    return manifest
