"""Volumes, raw+JSON persistence and a synthetic Gaussian-blob generator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError, FormatError
from .rng import keyed_rng


@dataclass(frozen=True)
class Volume:
    """Channel-major ``C x D x H x W`` float32 scalar field with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise DataError(f"volume data must be C x D x H x W, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise DataError("volume contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    dims: tuple[int, int, int] = (48, 48, 48)
    n_blobs: int = 6
    radius_range: tuple[float, float] = (3.0, 7.0)
    intensity_range: tuple[float, float] = (1.0, 3.0)
    noise_sigma: float = 0.2
    label_classes: int = 2

    def validate(self) -> None:
        lo, hi = self.radius_range
        if self.label_classes < 1:
            raise ConfigError(f"label_classes must be >= 1, got {self.label_classes}")
        if self.n_blobs < 0:
            raise ConfigError("n_blobs must be non-negative")
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid radius range {self.radius_range}")
        if any(hi > d / 2 for d in self.dims):
            raise ConfigError(f"dims {self.dims} too small for radius range {self.radius_range}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class Blob:
    center: tuple[float, float, float]
    radius: float
    label: int
    amplitude: float


def class_amplitude(label: int, spec: SynthSpec) -> float:
    lo, hi = spec.intensity_range
    if spec.label_classes == 1:
        return 0.5 * (lo + hi)
    return lo + (hi - lo) * (label - 1) / (spec.label_classes - 1)


def synth_blobs(spec: SynthSpec, max_tries: int = 2000) -> list[Blob]:
    """Non-overlapping blob placements for ``spec`` (deterministic under the seed)."""
    spec.validate()
    rng = keyed_rng(spec.seed, "synth-blobs")
    lo, hi = spec.radius_range
    blobs: list[Blob] = []
    for _ in range(spec.n_blobs):
        for _ in range(max_tries):
            r = float(rng.uniform(lo, hi))
            c = tuple(float(rng.uniform(r, d - 1 - r)) for d in spec.dims)
            if all(np.linalg.norm(np.subtract(c, b.center)) > r + b.radius + 1.0 for b in blobs):
                break
        else:
            raise ConfigError(f"could not place {spec.n_blobs} non-overlapping blobs in {spec.dims}")
        label = int(rng.integers(1, spec.label_classes + 1))
        amp = class_amplitude(label, spec) * float(rng.uniform(0.95, 1.05))
        blobs.append(Blob(c, r, label, amp))
    return blobs


def synth_generate(spec: SynthSpec) -> tuple[Volume, Volume]:
    """Intensity volume (z-scored) and integer label volume (0 = background)."""
    blobs = synth_blobs(spec)
    rng = keyed_rng(spec.seed, "synth-noise")
    grid = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in spec.dims], indexing="ij"))
    intensity = np.zeros(spec.dims)
    labels = np.zeros(spec.dims)
    for b in blobs:
        d2 = ((grid - np.reshape(b.center, (3, 1, 1, 1))) ** 2).sum(axis=0)
        width = b.radius / 2.0
        intensity += b.amplitude * np.exp(-d2 / (2 * width * width))
        labels[d2 <= b.radius * b.radius] = b.label
    intensity += rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    vol = zscore_normalize(Volume(intensity[None]))
    return vol, Volume(labels[None])


def zscore_normalize(v: Volume) -> Volume:
    x = v.data.astype(np.float64)
    mu = x.mean(axis=(1, 2, 3), keepdims=True)
    sd = x.std(axis=(1, 2, 3), keepdims=True)
    if np.any(sd <= 0):
        raise DegenerateInputError("cannot z-score a constant volume (std == 0)")
    return v.with_data((x - mu) / sd)


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".raw", ".json") else p


def save_raw(path, v: Volume) -> tuple[Path, Path]:
    """Write ``<stem>.json`` (dims, spacing, channels, dtype) and ``<stem>.raw`` (little-endian f32)."""
    stem = _stem(path)
    header = {"dims": list(v.dims), "spacing": list(v.spacing), "channels": v.channels, "dtype": "f32le"}
    jpath, rpath = stem.with_suffix(".json"), stem.with_suffix(".raw")
    jpath.write_text(json.dumps(header, indent=2), encoding="utf-8")
    rpath.write_bytes(v.data.astype("<f4").tobytes(order="C"))
    return jpath, rpath


def load_raw(path) -> Volume:
    stem = _stem(path)
    jpath, rpath = stem.with_suffix(".json"), stem.with_suffix(".raw")
    try:
        header = json.loads(jpath.read_text(encoding="utf-8"))
        dims = tuple(int(d) for d in header["dims"])
        channels = int(header["channels"])
        spacing = tuple(float(s) for s in header["spacing"])
        dtype = header["dtype"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{jpath}: bad header ({e})") from None
    if dtype != "f32le" or len(dims) != 3 or len(spacing) != 3:
        raise FormatError(f"{jpath}: unsupported header {header}")
    payload = rpath.read_bytes()
    expected = channels * int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise FormatError(f"{rpath}: expected {expected} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape((channels,) + dims)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{rpath}: payload contains non-finite values")
    return Volume(arr.astype(np.float32), spacing)
