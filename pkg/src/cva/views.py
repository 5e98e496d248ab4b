"""Paired crops with a bounded overlap fraction, plus the spatial-then-intensity augmentation pipeline.

Spatial transforms (mirroring) are applied to the source volume before
cropping, so both views share them and the overlap region is a pure
translation between the two crops. Each crop then receives exactly one
intensity transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from .errors import AugmentationError, ContractError, InputError, SamplingError
from .rng import keyed_rng
from .volume import Volume

Triple = tuple[int, int, int]


@dataclass(frozen=True)
class Box3:
    """Axis-aligned integer box: ``origin`` (z, y, x) and ``size`` (d, h, w), half-open."""

    origin: Triple
    size: Triple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if len(self.origin) != 3 or len(self.size) != 3:
            raise ContractError(f"Box3 needs 3-D origin and size, got {self.origin}, {self.size}")
        if any(s < 1 for s in self.size):
            raise ContractError(f"Box3 sizes must be >= 1, got {self.size}")

    @property
    def end(self) -> Triple:
        return tuple(o + s for o, s in zip(self.origin, self.size))

    @property
    def volume(self) -> int:
        return math.prod(self.size)

    def within(self, dims) -> bool:
        return all(o >= 0 and e <= d for o, e, d in zip(self.origin, self.end, dims))

    def contains(self, other: "Box3") -> bool:
        return all(o <= oo and oe <= e for o, e, oo, oe in zip(self.origin, self.end, other.origin, other.end))

    def translate(self, delta) -> "Box3":
        return Box3(tuple(o + d for o, d in zip(self.origin, delta)), self.size)

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, e) for o, e in zip(self.origin, self.end))


def intersection(a: Box3, b: Box3) -> Box3 | None:
    lo = [max(x, y) for x, y in zip(a.origin, b.origin)]
    hi = [min(x, y) for x, y in zip(a.end, b.end)]
    if any(h <= l for l, h in zip(lo, hi)):
        return None
    return Box3(lo, [h - l for l, h in zip(lo, hi)])


def overlap_fraction(a: Box3, b: Box3, v_p: int) -> float:
    inter = intersection(a, b)
    return 0.0 if inter is None else inter.volume / v_p


def map_overlap_to_local(src_overlap: Box3, crop_box: Box3) -> Box3:
    if not crop_box.contains(src_overlap):
        raise ContractError(f"overlap {src_overlap} not contained in crop {crop_box}")
    return src_overlap.translate(tuple(-o for o in crop_box.origin))


def map_local_to_source(local: Box3, crop_box: Box3) -> Box3:
    return local.translate(crop_box.origin)


@dataclass(frozen=True)
class SamplerConfig:
    crop_size: Triple = (32, 32, 32)
    gamma_min: float = 0.4
    gamma_max: float = 0.8
    max_attempts: int = 100

    def __post_init__(self):
        object.__setattr__(self, "crop_size", tuple(int(c) for c in self.crop_size))
        if not 0 < self.gamma_min <= self.gamma_max <= 1:
            raise ContractError(f"need 0 < gamma_min <= gamma_max <= 1, got {self.gamma_min}, {self.gamma_max}")
        if any(c < 1 for c in self.crop_size):
            raise ContractError(f"crop_size must be positive, got {self.crop_size}")
        if self.max_attempts < 1:
            raise ContractError("max_attempts must be >= 1")

    @property
    def v_p(self) -> int:
        return math.prod(self.crop_size)


# paper-scale crop, kept for reference and geometry tests
PAPER_CROP: Triple = (160, 160, 160)


def _place_second(o1, off, src, crop, rng) -> list[int] | None:
    o2 = []
    for k in range(3):
        signs = (1, -1) if rng.random() < 0.5 else (-1, 1)
        for s in signs:
            p = o1[k] + s * off[k]
            if 0 <= p <= src[k] - crop[k]:
                o2.append(p)
                break
        else:
            return None
    return o2


_REDRAWS_PER_TARGET = 10


def sample_boxes(src_dims, cfg: SamplerConfig, rng: np.random.Generator) -> tuple[Box3, Box3]:
    """Two crop boxes in the source frame whose overlap fraction lies in ``[gamma_min, gamma_max]``.

    Constructive: draw a target fraction ``f``, split it into per-axis overlap
    ratios (two drawn uniformly from ranges truncated so that the solved third
    ratio stays feasible for the source slack), then offset the second crop.
    Falls back to rejection sampling of the second origin when construction
    keeps leaving the source.
    """
    src = tuple(int(d) for d in src_dims)
    crop = cfg.crop_size
    if any(s < c for s, c in zip(src, crop)):
        raise InputError(f"source {src} smaller than crop {crop}")
    o1 = [int(rng.integers(0, s - c + 1)) for s, c in zip(src, crop)]
    box1 = Box3(o1, crop)
    vp = cfg.v_p

    # smallest per-axis overlap ratio the source slack allows
    geo_lo = [max(1.0 - (s - c) / c, 1.0 / c) for s, c in zip(src, crop)]
    f = 0.0
    for attempt in range(cfg.max_attempts):
        # keep the target fraction for a few geometric redraws so infeasible
        # placements do not bias the fraction distribution too strongly
        if attempt % _REDRAWS_PER_TARGET == 0:
            f = float(rng.uniform(cfg.gamma_min, cfg.gamma_max))
        # prefer moderate aspect ratios when the target allows it
        lows = [max(g, 0.8 * f ** (1.0 / 3.0)) for g in geo_lo]
        if math.prod(lows) > f:
            lows = geo_lo
            if math.prod(lows) > f:
                continue
        a1, a2, a3 = (int(a) for a in rng.permutation(3))
        r1 = float(rng.uniform(max(lows[a1], f), min(1.0, f / (lows[a2] * lows[a3]))))
        r2 = float(rng.uniform(max(lows[a2], f / r1), min(1.0, f / (r1 * lows[a3]))))
        ov = [0, 0, 0]
        ov[a1] = min(max(int(round(r1 * crop[a1])), 1), crop[a1])
        ov[a2] = min(max(int(round(r2 * crop[a2])), 1), crop[a2])
        ov[a3] = min(max(int(round(f * vp / (ov[a1] * ov[a2]))), 1), crop[a3])
        frac = math.prod(ov) / vp
        if not cfg.gamma_min <= frac <= cfg.gamma_max:
            continue
        o2 = _place_second(o1, [c - v for c, v in zip(crop, ov)], src, crop, rng)
        if o2 is not None:
            return box1, Box3(o2, crop)

    for _ in range(cfg.max_attempts):
        box2 = Box3([int(rng.integers(0, s - c + 1)) for s, c in zip(src, crop)], crop)
        if cfg.gamma_min <= overlap_fraction(box1, box2, vp) <= cfg.gamma_max:
            return box1, box2
    raise SamplingError(
        f"no crop pair with overlap in [{cfg.gamma_min}, {cfg.gamma_max}] after "
        f"{2 * cfg.max_attempts} attempts (source {src}, crop {crop})"
    )


# -- augmentation ---------------------------------------------------------------

INTENSITY_OPS = ("none", "gaussian_noise", "rician_noise", "blur", "brightness", "contrast", "gamma")


@dataclass(frozen=True)
class AugmentRecord:
    """Everything needed to replay one crop's augmentation.

    ``mirror_axes`` is a bitmask (bit k flips axis k of z, y, x). ``noise_key``
    is the rng key the noise ops draw from.
    """

    mirror_axes: int = 0
    op: str = "none"
    param: float = 0.0
    noise_key: tuple[int, ...] = ()

    def __post_init__(self):
        if self.op not in INTENSITY_OPS:
            raise ContractError(f"unknown intensity op {self.op!r}")


@dataclass(frozen=True)
class AugmentConfig:
    ops: tuple[str, ...] = INTENSITY_OPS
    mirror_p: float = 0.5
    noise_sigma: tuple[float, float] = (0.0, 0.1)
    blur_sigmas: tuple[float, ...] = (0.5, 1.0)
    brightness: tuple[float, float] = (-0.2, 0.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    gamma: tuple[float, float] = (0.7, 1.5)


def draw_mirror_axes(rng: np.random.Generator, p: float = 0.5) -> int:
    return sum(1 << k for k in range(3) if rng.random() < p)


def apply_spatial(src: Volume, mirror_axes: int) -> Volume:
    axes = tuple(k + 1 for k in range(3) if mirror_axes >> k & 1)
    if not axes:
        return src
    return src.with_data(np.flip(src.data, axis=axes))


def draw_intensity(rng: np.random.Generator, cfg: AugmentConfig, mirror_axes: int, noise_key) -> AugmentRecord:
    op = cfg.ops[int(rng.integers(len(cfg.ops)))]
    if op in ("gaussian_noise", "rician_noise"):
        param = float(rng.uniform(*cfg.noise_sigma))
    elif op == "blur":
        param = float(cfg.blur_sigmas[int(rng.integers(len(cfg.blur_sigmas)))])
    elif op in ("brightness", "contrast", "gamma"):
        param = float(rng.uniform(*getattr(cfg, op)))
    else:
        param = 0.0
    return AugmentRecord(mirror_axes, op, param, tuple(noise_key))


def gaussian_kernel1d(sigma: float, truncate: float = 3.0) -> np.ndarray:
    radius = max(1, int(math.ceil(truncate * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur over the three spatial axes of a ``C x D x H x W`` array, half-sample reflective padding."""
    k = gaussian_kernel1d(sigma)
    out = x.astype(np.float64)
    for ax in (1, 2, 3):
        out = convolve1d(out, k, axis=ax, mode="reflect")
    return out


def apply_intensity(crop: Volume, record: AugmentRecord) -> Volume:
    x = crop.data.astype(np.float64)
    op, p = record.op, record.param
    if op == "none":
        return crop
    if op == "gaussian_noise":
        y = x + keyed_rng(*record.noise_key).normal(0.0, p, size=x.shape)
    elif op == "rician_noise":
        rng = keyed_rng(*record.noise_key)
        n1 = rng.normal(0.0, p, size=x.shape)
        n2 = rng.normal(0.0, p, size=x.shape)
        # magnitude noise needs a non-negative signal; shift by the minimum and back
        shift = x.min()
        y = np.sqrt((x - shift + n1) ** 2 + n2 ** 2) + shift
    elif op == "blur":
        y = gaussian_blur(x, p)
    elif op == "brightness":
        y = x + p
    elif op == "contrast":
        m = x.mean()
        y = (x - m) * p + m
    elif op == "gamma":
        lo, hi = x.min(), x.max()
        if hi > lo:
            y = ((x - lo) / (hi - lo)) ** p * (hi - lo) + lo
        else:
            y = x
    else:  # pragma: no cover - guarded by AugmentRecord
        raise ContractError(op)
    if not np.all(np.isfinite(y)):
        raise AugmentationError(f"intensity op {op}({p}) produced non-finite output")
    return crop.with_data(y)


@dataclass(frozen=True)
class ViewPair:
    crop1: Volume
    crop2: Volume
    box1: Box3
    box2: Box3
    omega1: Box3
    omega2: Box3
    aug1: AugmentRecord = field(default_factory=AugmentRecord)
    aug2: AugmentRecord = field(default_factory=AugmentRecord)

    @property
    def overlap(self) -> float:
        return self.omega1.volume / self.box1.volume


def crop(v: Volume, box: Box3) -> Volume:
    if not box.within(v.dims):
        raise ContractError(f"crop box {box} outside volume dims {v.dims}")
    return v.with_data(v.data[(slice(None),) + box.slices()])


def sample_crop_pair(src: Volume, cfg: SamplerConfig, rng: np.random.Generator) -> ViewPair:
    """Crop pair before intensity augmentation, with overlap boxes in each crop's local frame."""
    box1, box2 = sample_boxes(src.dims, cfg, rng)
    inter = intersection(box1, box2)
    if inter is None:  # only reachable with gamma_min == 0, excluded by SamplerConfig
        raise SamplingError("crops do not overlap")
    omega1 = map_overlap_to_local(inter, box1)
    omega2 = map_overlap_to_local(inter, box2)
    return ViewPair(crop(src, box1), crop(src, box2), box1, box2, omega1, omega2)


def make_view_pair(
    src: Volume,
    cfg: SamplerConfig,
    seed: int,
    volume_id: int,
    crop_index: int,
    aug: AugmentConfig | None = AugmentConfig(),
) -> ViewPair:
    """Full pipeline: shared mirroring, constrained crop pair, one intensity op per crop.

    Randomness is keyed by ``(seed, volume_id, crop_index)``. ``aug=None``
    keeps only the consistent view generation (validation mode).
    """
    key = (seed, volume_id, crop_index)
    mirror = draw_mirror_axes(keyed_rng(*key, "mirror"), aug.mirror_p) if aug is not None else 0
    flipped = apply_spatial(src, mirror)
    pair = sample_crop_pair(flipped, cfg, keyed_rng(*key, "crop"))
    if aug is None:
        rec = AugmentRecord(mirror)
        return ViewPair(pair.crop1, pair.crop2, pair.box1, pair.box2, pair.omega1, pair.omega2, rec, rec)
    recs = []
    crops = []
    for view, c in ((1, pair.crop1), (2, pair.crop2)):
        rec = draw_intensity(keyed_rng(*key, "intensity", view), aug, mirror, (*key, 7919, view))
        recs.append(rec)
        crops.append(apply_intensity(c, rec))
    return ViewPair(crops[0], crops[1], pair.box1, pair.box2, pair.omega1, pair.omega2, recs[0], recs[1])
