"""Toy encoders, heads and pixel decoder.

Two backbone paths produce a spatial feature map for a crop:

* ``conv``: strided 3x3x3 conv stages; every stage is resized to a common
  resolution and the stages are concatenated along channels.
* ``token``: non-overlapping patches are linearly embedded, mixed by one
  token-mixing MLP block, and the token grid is folded back into a map.

Projector and predictor act position-wise (1x1x1) on feature maps. All
parameters live in a flat ``{name: ndarray}`` registry so they can be
EMA-averaged, optimised and checkpointed uniformly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError, LoadError
from .tensor import Tensor

Triple = tuple[int, int, int]


@dataclass(frozen=True)
class EncoderConfig:
    path: str = "conv"
    in_channels: int = 1
    crop_size: Triple = (32, 32, 32)
    channels: tuple[int, ...] = (8, 16, 32)
    strides: tuple[int, ...] = (2, 2, 2)
    patch: int = 8
    embed_dim: int = 32
    fuse_res: Triple = (8, 8, 8)
    proj_hidden: int = 32
    proj_dim: int = 32
    pred_hidden: int = 16
    dec_hidden: int = 16

    def __post_init__(self):
        for name in ("crop_size", "channels", "strides", "fuse_res"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.path not in ("conv", "token"):
            raise ConfigError(f"encoder path must be 'conv' or 'token', got {self.path!r}")
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ConfigError(f"channels {self.channels} and strides {self.strides} must be non-empty and equal length")
        if any(r < 1 for r in self.fuse_res):
            raise ConfigError(f"fuse_res must be positive, got {self.fuse_res}")
        if self.path == "token" and any(c % self.patch for c in self.crop_size):
            raise ConfigError(f"crop {self.crop_size} not divisible by patch {self.patch}")
        if any(c % self.patch for c in self.crop_size):
            # the mask grid is the patch grid for both paths
            raise ConfigError(f"crop {self.crop_size} not divisible by mask patch {self.patch}")

    @property
    def fused_channels(self) -> int:
        return sum(self.channels) if self.path == "conv" else self.embed_dim

    @property
    def grid(self) -> Triple:
        return tuple(c // self.patch for c in self.crop_size)

    @property
    def n_tokens(self) -> int:
        return math.prod(self.grid)


@dataclass
class FeaturePyramid:
    stages: list[Tensor] = field(default_factory=list)

    @property
    def extents(self) -> list[Triple]:
        return [tuple(s.shape[1:]) for s in self.stages]

    @property
    def channels(self) -> list[int]:
        return [s.shape[0] for s in self.stages]


# -- parameters -------------------------------------------------------------------

def _mlp_params(rng, prefix: str, n_in: int, n_hidden: int, n_out: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w1": rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_hidden, n_in)),
        f"{prefix}.b1": np.zeros((n_hidden, 1)),
        f"{prefix}.w2": rng.normal(0.0, math.sqrt(1.0 / n_hidden), size=(n_out, n_hidden)),
        f"{prefix}.b2": np.zeros((n_out, 1)),
    }


def init_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    c_in = cfg.in_channels
    if cfg.path == "conv":
        for i, c_out in enumerate(cfg.channels):
            fan_in = c_in * 27
            p[f"enc.stage{i}.w"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3, 3))
            p[f"enc.stage{i}.b"] = np.zeros((c_out, 1, 1, 1))
            c_in = c_out
    else:
        d, n, pv = cfg.embed_dim, cfg.n_tokens, cfg.in_channels * cfg.patch ** 3
        p["enc.embed.w"] = rng.normal(0.0, math.sqrt(1.0 / pv), size=(pv, d))
        p["enc.embed.b"] = np.zeros((1, d))
        p["enc.pos"] = rng.normal(0.0, 0.02, size=(n, d))
        p["enc.mix.w"] = rng.normal(0.0, math.sqrt(1.0 / n), size=(n, n))
        p["enc.mlp.w1"] = rng.normal(0.0, math.sqrt(2.0 / d), size=(d, d))
        p["enc.mlp.b1"] = np.zeros((1, d))
        p["enc.mlp.w2"] = rng.normal(0.0, math.sqrt(1.0 / d), size=(d, d))
        p["enc.mlp.b2"] = np.zeros((1, d))
    cf = cfg.fused_channels
    p["mask_token"] = rng.normal(0.0, 0.02, size=(cf if cfg.path == "conv" else cfg.embed_dim, 1))
    p.update(_mlp_params(rng, "proj", cf, cfg.proj_hidden, cfg.proj_dim))
    p.update(_mlp_params(rng, "pred", cfg.proj_dim, cfg.pred_hidden, cfg.proj_dim))
    p.update(_mlp_params(rng, "gproj", cf, cfg.proj_hidden, cfg.proj_dim))
    p.update(_mlp_params(rng, "gpred", cfg.proj_dim, cfg.pred_hidden, cfg.proj_dim))
    p.update(_mlp_params(rng, "dec", cf, cfg.dec_hidden, cfg.in_channels))
    return {k: np.ascontiguousarray(v, dtype=dtype) for k, v in p.items()}


# -- resizing ---------------------------------------------------------------------

def resize_coords(in_ext: int, out_ext: int) -> np.ndarray:
    """Voxel-centre aligned sample positions (input index units) for resizing ``in_ext -> out_ext``."""
    c = (np.arange(out_ext) + 0.5) * (in_ext / out_ext) - 0.5
    return np.clip(c, 0.0, in_ext - 1)


def resize(t: Tensor, out_ext) -> Tensor:
    """Trilinear resize of a ``C x D x H x W`` map (separable, voxel-centre aligned)."""
    for ax, (e_in, e_out) in enumerate(zip(t.shape[1:], out_ext)):
        if e_in != e_out:
            t = T.resample_axis(t, T.interp_matrix(resize_coords(e_in, e_out), e_in), ax + 1)
    return t


# -- encoders -----------------------------------------------------------------------

def _check_crop(crop: Tensor, cfg: EncoderConfig) -> None:
    if crop.ndim != 4 or crop.shape[0] != cfg.in_channels:
        raise DimensionError(f"crop must be {cfg.in_channels} x D x H x W, got {crop.shape}")


def tokenize(crop: Tensor, patch: int, embed_w: Tensor | None = None, embed_b: Tensor | None = None) -> Tensor:
    """Split ``C x D x H x W`` into row-major patches; returns ``n_tokens x d``.

    Without embedding weights the raw flattened patches (``d = C * patch^3``)
    are returned. Token ``i`` sits at grid cell ``(i // (gH*gW), (i // gW) % gH, i % gW)``.
    """
    c, *ext = crop.shape
    if any(e % patch for e in ext):
        raise ConfigError(f"crop extents {tuple(ext)} not divisible by patch {patch}")
    g = [e // patch for e in ext]
    x = T.reshape(crop, (c, g[0], patch, g[1], patch, g[2], patch))
    x = T.transpose(x, (1, 3, 5, 0, 2, 4, 6))
    x = T.reshape(x, (g[0] * g[1] * g[2], c * patch ** 3))
    if embed_w is not None:
        x = T.matmul(x, embed_w)
        if embed_b is not None:
            x = x + embed_b
    return x


def untokenize(tokens: Tensor, grid) -> Tensor:
    """``n_tokens x d`` back to a ``d x gD x gH x gW`` feature map."""
    n, d = tokens.shape
    if n != math.prod(grid):
        raise DimensionError(f"{n} tokens do not fill grid {tuple(grid)}")
    return T.reshape(T.transpose(tokens, (1, 0)), (d,) + tuple(grid))


def untokenize_patches(tokens: Tensor, patch: int, grid, channels: int = 1) -> Tensor:
    """Inverse of un-embedded :func:`tokenize`: reassemble raw patches into a volume."""
    g = tuple(grid)
    x = T.reshape(tokens, g + (channels, patch, patch, patch))
    x = T.transpose(x, (3, 0, 4, 1, 5, 2, 6))
    return T.reshape(x, (channels, g[0] * patch, g[1] * patch, g[2] * patch))


def encode(params: dict[str, Tensor], crop: Tensor, cfg: EncoderConfig, mask: np.ndarray | None = None) -> FeaturePyramid:
    """Feature pyramid of one crop. For the token path ``mask`` substitutes tokens with the mask token."""
    _check_crop(crop, cfg)
    if cfg.path == "conv":
        total = math.prod(cfg.strides)
        if any(e % total for e in crop.shape[1:]):
            raise ConfigError(f"crop extents {crop.shape[1:]} not divisible by cumulative stride {total}")
        stages = []
        x = crop
        for i, s in enumerate(cfg.strides):
            x = T.gelu(T.conv3d(x, params[f"enc.stage{i}.w"], stride=s, pad=1) + params[f"enc.stage{i}.b"])
            stages.append(x)
        return FeaturePyramid(stages)

    grid = tuple(e // cfg.patch for e in crop.shape[1:])
    tok = tokenize(crop, cfg.patch, params["enc.embed.w"], params["enc.embed.b"])
    if tok.shape[0] != params["enc.pos"].shape[0]:
        raise DimensionError(f"{tok.shape[0]} tokens but positional table has {params['enc.pos'].shape[0]}")
    if mask is not None and np.any(mask):
        m = np.asarray(mask, dtype=bool).reshape(-1, 1)
        tok = T.where(m, T.transpose(params["mask_token"], (1, 0)), tok)
    tok = tok + params["enc.pos"]
    tok = tok + T.matmul(params["enc.mix.w"], tok)
    hid = T.gelu(T.matmul(tok, params["enc.mlp.w1"]) + params["enc.mlp.b1"])
    tok = tok + T.matmul(hid, params["enc.mlp.w2"]) + params["enc.mlp.b2"]
    return FeaturePyramid([untokenize(tok, grid)])


def fuse_multistage(pyr: FeaturePyramid, fuse_res) -> Tensor:
    if not pyr.stages:
        raise ConfigError("cannot fuse an empty pyramid")
    if any(r < 1 for r in fuse_res):
        raise ConfigError(f"fuse_res must be positive, got {tuple(fuse_res)}")
    parts = [resize(s, fuse_res) for s in pyr.stages]
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)


def mask_to_res(mask: np.ndarray, res) -> np.ndarray:
    """Nearest-neighbour map of a cell mask onto a ``res`` grid (voxel-centre aligned)."""
    idx = [np.minimum(((np.arange(r) + 0.5) * g / r).astype(int), g - 1) for r, g in zip(res, mask.shape)]
    return mask[np.ix_(*idx)]


def features(params: dict[str, Tensor], crop: Tensor, cfg: EncoderConfig, mask: np.ndarray | None = None) -> Tensor:
    """Fused ``C' x fuse_res`` map; masked cells are replaced by the learned mask token."""
    pyr = encode(params, crop, cfg, mask if cfg.path == "token" else None)
    fused = fuse_multistage(pyr, cfg.fuse_res)
    if cfg.path == "conv" and mask is not None and np.any(mask):
        m = mask_to_res(np.asarray(mask, dtype=bool), fused.shape[1:])[None]
        token = T.reshape(params["mask_token"], (fused.shape[0], 1, 1, 1))
        fused = T.where(m, token, fused)
    return fused


# -- heads ------------------------------------------------------------------------------

def _pointwise_mlp(params, prefix: str, fmap: Tensor) -> Tensor:
    c = fmap.shape[0]
    w1 = params[f"{prefix}.w1"]
    if w1.shape[1] != c:
        raise DimensionError(f"{prefix}: expected {w1.shape[1]} input channels, got {c}")
    spatial = fmap.shape[1:]
    x = T.reshape(fmap, (c, -1))
    h = T.gelu(T.matmul(w1, x) + params[f"{prefix}.b1"])
    y = T.matmul(params[f"{prefix}.w2"], h) + params[f"{prefix}.b2"]
    return T.reshape(y, (y.shape[0],) + spatial)


def project(params, fmap: Tensor) -> Tensor:
    return _pointwise_mlp(params, "proj", fmap)


def predict(params, h: Tensor) -> Tensor:
    return _pointwise_mlp(params, "pred", h)


def pool(fmap: Tensor) -> Tensor:
    """Spatial mean: ``C x ...`` to ``C x 1``."""
    c = fmap.shape[0]
    return T.mean(T.reshape(fmap, (c, -1)), axis=1, keepdims=True)


def global_project(params, fmap: Tensor) -> Tensor:
    return _pointwise_mlp(params, "gproj", pool(fmap))


def global_predict(params, h: Tensor) -> Tensor:
    return _pointwise_mlp(params, "gpred", h)


def decode_pixels(params, fused: Tensor, out_ext) -> Tensor:
    """Pixel decoder: 1x1x1 conv, GELU, trilinear upsampling to the crop extents, 1x1x1 conv."""
    c = fused.shape[0]
    w1 = params["dec.w1"]
    if w1.shape[1] != c:
        raise DimensionError(f"decoder expects {w1.shape[1]} channels, got {c}")
    x = T.reshape(fused, (c, -1))
    h = T.gelu(T.matmul(w1, x) + params["dec.b1"])
    h = resize(T.reshape(h, (h.shape[0],) + fused.shape[1:]), out_ext)
    hd = h.shape[0]
    y = T.matmul(params["dec.w2"], T.reshape(h, (hd, -1))) + params["dec.b2"]
    return T.reshape(y, (y.shape[0],) + tuple(out_ext))


# -- masking ----------------------------------------------------------------------------

def make_mask(grid, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean cell mask with exactly ``round(ratio * n_cells)`` cells set, uniform without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1], got {ratio}")
    grid = tuple(int(g) for g in grid)
    n = math.prod(grid)
    k = int(round(ratio * n))
    m = np.zeros(n, dtype=bool)
    if k:
        m[rng.choice(n, size=k, replace=False)] = True
    return m.reshape(grid)


def mask_to_voxels(mask: np.ndarray, patch: int) -> np.ndarray:
    return np.kron(mask.astype(np.uint8), np.ones((patch,) * 3, dtype=np.uint8)).astype(bool)


# -- checkpoints --------------------------------------------------------------------------

_DTYPES = {"f64le": "<f8", "f32le": "<f4"}


def save_params(path, params: dict[str, np.ndarray], meta: dict | None = None) -> tuple[Path, Path]:
    """JSON manifest (names, shapes, dtype, offsets) plus a raw little-endian payload."""
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".raw") else p
    dtypes = {np.asarray(v).dtype for v in params.values()}
    if len(dtypes) > 1:
        raise FormatError(f"mixed parameter dtypes {dtypes}")
    tag = "f32le" if dtypes == {np.dtype(np.float32)} else "f64le"
    entries, blobs, offset = [], [], 0
    for name, arr in params.items():
        b = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    manifest = {"format": "cva-params/1", "dtype": tag, "entries": entries, "meta": meta or {}}
    jpath, rpath = stem.with_suffix(".json"), stem.with_suffix(".raw")
    jpath.write_text(json.dumps(manifest, indent=1, sort_keys=False), encoding="utf-8")
    rpath.write_bytes(b"".join(blobs))
    return jpath, rpath


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".raw") else p
    jpath, rpath = stem.with_suffix(".json"), stem.with_suffix(".raw")
    if not jpath.exists() or not rpath.exists():
        raise LoadError(f"checkpoint {stem} not found")
    manifest = json.loads(jpath.read_text(encoding="utf-8"))
    if manifest.get("format") != "cva-params/1" or manifest.get("dtype") not in _DTYPES:
        raise FormatError(f"{jpath}: not a parameter manifest")
    payload = rpath.read_bytes()
    dt = np.dtype(_DTYPES[manifest["dtype"]])
    out = {}
    for e in manifest["entries"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise FormatError(f"{rpath}: truncated at {e['name']}")
        out[e["name"]] = np.frombuffer(chunk, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return out, manifest.get("meta", {})


def config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)
