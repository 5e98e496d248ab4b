"""Overlap alignment (3-D ROIAlign) and the loss family of the pretraining objective.

Target arguments (teacher features) are always detached inside the losses, so
gradients only reach the student argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor
from .views import Box3

CONSIS_KINDS = ("none", "cosine", "ntxent", "gram")
_KIND_ALIASES = {"cva": "cosine", "c-cva": "ntxent", "ccva": "ntxent"}


@dataclass(frozen=True)
class LossWeights:
    lambda_recon: float = 1.0
    lambda_consis: float = 1.0
    lambda_con: float = 1.0
    consis_kind: str = "cosine"
    temperature: float = 0.1
    huber_delta: float = 1.0
    recon_kind: str = "huber"

    def __post_init__(self):
        object.__setattr__(self, "consis_kind", _KIND_ALIASES.get(self.consis_kind.lower(), self.consis_kind.lower()))
        if min(self.lambda_recon, self.lambda_consis, self.lambda_con) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.huber_delta <= 0:
            raise ConfigError(f"huber_delta must be positive, got {self.huber_delta}")
        if self.consis_kind not in CONSIS_KINDS:
            raise ConfigError(f"consis_kind must be one of {CONSIS_KINDS}, got {self.consis_kind!r}")
        if self.recon_kind not in ("huber", "l2"):
            raise ConfigError(f"recon_kind must be 'huber' or 'l2', got {self.recon_kind!r}")

    def effective(self) -> dict[str, float]:
        return {
            "recon": self.lambda_recon,
            "consis": self.lambda_consis if self.consis_kind != "none" else 0.0,
            "con": self.lambda_con,
        }


# -- ROIAlign ---------------------------------------------------------------------

def roi_sample_coords(origin: int, size: int, crop_ext: int, feat_ext: int, out_res: int) -> np.ndarray:
    """Sample positions (feature index units) for each output bin along one axis; shape ``out_res x n``.

    Crop voxel ``i`` spans ``[i, i+1)``; feature cell ``j`` has its centre at
    ``(j + 0.5) / scale`` in crop units with ``scale = feat_ext / crop_ext``.
    Each bin takes ``max(1, ceil(bin_width))`` evenly spaced samples, so a
    full-crop box at the feature resolution samples exactly the cell centres.
    """
    s = feat_ext / crop_ext
    start, width = origin * s, size * s
    bw = width / out_res
    n = max(1, math.ceil(bw - 1e-9))
    b = np.arange(out_res)[:, None]
    q = np.arange(n)[None, :]
    pos = start + (b + (q + 0.5) / n) * bw - 0.5
    return np.clip(pos, 0.0, feat_ext - 1)


def roi_matrix(origin: int, size: int, crop_ext: int, feat_ext: int, out_res: int) -> np.ndarray:
    pts = roi_sample_coords(origin, size, crop_ext, feat_ext, out_res)
    r, n = pts.shape
    return T.interp_matrix(pts.reshape(-1), feat_ext).reshape(r, n, feat_ext).mean(axis=1)


def roi_align_3d(fmap: Tensor, omega: Box3, crop_ext, out_res) -> Tensor:
    """Average of trilinear samples over each output bin of ``omega`` (given in crop voxels)."""
    if fmap.ndim != 4:
        raise DimensionError(f"roi_align_3d expects C x D x H x W, got {fmap.shape}")
    crop_ext = tuple(int(c) for c in crop_ext)
    out_res = tuple(int(r) for r in out_res)
    if any(r < 1 for r in out_res):
        raise ContractError(f"out_res must be positive, got {out_res}")
    if not omega.within(crop_ext):
        raise ContractError(f"omega {omega} outside crop extents {crop_ext}")
    out = fmap
    for ax in range(3):
        m = roi_matrix(omega.origin[ax], omega.size[ax], crop_ext[ax], fmap.shape[ax + 1], out_res[ax])
        out = T.resample_axis(out, m, ax + 1)
    return out


def flatten_cells(fmap: Tensor) -> Tensor:
    """``C x d x h x w`` to ``p x C`` (one row per aligned cell)."""
    c = fmap.shape[0]
    return T.transpose(T.reshape(fmap, (c, -1)), (1, 0))


# -- consistency losses -----------------------------------------------------------------

def _check_pair(u: Tensor, h: Tensor, name: str) -> None:
    if u.ndim != 2 or u.shape != h.shape:
        raise DimensionError(f"{name}: expected matching p x d inputs, got {u.shape} and {h.shape}")


def cosine_loss(u: Tensor, h_t: Tensor) -> Tensor:
    """``2 - 2 cos(u, h)`` averaged over rows; ``h_t`` is gradient-stopped."""
    _check_pair(u, h_t, "cosine_loss")
    un = T.l2_normalize(u, axis=1)
    hn = T.l2_normalize(h_t.detach(), axis=1)
    cos = T.tsum(un * hn, axis=1)
    return 2.0 - 2.0 * T.mean(cos)


def ntxent_loss(anchors: Tensor, targets: Tensor, temperature: float) -> Tensor:
    """Cross-entropy of each anchor against all targets, positive on the diagonal.

    ``-log exp(s_ii / t) / sum_k exp(s_ik / t)`` with cosine similarities
    ``s``, averaged over anchors, evaluated through a stabilised log-softmax.
    """
    _check_pair(anchors, targets, "ntxent_loss")
    n = anchors.shape[0]
    if n < 2:
        raise ContractError(f"NT-Xent needs at least 2 rows (one negative), got {n}")
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    a = T.l2_normalize(anchors, axis=1)
    b = T.l2_normalize(targets.detach(), axis=1)
    logits = T.scale(T.matmul(a, T.transpose(b, (1, 0))), 1.0 / temperature)
    logp = T.log_softmax(logits, axis=1)
    diag = T.index(logp, (np.arange(n), np.arange(n)))
    return -T.mean(diag)


def gram_loss(z_s: Tensor, z_t: Tensor) -> Tensor:
    """Squared Frobenius distance between Gram matrices of row-normalised features."""
    _check_pair(z_s, z_t, "gram_loss")
    a = T.l2_normalize(z_s, axis=1)
    b = T.l2_normalize(z_t.detach(), axis=1)
    ga = T.matmul(a, T.transpose(a, (1, 0)))
    gb = T.matmul(b, T.transpose(b, (1, 0)))
    return T.tsum(T.square(ga - gb))


def sym_consistency(u1: Tensor, h2t: Tensor, u2: Tensor, h1t: Tensor, kind: str = "cosine", temperature: float = 0.1) -> Tensor:
    """Average of the two directed losses (view 1 predicts view 2 and vice versa)."""
    kind = _KIND_ALIASES.get(kind, kind)
    if kind == "cosine":
        fn = cosine_loss
    elif kind == "ntxent":
        fn = lambda a, b: ntxent_loss(a, b, temperature)  # noqa: E731
    elif kind == "gram":
        fn = gram_loss
    else:
        raise ConfigError(f"unknown consistency kind {kind!r}")
    return 0.5 * fn(u1, h2t) + 0.5 * fn(u2, h1t)


def sym_gram(z1s: Tensor, z2t: Tensor, z2s: Tensor, z1t: Tensor) -> Tensor:
    return sym_consistency(z1s, z2t, z2s, z1t, kind="gram")


def global_contrastive(u1: Tensor, h2t: Tensor, u2: Tensor, h1t: Tensor, temperature: float = 0.1) -> Tensor:
    """Symmetrised NT-Xent over per-crop pooled vectors (``n x d`` each, ``n >= 2``)."""
    return sym_consistency(u1, h2t, u2, h1t, kind="ntxent", temperature=temperature)


# -- reconstruction ------------------------------------------------------------------

def huber(d: Tensor, delta: float = 1.0) -> Tensor:
    ad = T.tabs(d)
    quad = 0.5 * T.square(d)
    lin = T.scale(ad - 0.5 * delta, delta)
    return T.where(ad.data <= delta, quad, lin)


def recon_loss(pred: Tensor, target, mask: np.ndarray | None = None, kind: str = "huber", delta: float = 1.0) -> Tensor:
    """Mean per-voxel loss over masked voxels, or over all voxels when the mask is empty (AE mode).

    ``mask`` is a spatial boolean array broadcast over channels.
    """
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise DimensionError(f"recon_loss shapes differ: {pred.shape} vs {target.shape}")
    d = pred - target.detach()
    if kind == "huber":
        per = huber(d, delta)
    elif kind == "l2":
        per = T.square(d)
    else:
        raise ConfigError(f"unknown reconstruction loss {kind!r}")
    if mask is None or not np.any(mask):
        return T.mean(per)
    w = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), pred.shape)
    return T.scale(T.tsum(per * Tensor(w, dtype=pred.dtype)), 1.0 / float(w.sum()))


# -- objective ------------------------------------------------------------------------------

Component = Tensor | Callable[[], Tensor]


def total_objective(components: Mapping[str, Component], weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of ``recon``, ``consis`` and ``con``.

    Components may be tensors or zero-argument callables; terms with zero
    weight are never evaluated and are reported as 0.
    """
    lam = weights.effective()
    total = None
    breakdown: dict[str, float] = {}
    dtype = None
    for name in ("recon", "consis", "con"):
        w = lam[name]
        comp = components.get(name)
        if w == 0.0 or comp is None:
            breakdown[name] = 0.0
            continue
        value = comp() if callable(comp) else comp
        dtype = value.dtype
        breakdown[name] = value.item()
        term = T.scale(value, w)
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0, dtype=dtype)
    breakdown["total"] = total.item()
    return total, breakdown
