"""Finite-difference check targets for every loss and network op.

Each target builds one random instance from an ``rng``: a scalar function of
named tensors plus the arrays to differentiate with respect to. Teacher-side
arguments are held fixed in the closure, because their analytic gradient is
zero by construction.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import losses as L
from . import nets
from . import tensor as T
from .gradcheck import GradCheckReport, grad_check
from .tensor import Tensor
from .views import Box3

Instance = tuple[Callable[..., Tensor], dict[str, np.ndarray]]

TINY_ENCODER = dict(crop_size=(8, 8, 8), channels=(2, 3), strides=(2, 2), patch=4, embed_dim=4,
                    fuse_res=(2, 2, 2), proj_hidden=4, proj_dim=3, pred_hidden=3, dec_hidden=3)


def _probe(rng, shape) -> np.ndarray:
    """Fixed random weights that turn a tensor output into a scalar."""
    return rng.normal(size=shape)


def _contract(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(out * Tensor(w, dtype=out.dtype))


def _pd(rng, p=4, d=5):
    return rng.normal(size=(p, d))


def t_cosine(rng) -> Instance:
    h = Tensor(_pd(rng))
    return (lambda u: L.cosine_loss(u, h)), {"u": _pd(rng)}


def t_sym_cosine(rng) -> Instance:
    h1, h2 = Tensor(_pd(rng)), Tensor(_pd(rng))
    return (lambda u1, u2: L.sym_consistency(u1, h2, u2, h1, "cosine")), {"u1": _pd(rng), "u2": _pd(rng)}


def t_ntxent(rng) -> Instance:
    h = Tensor(_pd(rng))
    tau = float(rng.uniform(0.1, 1.0))
    return (lambda u: L.ntxent_loss(u, h, tau)), {"u": _pd(rng)}


def t_sym_ntxent(rng) -> Instance:
    h1, h2 = Tensor(_pd(rng)), Tensor(_pd(rng))
    tau = float(rng.uniform(0.1, 1.0))
    return (lambda u1, u2: L.sym_consistency(u1, h2, u2, h1, "ntxent", tau)), {"u1": _pd(rng), "u2": _pd(rng)}


def t_global_contrastive(rng) -> Instance:
    h1, h2 = Tensor(_pd(rng, 3, 4)), Tensor(_pd(rng, 3, 4))
    tau = float(rng.uniform(0.1, 1.0))
    return (lambda u1, u2: L.global_contrastive(u1, h2, u2, h1, tau)), {"u1": _pd(rng, 3, 4), "u2": _pd(rng, 3, 4)}


def t_huber(rng) -> Instance:
    target = Tensor(rng.normal(size=(1, 3, 3, 3)))
    delta = float(rng.uniform(0.3, 1.5))
    mask = rng.random((3, 3, 3)) < 0.5
    pred = target.data + rng.normal(scale=2.0, size=(1, 3, 3, 3))
    return (lambda pred: L.recon_loss(pred, target, mask, "huber", delta)), {"pred": pred}


def t_l2(rng) -> Instance:
    target = Tensor(rng.normal(size=(1, 3, 3, 3)))
    mask = rng.random((3, 3, 3)) < 0.5
    return (lambda pred: L.recon_loss(pred, target, mask, "l2")), {"pred": rng.normal(size=(1, 3, 3, 3))}


def t_gram(rng) -> Instance:
    zt = Tensor(_pd(rng))
    return (lambda z: L.gram_loss(z, zt)), {"z": _pd(rng)}


def t_sym_gram(rng) -> Instance:
    z1t, z2t = Tensor(_pd(rng)), Tensor(_pd(rng))
    return (lambda z1, z2: L.sym_gram(z1, z2t, z2, z1t)), {"z1": _pd(rng), "z2": _pd(rng)}


def t_roi_align(rng) -> Instance:
    crop = (12, 12, 12)
    size = tuple(int(s) for s in rng.integers(2, 13, size=3))
    origin = tuple(int(rng.integers(0, c - s + 1)) for c, s in zip(crop, size))
    out_res = tuple(int(r) for r in rng.integers(1, 4, size=3))
    w = _probe(rng, (2,) + out_res)
    omega = Box3(origin, size)
    return (lambda f: _contract(L.roi_align_3d(f, omega, crop, out_res), w)), {"f": rng.normal(size=(2, 6, 6, 6))}


def t_conv3d(rng) -> Instance:
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    n = (6 + 2 * pad - 3) // stride + 1
    w = _probe(rng, (3, n, n, n))
    return (lambda x, k: _contract(T.conv3d(x, k, stride, pad), w)), {
        "x": rng.normal(size=(2, 6, 6, 6)), "k": rng.normal(size=(3, 2, 3, 3, 3))}


def t_gelu(rng) -> Instance:
    w = _probe(rng, (4, 5))
    return (lambda x: _contract(T.gelu(x), w)), {"x": rng.normal(scale=2.0, size=(4, 5))}


def t_matmul(rng) -> Instance:
    w = _probe(rng, (3, 4))
    return (lambda a, b: _contract(T.matmul(a, b), w)), {"a": rng.normal(size=(3, 5)), "b": rng.normal(size=(5, 4))}


def t_trilinear(rng) -> Instance:
    coords = rng.uniform(0, 4, size=(6, 3))
    w = _probe(rng, (2, 6))
    return (lambda f: _contract(T.trilinear_sample(f, coords), w)), {"f": rng.normal(size=(2, 5, 5, 5))}


def t_resize(rng) -> Instance:
    out = tuple(int(r) for r in rng.integers(1, 7, size=3))
    w = _probe(rng, (2,) + out)
    return (lambda f: _contract(nets.resize(f, out), w)), {"f": rng.normal(size=(2, 3, 4, 5))}


def t_normalize_softmax(rng) -> Instance:
    w = _probe(rng, (3, 4))
    return (lambda x: _contract(T.softmax(x, 1) + T.l2_normalize(x, 1) + T.log_softmax(x, 0), w)), {
        "x": rng.normal(size=(3, 4))}


def _tiny(path: str, rng):
    cfg = nets.EncoderConfig(path=path, **TINY_ENCODER)
    params = nets.init_params(cfg, rng)
    crop = rng.normal(size=(1, 8, 8, 8))
    mask = nets.make_mask(cfg.grid, 0.5, rng)
    return cfg, params, crop, mask


def _encoder_target(path: str, rng) -> Instance:
    cfg, params, crop, mask = _tiny(path, rng)
    w = _probe(rng, (cfg.fused_channels,) + cfg.fuse_res)
    enc_names = [k for k in params if k.startswith("enc.") or k == "mask_token"]

    def f(**kw):
        return _contract(nets.features(kw, Tensor(crop), cfg, mask), w)

    return f, {k: params[k] for k in enc_names}


def t_encode_conv(rng) -> Instance:
    return _encoder_target("conv", rng)


def t_encode_token(rng) -> Instance:
    return _encoder_target("token", rng)


def t_project_predict(rng) -> Instance:
    cfg, params, _, _ = _tiny("conv", rng)
    fmap = Tensor(rng.normal(size=(cfg.fused_channels, 2, 2, 2)))
    w = _probe(rng, (cfg.proj_dim, 2, 2, 2))
    names = [k for k in params if k.startswith(("proj.", "pred."))]
    return (lambda **kw: _contract(nets.predict(kw, nets.project(kw, fmap)), w)), {k: params[k] for k in names}


def t_global_heads(rng) -> Instance:
    cfg, params, _, _ = _tiny("conv", rng)
    w = _probe(rng, (cfg.proj_dim, 1))
    names = [k for k in params if k.startswith(("gproj.", "gpred."))]
    inputs = {k: params[k] for k in names}
    inputs["fmap"] = rng.normal(size=(cfg.fused_channels, 2, 2, 2))

    def f(fmap, **kw):
        return _contract(nets.global_predict(kw, nets.global_project(kw, fmap)), w)

    return f, inputs


def t_decode(rng) -> Instance:
    cfg, params, _, _ = _tiny("conv", rng)
    w = _probe(rng, (1, 8, 8, 8))
    inputs = {k: params[k] for k in params if k.startswith("dec.")}
    inputs["fused"] = rng.normal(size=(cfg.fused_channels, 2, 2, 2))

    def f(fused, **kw):
        return _contract(nets.decode_pixels(kw, fused, (8, 8, 8)), w)

    return f, inputs


LOSS_TARGETS: dict[str, Callable[[np.random.Generator], Instance]] = {
    "cosine": t_cosine,
    "sym_cosine": t_sym_cosine,
    "ntxent": t_ntxent,
    "sym_ntxent": t_sym_ntxent,
    "global_contrastive": t_global_contrastive,
    "huber": t_huber,
    "l2": t_l2,
    "gram": t_gram,
    "sym_gram": t_sym_gram,
}

OP_TARGETS: dict[str, Callable[[np.random.Generator], Instance]] = {
    "roi_align": t_roi_align,
    "conv3d": t_conv3d,
    "gelu": t_gelu,
    "matmul": t_matmul,
    "trilinear": t_trilinear,
    "resize": t_resize,
    "normalize_softmax": t_normalize_softmax,
    "encode_conv": t_encode_conv,
    "encode_token": t_encode_token,
    "project_predict": t_project_predict,
    "global_heads": t_global_heads,
    "decode": t_decode,
}

TARGETS = {**LOSS_TARGETS, **OP_TARGETS}


def check_target(name: str, instances: int = 20, seed: int = 0, tolerance: float = 1e-3,
                 max_entries: int | None = 24) -> list[GradCheckReport]:
    """Run ``instances`` independent finite-difference checks of one target."""
    build = TARGETS[name]
    reports = []
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        f, inputs = build(rng)
        reports.append(grad_check(f, inputs, tolerance=tolerance, max_entries=max_entries, seed=i))
    return reports
