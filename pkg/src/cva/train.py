"""Student-teacher pretraining loop, EMA teacher, optimiser, loss traces and the segmentation probe."""

from __future__ import annotations

import csv
import logging
import math
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nets
from . import tensor as T
from .constants import ADAM_EPS, EPS
from .errors import ConfigError, ContractError, LoadError, NumericalError
from .losses import (
    LossWeights,
    flatten_cells,
    global_contrastive,
    recon_loss,
    roi_align_3d,
    sym_consistency,
    total_objective,
)
from .nets import EncoderConfig
from .rng import keyed_rng
from .tensor import Tensor
from .views import AugmentConfig, SamplerConfig, ViewPair, make_view_pair
from .volume import Volume

log = logging.getLogger(__name__)

TRACE_FIELDS = ("step", "total", "recon", "consis", "con", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    steps_per_epoch: int = 200
    batch_size: int = 2
    ema_decay: float = 0.996
    mask_ratio: float = 0.6
    lr: float = 1e-3
    schedule: str = "cosine"
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    roi_res: tuple[int, int, int] = (4, 4, 4)
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    precision: str = "f64"
    deterministic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "roi_res", tuple(int(r) for r in self.roi_res))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossWeights(**self.loss))
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs >= 0, steps_per_epoch >= 1 and batch_size >= 1 required")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


def lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.schedule == "constant" or cfg.total_steps <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / (cfg.total_steps - 1)))


# -- EMA and optimiser ----------------------------------------------------------------

def check_registry(a: dict[str, np.ndarray], b: dict[str, np.ndarray], what: str = "registry") -> None:
    if list(a) != list(b):
        missing = sorted(set(a) ^ set(b))
        raise ContractError(f"{what} mismatch: names differ ({missing[:5]}...)")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise ContractError(f"{what} mismatch at {k}: {np.shape(a[k])} vs {np.shape(b[k])}")


def ema_update(teacher: dict[str, np.ndarray], student: dict[str, np.ndarray], tau: float) -> dict[str, np.ndarray]:
    """``xi <- tau * xi + (1 - tau) * theta`` element-wise; endpoints are exact copies.

    Evaluated as ``xi + (1 - tau) * (theta - xi)`` so a teacher equal to the
    student stays bitwise equal.
    """
    check_registry(teacher, student, "EMA registry")
    if tau == 0.0:
        return {k: np.array(v) for k, v in student.items()}
    if tau == 1.0:
        return {k: np.array(v) for k, v in teacher.items()}
    return {k: teacher[k] + (1.0 - tau) * (student[k] - teacher[k]) for k in teacher}


class AdamW:
    """Adam with decoupled weight decay. Parameters without a gradient are left untouched."""

    def __init__(self, betas=(0.9, 0.999), weight_decay: float = 1e-4, eps: float = ADAM_EPS):
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        out = dict(params)
        for k, g in grads.items():
            p = params[k]
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            t = self.t.get(k, 0) + 1
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            out[k] = (p * (1 - lr * self.wd) - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
            self.m[k], self.v[k], self.t[k] = m, v, t
        return out


# -- training -----------------------------------------------------------------------

@dataclass
class TrainState:
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    optimizer: AdamW
    step: int = 0


def init_state(enc: EncoderConfig, cfg: TrainConfig, params: dict[str, np.ndarray] | None = None,
               teacher: dict[str, np.ndarray] | None = None) -> TrainState:
    if params is None:
        params = nets.init_params(enc, keyed_rng(cfg.seed, "init"), dtype=cfg.dtype)
    params = {k: np.asarray(v, dtype=cfg.dtype) for k, v in params.items()}
    teacher = {k: np.array(v) for k, v in params.items()} if teacher is None else {
        k: np.asarray(v, dtype=cfg.dtype) for k, v in teacher.items()}
    check_registry(teacher, params, "teacher registry")
    return TrainState(params, teacher, AdamW(cfg.betas, cfg.weight_decay))


@dataclass
class _ViewOut:
    crop: Tensor
    mask_vox: np.ndarray | None
    fs: Tensor
    ft: Tensor | None = None


def _deterministic(flag: bool):
    if not flag:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def compute_objective(S, Tt, batch: Sequence[ViewPair], enc: EncoderConfig, cfg: TrainConfig,
                      weights: LossWeights, step: int):
    """Forward both branches for a batch and build the weighted objective.

    ``S`` holds student tensors (requiring gradients), ``Tt`` teacher tensors.
    Returns ``(total, breakdown)``.
    """
    dtype = cfg.dtype
    lam = weights.effective()
    views: list[tuple[_ViewOut, _ViewOut]] = []
    for b, pair in enumerate(batch):
        outs = []
        for vi, c in ((1, pair.crop1), (2, pair.crop2)):
            crop = Tensor(c.data, dtype=dtype)
            mask = nets.make_mask(enc.grid, cfg.mask_ratio, keyed_rng(cfg.seed, "mask", step, b, vi))
            fs = nets.features(S, crop, enc, mask)
            mask_vox = nets.mask_to_voxels(mask, enc.patch) if mask.any() else None
            outs.append(_ViewOut(crop, mask_vox, fs))
        views.append(tuple(outs))

    def teacher_fused(v: _ViewOut) -> Tensor:
        if v.ft is None:
            v.ft = nets.features(Tt, v.crop, enc, None)
        return v.ft

    def recon():
        terms = []
        for pair_views in views:
            for v in pair_views:
                pred = nets.decode_pixels(S, v.fs, v.crop.shape[1:])
                terms.append(recon_loss(pred, v.crop, v.mask_vox, weights.recon_kind, weights.huber_delta))
        return T.scale(_sum(terms), 1.0 / len(terms))

    def consis():
        if weights.consis_kind == "gram":
            terms = []
            for pair, (v1, v2) in zip(batch, views):
                ext = v1.crop.shape[1:]
                z1s = flatten_cells(roi_align_3d(v1.fs, pair.omega1, ext, cfg.roi_res))
                z2s = flatten_cells(roi_align_3d(v2.fs, pair.omega2, ext, cfg.roi_res))
                z1t = flatten_cells(roi_align_3d(teacher_fused(v1), pair.omega1, ext, cfg.roi_res))
                z2t = flatten_cells(roi_align_3d(teacher_fused(v2), pair.omega2, ext, cfg.roi_res))
                terms.append(sym_consistency(z1s, z2t, z2s, z1t, kind="gram"))
            return T.scale(_sum(terms), 1.0 / len(terms))
        u1, u2, h1, h2 = [], [], [], []
        for pair, (v1, v2) in zip(batch, views):
            ext = v1.crop.shape[1:]
            for v, omega, us, hs in ((v1, pair.omega1, u1, h1), (v2, pair.omega2, u2, h2)):
                u_map = nets.predict(S, nets.project(S, v.fs))
                h_map = nets.project(Tt, teacher_fused(v))
                us.append(flatten_cells(roi_align_3d(u_map, omega, ext, cfg.roi_res)))
                hs.append(flatten_cells(roi_align_3d(h_map, omega, ext, cfg.roi_res)))
        cat = lambda xs: xs[0] if len(xs) == 1 else T.concat(xs, axis=0)  # noqa: E731
        return sym_consistency(cat(u1), cat(h2), cat(u2), cat(h1), weights.consis_kind, weights.temperature)

    def con():
        if len(batch) < 2:
            raise ContractError("the global contrastive term needs batch_size >= 2")
        g = {1: ([], []), 2: ([], [])}
        for v1, v2 in views:
            for vi, v in ((1, v1), (2, v2)):
                u = nets.global_predict(S, nets.global_project(S, v.fs))
                h = nets.global_project(Tt, teacher_fused(v))
                g[vi][0].append(T.transpose(u, (1, 0)))
                g[vi][1].append(T.transpose(h, (1, 0)))
        u1, h1 = T.concat(g[1][0]), T.concat(g[1][1])
        u2, h2 = T.concat(g[2][0]), T.concat(g[2][1])
        return global_contrastive(u1, h2, u2, h1, weights.temperature)

    comps = {"recon": recon, "consis": consis, "con": con}
    comps = {k: v for k, v in comps.items() if lam[k] > 0}
    return total_objective(comps, weights)


def _sum(ts):
    out = ts[0]
    for t in ts[1:]:
        out = out + t
    return out


def train_step(state: TrainState, batch: Sequence[ViewPair], enc: EncoderConfig, cfg: TrainConfig,
               weights: LossWeights | None = None) -> tuple[TrainState, dict[str, float]]:
    """One update: forward (student on masked crops, teacher on full crops), objective, backward, AdamW, EMA."""
    if not batch:
        raise ContractError("empty batch")
    weights = cfg.loss if weights is None else weights
    S = T.params_from_arrays(state.student, requires_grad=True, dtype=cfg.dtype)
    Tt = T.params_from_arrays(state.teacher, requires_grad=False, dtype=cfg.dtype)
    total, parts = compute_objective(S, Tt, batch, enc, cfg, weights, state.step)
    for name in ("recon", "consis", "con", "total"):
        if not math.isfinite(parts[name]):
            raise NumericalError(f"non-finite loss term {name!r} at step {state.step}: {parts[name]}")
    grads = T.backward(total)
    g = {k: grads[t].data for k, t in S.items() if t in grads}
    lr = lr_at(cfg, state.step)
    student = state.optimizer.step(state.student, g, lr)
    teacher = ema_update(state.teacher, student, cfg.ema_decay)
    record = {"step": state.step, "total": parts["total"], "recon": parts["recon"],
              "consis": parts["consis"], "con": parts["con"], "lr": lr}
    return TrainState(student, teacher, state.optimizer, state.step + 1), record


def write_trace_csv(path, records: Sequence[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for r in records:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in TRACE_FIELDS[1:]])
    return path


def read_trace_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k == "step" else float(r[k])) for k in TRACE_FIELDS} for r in rows]


def stage_weights(weights: LossWeights, stage: str) -> LossWeights:
    """Stage one is reconstruction-only; stage two uses the configured objective."""
    if stage == "one":
        return replace(weights, lambda_consis=0.0, lambda_con=0.0)
    if stage == "two":
        return weights
    raise ConfigError(f"stage must be 'one' or 'two', got {stage!r}")


def sample_batch(volumes: Sequence[Volume], sampler: SamplerConfig, cfg: TrainConfig, step: int,
                 aug: AugmentConfig | None = AugmentConfig()) -> list[ViewPair]:
    batch = []
    for b in range(cfg.batch_size):
        vid = int(keyed_rng(cfg.seed, "pick", step, b).integers(len(volumes)))
        batch.append(make_view_pair(volumes[vid], sampler, cfg.seed, vid, step * cfg.batch_size + b, aug))
    return batch


def save_checkpoint(path, state: TrainState, enc: EncoderConfig, meta: dict | None = None):
    reg = {f"student.{k}": v for k, v in state.student.items()}
    reg.update({f"teacher.{k}": v for k, v in state.teacher.items()})
    info = {"encoder": nets.config_dict(enc), "step": state.step}
    info.update(meta or {})
    return nets.save_params(path, reg, info)


def load_checkpoint(path, enc: EncoderConfig | None = None, dtype=None):
    """Returns ``(student, teacher, meta)``; checks the registry against ``enc`` when given."""
    reg, meta = nets.load_params(path)
    student = {k[len("student."):]: v for k, v in reg.items() if k.startswith("student.")}
    teacher = {k[len("teacher."):]: v for k, v in reg.items() if k.startswith("teacher.")}
    if not student:
        raise LoadError(f"{path}: no student parameters")
    if not teacher:
        teacher = {k: np.array(v) for k, v in student.items()}
    if enc is not None:
        ref = nets.init_params(enc, np.random.default_rng(0))
        try:
            check_registry(ref, student, "checkpoint registry")
        except ContractError as e:
            raise LoadError(str(e)) from None
    if dtype is not None:
        student = {k: v.astype(dtype) for k, v in student.items()}
        teacher = {k: v.astype(dtype) for k, v in teacher.items()}
    return student, teacher, meta


@dataclass
class TrainResult:
    state: TrainState
    trace: list[dict]
    checkpoints: list[Path]


def train_loop(volumes: Sequence[Volume], enc: EncoderConfig, sampler: SamplerConfig, cfg: TrainConfig,
               stage: str = "two", state: TrainState | None = None, out_dir=None,
               aug: AugmentConfig | None = AugmentConfig(), name: str | None = None) -> TrainResult:
    """Run ``cfg.epochs * cfg.steps_per_epoch`` steps of one pretraining stage.

    Writes ``trace.csv`` after every epoch and a checkpoint at the end when
    ``out_dir`` is given.
    """
    weights = stage_weights(cfg.loss, stage)
    state = init_state(enc, cfg) if state is None else state
    state.step = 0 if state.step is None else state.step
    start = state.step
    trace: list[dict] = []
    ckpts: list[Path] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    name = name or f"stage-{stage}"
    local = TrainState(state.student, state.teacher, state.optimizer, 0)
    with _deterministic(cfg.deterministic):
        for epoch in range(cfg.epochs):
            for _ in range(cfg.steps_per_epoch):
                batch = sample_batch(volumes, sampler, cfg, local.step, aug)
                local, rec = train_step(local, batch, enc, cfg, weights)
                rec["step"] += start
                trace.append(rec)
            log.info("epoch %d: total=%.4f", epoch, trace[-1]["total"])
            if out is not None:
                write_trace_csv(out / f"{name}-trace.csv", trace)
    final = TrainState(local.student, local.teacher, local.optimizer, start + local.step)
    if out is not None:
        if not trace:
            write_trace_csv(out / f"{name}-trace.csv", trace)
        jpath, _ = save_checkpoint(out / name, final, enc, {"stage": stage, "seed": cfg.seed})
        ckpts.append(jpath)
    return TrainResult(final, trace, ckpts)


def teacher_alignment(teacher: dict[str, np.ndarray], enc: EncoderConfig, pairs: Sequence[ViewPair],
                      roi_res=(4, 4, 4), projected: bool = True) -> float:
    """Mean cosine similarity between the two views' teacher features inside the overlap."""
    P = T.params_from_arrays(teacher, requires_grad=False)
    sims = []
    for pair in pairs:
        cells = []
        for c, omega in ((pair.crop1, pair.omega1), (pair.crop2, pair.omega2)):
            crop = Tensor(c.data, dtype=np.float64)
            f = nets.features(P, crop, enc)
            if projected:
                f = nets.project(P, f)
            cells.append(flatten_cells(roi_align_3d(f, omega, crop.shape[1:], roi_res)).data)
        a, b = cells
        num = (a * b).sum(axis=1)
        den = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1)) + EPS
        sims.append(num / den)
    return float(np.mean(np.concatenate(sims)))


# -- evaluation -------------------------------------------------------------------------

def _labels(x) -> np.ndarray:
    arr = x.data if isinstance(x, Volume) else np.asarray(x)
    return np.rint(arr).astype(np.int64)


def dice_metric(pred, truth, c: int) -> float:
    """``2|P & T| / (|P| + |T|)`` for class ``c``; 1.0 when both are empty."""
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ContractError(f"dice_metric shapes differ: {p.shape} vs {t.shape}")
    pm, tm = p == c, t == c
    denom = int(pm.sum()) + int(tm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pm & tm).sum()) / denom


@dataclass
class ProbeReport:
    per_class: dict[int, float | None]
    mean_dsc: float

    def rows(self) -> list[tuple[str, str]]:
        out = [(str(c), "undefined" if v is None else repr(v)) for c, v in self.per_class.items()]
        out.append(("mean", repr(self.mean_dsc)))
        return out


def probe_crops(pairs: Sequence[tuple[Volume, Volume]], crop_size, seed: int,
                per_volume: int = 2) -> list[tuple[np.ndarray, np.ndarray]]:
    """Keyed random crops (image, labels), ``per_volume`` from each labelled volume."""
    out = []
    for i, (img, lab) in enumerate(pairs):
        rng = keyed_rng(seed, "probe-crop", i)
        for _ in range(per_volume):
            o = [int(rng.integers(0, d - c + 1)) for d, c in zip(img.dims, crop_size)]
            sl = (slice(None),) + tuple(slice(a, a + c) for a, c in zip(o, crop_size))
            out.append((img.data[sl].astype(np.float64), _labels(lab.data[sl])[0]))
    return out


def _probe_features(P, enc: EncoderConfig, img: np.ndarray) -> np.ndarray:
    f = nets.features(P, Tensor(img), enc)
    f = nets.resize(f, img.shape[1:])
    return f.data.reshape(f.shape[0], -1).T


def seg_probe(params: dict[str, np.ndarray], enc: EncoderConfig, train: Sequence[tuple[Volume, Volume]],
              test: Sequence[tuple[Volume, Volume]], n_classes: int, epochs: int = 200, lr: float = 0.05,
              seed: int = 0, per_volume: int = 2) -> ProbeReport:
    """Linear (1x1x1 conv) head on frozen, upsampled fused features; per-class and mean DSC on ``test``.

    Classes are balanced by inverse frequency in the cross-entropy. Classes absent
    from the training labels are reported as undefined and excluded from the mean;
    the mean is over defined foreground classes (background only if none).
    """
    P = T.params_from_arrays({k: np.asarray(v, dtype=np.float64) for k, v in params.items()}, requires_grad=False)
    tr = probe_crops(train, enc.crop_size, seed, per_volume)
    te = probe_crops(test, enc.crop_size, seed + 1, per_volume)
    x_tr = np.concatenate([_probe_features(P, enc, im) for im, _ in tr])
    y_tr = np.concatenate([lab.reshape(-1) for _, lab in tr])
    x_te = np.concatenate([_probe_features(P, enc, im) for im, _ in te])
    y_te = np.concatenate([lab.reshape(-1) for _, lab in te])
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0) + 1e-6
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd

    k = n_classes + 1
    counts = np.bincount(y_tr, minlength=k).astype(np.float64)
    present = counts > 0
    cw = np.where(present, counts.sum() / (k * np.maximum(counts, 1)), 0.0)
    sw = cw[y_tr]
    rows = np.arange(len(y_tr))
    X = Tensor(x_tr)
    w = {"w": np.zeros((x_tr.shape[1], k)), "b": np.zeros((1, k))}
    opt = AdamW(weight_decay=0.0)
    for _ in range(epochs):
        W = T.params_from_arrays(w, requires_grad=True)
        logp = T.log_softmax(T.matmul(X, W["w"]) + W["b"], axis=1)
        picked = T.index(logp, (rows, y_tr))
        loss = -T.scale(T.tsum(picked * Tensor(sw)), 1.0 / sw.sum())
        grads = T.backward(loss)
        w = opt.step(w, {n: grads[t].data for n, t in W.items()}, lr)
    logits = x_te @ w["w"] + w["b"]
    logits[:, ~present] = -np.inf
    pred = logits.argmax(axis=1)
    per_class: dict[int, float | None] = {}
    for c in range(k):
        per_class[c] = dice_metric(pred, y_te, c) if present[c] else None
    fg = [v for c, v in per_class.items() if c > 0 and v is not None]
    vals = fg if fg else [v for v in per_class.values() if v is not None]
    return ProbeReport(per_class, float(np.mean(vals)))
