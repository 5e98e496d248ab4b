"""The reference toy experiment: synthetic blobs, two-stage pretraining, probe comparison.

Shared by the acceptance suite and ``scripts/``; every number it produces is a
function of the seed only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nets
from .losses import LossWeights
from .nets import EncoderConfig
from .train import (
    ProbeReport,
    TrainConfig,
    TrainResult,
    init_state,
    seg_probe,
    teacher_alignment,
    train_loop,
)
from .views import AugmentConfig, SamplerConfig, ViewPair, make_view_pair
from .volume import SynthSpec, Volume, synth_generate
from .rng import keyed_rng

N_PRETRAIN = 8
N_PROBE_TRAIN = 4
N_PROBE_TEST = 2
PROBE_CLASSES = 2


@dataclass(frozen=True)
class ToyConfig:
    seed: int = 0
    encoder: EncoderConfig = EncoderConfig()
    sampler: SamplerConfig = SamplerConfig()
    stage_one: TrainConfig = TrainConfig(steps_per_epoch=200, lr=3e-3, schedule="cosine", ema_decay=0.99)
    stage_two: TrainConfig = TrainConfig(steps_per_epoch=200, lr=3e-3, schedule="cosine", ema_decay=0.99,
                                         loss=LossWeights(lambda_consis=2.0, lambda_con=0.0, consis_kind="cosine"))
    probe_epochs: int = 200
    probe_lr: float = 0.05

    def seeded(self, seed: int) -> "ToyConfig":
        return replace(self, seed=seed, stage_one=replace(self.stage_one, seed=seed),
                       stage_two=replace(self.stage_two, seed=seed))


def blob_volumes(seed: int, n: int, offset: int = 0) -> list[tuple[Volume, Volume]]:
    return [synth_generate(SynthSpec(seed=int(keyed_rng(seed, "vol", offset + i).integers(2**31)),
                                     label_classes=PROBE_CLASSES)) for i in range(n)]


def eval_pairs(volumes, sampler: SamplerConfig, seed: int, n: int = 8) -> list[ViewPair]:
    """Held-out view pairs without intensity augmentation, for alignment measurements."""
    return [make_view_pair(volumes[i % len(volumes)], sampler, seed + 10_000, i, 0, None) for i in range(n)]


@dataclass
class PretrainOutcome:
    stage_one: TrainResult
    stage_two: TrainResult
    align_start: float
    align_end: float


def pretrain(cfg: ToyConfig, out_dir=None, aug: AugmentConfig | None = AugmentConfig()) -> PretrainOutcome:
    vols = [v for v, _ in blob_volumes(cfg.seed, N_PRETRAIN)]
    r1 = train_loop(vols, cfg.encoder, cfg.sampler, cfg.stage_one, stage="one", out_dir=out_dir, aug=aug)
    # stage two restarts the optimizer from the stage-one weights; the teacher starts as a copy of the student
    state = init_state(cfg.encoder, cfg.stage_two, params=r1.state.student)
    pairs = eval_pairs(vols, cfg.sampler, cfg.seed)
    a0 = teacher_alignment(state.teacher, cfg.encoder, pairs)
    r2 = train_loop(vols, cfg.encoder, cfg.sampler, cfg.stage_two, stage="two", state=state, out_dir=out_dir, aug=aug)
    a1 = teacher_alignment(r2.state.teacher, cfg.encoder, pairs)
    return PretrainOutcome(r1, r2, a0, a1)


def probe(cfg: ToyConfig, params: dict[str, np.ndarray]) -> ProbeReport:
    train = blob_volumes(cfg.seed, N_PROBE_TRAIN, offset=1000)
    test = blob_volumes(cfg.seed, N_PROBE_TEST, offset=2000)
    return seg_probe(params, cfg.encoder, train, test, PROBE_CLASSES, cfg.probe_epochs, cfg.probe_lr, cfg.seed)


def random_params(cfg: ToyConfig) -> dict[str, np.ndarray]:
    return nets.init_params(cfg.encoder, keyed_rng(cfg.seed, "init"))
