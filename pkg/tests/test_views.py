import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cva.errors import ContractError, InputError, SamplingError
from cva.rng import keyed_rng
from cva.views import (
    AugmentConfig,
    AugmentRecord,
    Box3,
    SamplerConfig,
    apply_intensity,
    apply_spatial,
    crop,
    gaussian_blur,
    gaussian_kernel1d,
    intersection,
    make_view_pair,
    map_local_to_source,
    map_overlap_to_local,
    overlap_fraction,
    sample_boxes,
    sample_crop_pair,
)
from cva.volume import Volume

boxes = st.builds(
    Box3,
    st.tuples(*[st.integers(0, 20)] * 3),
    st.tuples(*[st.integers(1, 12)] * 3),
)


def test_overlap_fraction_examples():
    a = Box3((0, 0, 0), (160, 160, 160))
    vp = a.volume
    assert overlap_fraction(a, a, vp) == 1.0
    assert overlap_fraction(a, Box3((200, 0, 0), (160, 160, 160)), vp) == 0.0
    assert overlap_fraction(a, Box3((64, 0, 0), (160, 160, 160)), vp) == pytest.approx(0.6)


@given(boxes, boxes)
def test_intersection_matches_voxel_count(a, b):
    grid = np.zeros((40, 40, 40), dtype=int)
    grid[a.slices()] += 1
    grid[b.slices()] += 1
    inter = intersection(a, b)
    assert (0 if inter is None else inter.volume) == int((grid == 2).sum())


@given(boxes, st.tuples(*[st.integers(0, 10)] * 3))
def test_local_source_roundtrip(inner, pad):
    outer = Box3(tuple(o - p for o, p in zip(inner.origin, pad)), tuple(s + 2 * p for s, p in zip(inner.size, pad)))
    local = map_overlap_to_local(inner, outer)
    assert map_local_to_source(local, outer) == inner
    assert local.within(outer.size)


def test_local_mapping_examples():
    b = Box3((0, 0, 0), (8, 8, 8))
    assert map_overlap_to_local(Box3((1, 2, 3), (2, 2, 2)), b) == Box3((1, 2, 3), (2, 2, 2))
    c = Box3((4, 5, 6), (8, 8, 8))
    assert map_overlap_to_local(c, c) == Box3((0, 0, 0), (8, 8, 8))
    with pytest.raises(ContractError):
        map_overlap_to_local(Box3((0, 0, 0), (9, 1, 1)), b)


@given(st.integers(0, 2**31), st.tuples(*[st.integers(40, 64)] * 3),
       st.floats(0.1, 0.9), st.floats(0.1, 0.5))
def test_sampled_fraction_within_bounds(seed, dims, gmin, width):
    gmax = min(1.0, gmin + width)
    cfg = SamplerConfig(crop_size=(24, 24, 24), gamma_min=gmin, gamma_max=gmax)
    b1, b2 = sample_boxes(dims, cfg, np.random.default_rng(seed))
    assert b1.within(dims) and b2.within(dims)
    assert gmin - 1e-12 <= overlap_fraction(b1, b2, cfg.v_p) <= gmax + 1e-12


def test_sampling_is_deterministic():
    cfg = SamplerConfig()
    a = sample_boxes((48, 48, 48), cfg, keyed_rng(0, "x"))
    b = sample_boxes((48, 48, 48), cfg, keyed_rng(0, "x"))
    assert a == b


def test_forced_identity_and_degenerate_source(rng):
    src = Volume(rng.normal(size=(1, 40, 40, 40)))
    pair = sample_crop_pair(src, SamplerConfig(gamma_min=1.0, gamma_max=1.0), rng)
    assert pair.box1 == pair.box2 and pair.omega1 == Box3((0, 0, 0), (32, 32, 32))
    tight = Volume(rng.normal(size=(1, 32, 32, 32)))
    with pytest.raises(SamplingError):
        sample_crop_pair(tight, SamplerConfig(), rng)
    assert sample_crop_pair(tight, SamplerConfig(gamma_max=1.0), rng).overlap == 1.0
    with pytest.raises(InputError):
        sample_crop_pair(Volume(np.zeros((1, 16, 40, 40))), SamplerConfig(), rng)


@given(st.integers(0, 10_000))
def test_overlap_voxels_identical_before_intensity(seed):
    src = Volume(np.random.default_rng(seed).normal(size=(1, 48, 44, 40)))
    pair = make_view_pair(src, SamplerConfig(), seed, 0, 0, aug=None)
    a = pair.crop1.data[(slice(None),) + pair.omega1.slices()]
    b = pair.crop2.data[(slice(None),) + pair.omega2.slices()]
    assert np.array_equal(a, b)
    assert pair.omega1.size == pair.omega2.size
    assert map_local_to_source(pair.omega1, pair.box1) == map_local_to_source(pair.omega2, pair.box2)


def test_view_pair_replays_from_key(rng):
    src = Volume(rng.normal(size=(1, 48, 48, 48)))
    p1 = make_view_pair(src, SamplerConfig(), 7, 3, 11)
    p2 = make_view_pair(src, SamplerConfig(), 7, 3, 11)
    assert p1.crop1.data.tobytes() == p2.crop1.data.tobytes() and p1.aug2 == p2.aug2
    replay = apply_intensity(crop(apply_spatial(src, p1.aug1.mirror_axes), p1.box1), p1.aug1)
    assert replay.data.tobytes() == p1.crop1.data.tobytes()


def test_mirror_properties(rng):
    v = Volume(rng.normal(size=(1, 3, 4, 5)))
    assert apply_spatial(v, 0) is v
    for mask in range(8):
        assert np.array_equal(apply_spatial(apply_spatial(v, mask), mask).data, v.data)
    x_flip = apply_spatial(v, 0b100)
    assert x_flip.data[0, 1, 2, 0] == v.data[0, 1, 2, 4]


def test_intensity_examples(rng):
    c = Volume(np.full((1, 4, 4, 4), 1.5))
    assert apply_intensity(c, AugmentRecord()) is c
    assert np.allclose(apply_intensity(c, AugmentRecord(op="brightness", param=0.25)).data, 1.75)
    for s in (0.5, 1.0, 2.3):
        assert gaussian_kernel1d(s).sum() == pytest.approx(1.0, abs=1e-12)
    x = rng.normal(size=(1, 10, 10, 10))
    assert gaussian_blur(x, 0.5).mean() == pytest.approx(x.mean(), abs=1e-3)


def test_blur_matches_direct_convolution(rng):
    x = rng.normal(size=(1, 6, 6, 6))
    k = gaussian_kernel1d(0.5)
    r = len(k) // 2
    pad = np.pad(x, ((0, 0), (r, r), (r, r), (r, r)), mode="symmetric")
    direct = np.zeros_like(x)
    for dz in range(len(k)):
        for dy in range(len(k)):
            for dx in range(len(k)):
                direct += k[dz] * k[dy] * k[dx] * pad[:, dz:dz + 6, dy:dy + 6, dx:dx + 6]
    assert np.allclose(gaussian_blur(x, 0.5), direct, atol=1e-12)


@given(st.sampled_from(["gaussian_noise", "rician_noise", "blur", "brightness", "contrast", "gamma"]),
       st.integers(0, 1000))
def test_every_op_is_finite_and_reproducible(op, seed):
    v = Volume(np.random.default_rng(seed).normal(size=(1, 6, 6, 6)))
    param = {"blur": 1.0, "contrast": 1.1, "gamma": 0.8, "brightness": 0.1}.get(op, 0.05)
    rec = AugmentRecord(0, op, param, (seed, 1))
    a, b = apply_intensity(v, rec), apply_intensity(v, rec)
    assert np.all(np.isfinite(a.data)) and a.data.tobytes() == b.data.tobytes()


def test_augment_config_limits_ops(rng):
    src = Volume(rng.normal(size=(1, 40, 40, 40)))
    p = make_view_pair(src, SamplerConfig(), 0, 0, 0, AugmentConfig(ops=("contrast",)))
    assert p.aug1.op == p.aug2.op == "contrast"
    assert p.aug1.mirror_axes == p.aug2.mirror_axes
