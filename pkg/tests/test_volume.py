import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cva.errors import ConfigError, DataError, DegenerateInputError, FormatError
from cva.volume import SynthSpec, Volume, load_raw, save_raw, synth_blobs, synth_generate, zscore_normalize


def test_volume_rejects_non_finite():
    with pytest.raises(DataError):
        Volume(np.array([[[[np.inf]]]]))


def test_volume_promotes_3d_and_freezes():
    v = Volume(np.zeros((2, 3, 4)))
    assert v.data.shape == (1, 2, 3, 4) and v.dims == (2, 3, 4) and v.channels == 1
    assert v.data.dtype == np.float32
    with pytest.raises(ValueError):
        v.data[0, 0, 0, 0] = 1.0


def test_synth_is_deterministic():
    a, la = synth_generate(SynthSpec(seed=3))
    b, lb = synth_generate(SynthSpec(seed=3))
    assert a.data.tobytes() == b.data.tobytes() and la.data.tobytes() == lb.data.tobytes()
    c, _ = synth_generate(SynthSpec(seed=4))
    assert a.data.tobytes() != c.data.tobytes()


def test_synth_is_normalized_with_valid_labels():
    spec = SynthSpec(seed=1, label_classes=3)
    v, lab = synth_generate(spec)
    assert abs(float(v.data.mean())) < 1e-3 and abs(float(v.data.std()) - 1.0) < 1e-3
    labels = np.unique(lab.data)
    assert set(labels.astype(int)) <= set(range(spec.label_classes + 1))


def test_no_blobs_gives_background_only():
    v, lab = synth_generate(SynthSpec(seed=2, n_blobs=0))
    assert not lab.data.any()
    assert np.all(np.isfinite(v.data))


def test_blob_voxel_counts_match_independent_scan():
    spec = SynthSpec(seed=5, dims=(32, 32, 32), n_blobs=4, radius_range=(3, 6))
    _, lab = synth_generate(spec)
    expected = {}
    zz, yy, xx = np.meshgrid(*[np.arange(d) for d in spec.dims], indexing="ij")
    for b in synth_blobs(spec):
        inside = (zz - b.center[0]) ** 2 + (yy - b.center[1]) ** 2 + (xx - b.center[2]) ** 2 <= b.radius ** 2
        expected[b.label] = expected.get(b.label, 0) + int(inside.sum())
    for c, n in expected.items():
        assert int((lab.data == c).sum()) == n


def test_radius_too_large_for_dims():
    with pytest.raises(ConfigError):
        synth_generate(SynthSpec(dims=(10, 10, 10), radius_range=(3, 7)))


def test_raw_roundtrip_bitwise(tmp_path, rng):
    v = Volume(rng.normal(size=(2, 3, 4, 5)), spacing=(1.0, 0.5, 2.0))
    jpath, rpath = save_raw(tmp_path / "v", v)
    assert rpath.stat().st_size == 2 * 3 * 4 * 5 * 4
    w = load_raw(tmp_path / "v.json")
    assert w.data.tobytes() == v.data.tobytes() and w.spacing == v.spacing


def test_truncated_payload_names_sizes(tmp_path, rng):
    save_raw(tmp_path / "v", Volume(rng.normal(size=(1, 2, 2, 2))))
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(FormatError, match="expected 32 bytes, got 28"):
        load_raw(tmp_path / "v")


def test_non_finite_payload_on_load(tmp_path):
    save_raw(tmp_path / "v", Volume(np.zeros((1, 1, 1, 2))))
    (tmp_path / "v.raw").write_bytes(np.array([0.0, np.nan], dtype="<f4").tobytes())
    with pytest.raises(DataError):
        load_raw(tmp_path / "v")


def test_zscore_examples():
    out = zscore_normalize(Volume(np.array([0.0, 2.0]).reshape(1, 1, 1, 2)))
    assert np.allclose(out.data.ravel(), [-1.0, 1.0])
    with pytest.raises(DegenerateInputError):
        zscore_normalize(Volume(np.ones((1, 2, 2, 2))))


@given(st.integers(0, 10_000), st.floats(0.1, 100), st.floats(-50, 50))
def test_zscore_statistics_and_idempotence(seed, scale, shift):
    x = np.random.default_rng(seed).normal(size=(1, 6, 6, 6)) * scale + shift
    out = zscore_normalize(Volume(x))
    d = out.data.astype(np.float64)
    assert abs(d.mean()) < 1e-6 and abs(d.std() - 1) < 1e-6
    again = zscore_normalize(out)
    assert np.allclose(again.data, out.data, atol=1e-6)
