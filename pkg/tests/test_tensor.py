import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cva import tensor as T
from cva.errors import ContractError, DimensionError, RangeError
from cva.gradcheck import grad_check
from cva.tensor import GradTape, Tensor, ZeroNormWarning, backward


def finite(shape):
    return arrays(np.float64, shape, elements=st.floats(-10, 10, allow_nan=False))


# -- elementwise -------------------------------------------------------------------------

def test_add_and_mul_examples():
    assert np.array_equal((Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])).data, [4.0, 6.0])
    assert np.array_equal(T.mul(Tensor([1.5, -2.0]), 0.0).data, [0.0, 0.0])


def test_relu_forward_and_backward():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    y = T.relu(x)
    assert np.array_equal(y.data, [0.0, 2.0])
    g = backward(T.tsum(y))
    assert np.array_equal(g[x].data, [0.0, 1.0])


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2,\).*\(3,\)"):
        Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])


def test_mixed_dtypes_rejected():
    with pytest.raises(DimensionError):
        Tensor([1.0], dtype=np.float32) + Tensor([1.0], dtype=np.float64)


def test_tensors_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


@given(finite((3, 4)), finite((4,)))
def test_broadcast_add_matches_numpy(a, b):
    out = Tensor(a) + Tensor(b)
    assert np.array_equal(out.data, a + b)


def test_broadcast_gradient_is_reduced():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    g = backward(T.tsum(a * b))
    assert g[b].shape == (1, 4)
    assert np.array_equal(g[b].data, np.full((1, 4), 3.0))


def test_elementwise_dispatch(rng):
    x = Tensor(rng.normal(size=5))
    assert np.allclose(T.elementwise("exp", x).data, np.exp(x.data))
    with pytest.raises(ContractError):
        T.elementwise("tanh", x)


def test_gelu_matches_erf_definition(rng):
    from scipy.special import erf

    x = rng.normal(size=50)
    assert np.allclose(T.gelu(Tensor(x)).data, 0.5 * x * (1 + erf(x / np.sqrt(2))), atol=1e-15)


# -- matmul and conv ---------------------------------------------------------------------

def test_matmul_examples(rng):
    m = rng.normal(size=(3, 3))
    assert np.allclose(T.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.item() == 11.0
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_tight(rng):
    w = rng.normal(size=(4, 3))
    rep = grad_check(lambda a, b: T.tsum(T.matmul(a, b) * Tensor(w)),
                     {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=(5, 3))}, tolerance=1e-6)
    assert rep.passed, rep.summary()


def test_conv3d_identity_kernel(rng):
    x = rng.normal(size=(1, 5, 5, 5))
    out = T.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv3d_box_sum_on_constant():
    out = T.conv3d(Tensor(np.full((1, 6, 6, 6), 2.0)), Tensor(np.ones((1, 1, 3, 3, 3))))
    assert out.shape == (1, 4, 4, 4)
    assert np.allclose(out.data, 54.0)


@given(st.integers(4, 9), st.integers(1, 3), st.integers(0, 2))
def test_conv3d_output_extent(ext, stride, pad):
    out = T.conv3d(Tensor(np.zeros((1, ext, ext, ext))), Tensor(np.zeros((2, 1, 3, 3, 3))), stride, pad)
    n = (ext + 2 * pad - 3) // stride + 1
    assert out.shape == (2, n, n, n)


def test_conv3d_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv3d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 3, 3))))


def test_conv3d_gradient(rng):
    w = rng.normal(size=(4, 6, 6, 6))
    rep = grad_check(lambda x, k: T.tsum(T.conv3d(x, k) * Tensor(w)),
                     {"x": rng.normal(size=(2, 8, 8, 8)), "k": rng.normal(size=(4, 2, 3, 3, 3))},
                     max_entries=40)
    assert rep.passed, rep.summary()


# -- trilinear sampling ------------------------------------------------------------------

def test_trilinear_lattice_points_exact(rng):
    f = rng.normal(size=(2, 4, 4, 4))
    pts = np.array([[0, 0, 0], [3, 2, 1], [1, 3, 3]], dtype=float)
    out = T.trilinear_sample(Tensor(f), pts)
    for j, (z, y, x) in enumerate(pts.astype(int)):
        assert np.array_equal(out.data[:, j], f[:, z, y, x])


@given(st.floats(-5, 5), arrays(np.float64, (7, 3), elements=st.floats(0, 4)))
def test_trilinear_constant_map(c, pts):
    out = T.trilinear_sample(Tensor(np.full((1, 5, 5, 5), c)), pts)
    assert np.allclose(out.data, c, atol=1e-12)


def test_trilinear_ramp():
    ramp = np.broadcast_to(np.arange(5.0)[None, None, None, :], (1, 5, 5, 5))
    out = T.trilinear_sample(Tensor(ramp), np.array([[1.0, 2.0, 2.5]]))
    assert out.data.item() == pytest.approx(2.5, abs=1e-15)


def test_trilinear_out_of_range_names_axis():
    with pytest.raises(RangeError, match="y"):
        T.trilinear_sample(Tensor(np.zeros((1, 4, 4, 4))), np.array([[1.0, 3.5, 1.0]]))


# -- reductions --------------------------------------------------------------------------

def test_softmax_and_normalize_examples():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])


@pytest.mark.filterwarnings("ignore::cva.tensor.ZeroNormWarning")
@given(finite((4, 6)))
def test_reduction_properties(x):
    t = Tensor(x)
    assert np.allclose(T.softmax(t, axis=1).data.sum(axis=1), 1.0)
    assert np.allclose(np.exp(T.log_softmax(t, axis=1).data).sum(axis=1), 1.0)
    assert T.mean(t).item() * x.size == pytest.approx(float(np.sum(x)), abs=1e-9)
    norms = np.linalg.norm(x, axis=1)
    unit = np.linalg.norm(T.l2_normalize(t, axis=1).data, axis=1)
    assert np.allclose(unit[norms > 1e-3], 1.0, atol=1e-6)


def test_log_softmax_stable_for_large_logits():
    out = T.log_softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == pytest.approx(0.0, abs=1e-12)


def test_zero_norm_flagged_and_finite():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = T.l2_normalize(Tensor(np.zeros((2, 3))), axis=1)
    assert np.all(np.isfinite(out.data))
    assert any(issubclass(x.category, ZeroNormWarning) for x in w)


def test_reduce_dispatch(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    assert T.reduce("sum", x).item() == pytest.approx(x.data.sum())
    assert np.allclose(T.reduce("softmax_lastdim", x).data.sum(axis=-1), 1.0)
    with pytest.raises(ContractError):
        T.reduce("max", x)


# -- shape ops ---------------------------------------------------------------------------

def test_concat_and_index_gradients(rng):
    rep = grad_check(
        lambda a, b: T.tsum(T.square(T.index(T.concat([a, b], axis=0), (np.array([0, 2, 2]), np.array([1, 0, 0]))))),
        {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(1, 3))},
    )
    assert rep.passed, rep.summary()


def test_reshape_transpose_roundtrip(rng):
    x = rng.normal(size=(2, 3, 4))
    t = T.transpose(T.reshape(Tensor(x), (6, 4)), (1, 0))
    assert np.array_equal(t.data, x.reshape(6, 4).T)


# -- tape --------------------------------------------------------------------------------

def test_backward_of_sum_is_ones(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    assert np.array_equal(backward(T.tsum(x))[x].data, np.ones((3, 2)))


def test_backward_of_constant_is_empty():
    assert len(backward(Tensor(3.0))) == 0


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        backward(Tensor(np.ones(3), requires_grad=True))


def test_tape_topological_and_single_use(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    y = T.tsum(T.exp(x) * x + x)
    tape = GradTape.from_root(y)
    assert tape.is_topological()
    ids = [e.out_id for e in tape.entries]
    assert len(ids) == len(set(ids))
    tape.replay(y)
    with pytest.raises(ContractError):
        tape.replay(y)


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    g = backward(T.tsum(y + y))
    assert g[x].data.item() == pytest.approx(8.0)


def test_gradient_shapes_match(rng):
    ps = {k: Tensor(rng.normal(size=s), requires_grad=True) for k, s in {"a": (2, 3), "b": (3,), "c": (1, 1)}.items()}
    g = backward(T.tsum(T.gelu(ps["a"] * ps["b"] + ps["c"])))
    for t in ps.values():
        assert g[t].shape == t.shape


def test_composite_cosine_mlp_gradients(rng):
    from cva.losses import cosine_loss

    h = Tensor(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(4, 5)))

    def f(w1, w2):
        return cosine_loss(T.matmul(T.gelu(T.matmul(x, w1)), w2), h)

    rep = grad_check(f, {"w1": rng.normal(size=(5, 6)), "w2": rng.normal(size=(6, 3))})
    assert rep.passed, rep.summary()


def test_f32_graph_stays_f32(rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True, dtype=np.float32)
    y = T.tsum(T.gelu(x) * 2.0)
    assert y.dtype == np.float32
    assert backward(y)[x].dtype == np.float32
