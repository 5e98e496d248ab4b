"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a read-only, row-major numpy array. Every operation
returns a new tensor; when any input requires a gradient the result keeps a
reference to its inputs together with a closure implementing the backward
rule. :func:`backward` linearises that graph into a :class:`GradTape`
(topological order, one entry per recorded operation) and replays it in
reverse.

Only what the networks and losses in this package need is implemented:
elementwise arithmetic with scalar or numpy-style broadcasting, 2-D matmul,
single-sample 3-D convolution, trilinear point sampling, separable per-axis
resampling, reductions (sum, mean, l2-normalize, softmax, log-softmax) and
a handful of shape operations.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse
from scipy.special import erf

from .constants import EPS, ZERO_NORM_THRESHOLD
from .errors import ContractError, DimensionError, RangeError

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))
_ids = itertools.count()


class ZeroNormWarning(RuntimeWarning):
    """A vector with (near) zero norm was normalized; the epsilon guard kicked in."""


class Tensor:
    __slots__ = ("data", "requires_grad", "id", "op", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None

    @classmethod
    def _result(cls, arr: np.ndarray, op: str, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t.data = arr
        t.id = next(_ids)
        t.op = op
        t.requires_grad = any(p.requires_grad for p in parents)
        if t.requires_grad:
            t.parents = tuple(parents)
            t.backward_fn = backward_fn
        else:
            t.parents = ()
            t.backward_fn = None
        return t

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.id = next(_ids)
        t.op = "detach"
        t.parents = ()
        t.backward_fn = None
        return t

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _check_dtypes(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(f"dtype mismatch in one graph: {a.dtype} vs {b.dtype}")


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = _as_tensor(b, a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    else:
        a, b = _as_tensor(a), _as_tensor(b)
    _check_dtypes(a, b)
    _broadcast_shape(a, b, op)
    return a, b


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data / b.data, "div", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * a.dtype.type(c), "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0).astype(a.dtype), "relu", (a,), lambda g: (g * mask,))


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor._result((x * cdf).astype(a.dtype), "gelu", (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    return Tensor._result(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


def tabs(a: Tensor) -> Tensor:
    return Tensor._result(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else ``b``. ``cond`` is constant."""
    a, b = _binary_operands(a, b, "where")
    cond = np.asarray(cond, dtype=bool)
    shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0), a.shape), _unbroadcast(np.where(cond, 0, g), b.shape)

    out = np.broadcast_to(np.where(cond, a.data, b.data), shape)
    return Tensor._result(np.array(out), "where", (a, b), bw)


ELEMENTWISE: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": lambda a, b=None: relu(a),
    "gelu": lambda a, b=None: gelu(a),
    "exp": lambda a, b=None: exp(a),
    "log": lambda a, b=None: log(a),
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: ``add, sub, mul, scale, relu, gelu, exp, log``."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_dtypes(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, "matmul", (a, b), bw)


def conv3d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a ``C_in x D x H x W`` volume with ``C_out x C_in x k x k x k`` weights."""
    _check_dtypes(x, w)
    if x.ndim != 4 or w.ndim != 5:
        raise DimensionError(f"conv3d expects input C x D x H x W and weight O x C x k x k x k, got {x.shape}, {w.shape}")
    c_in = x.shape[0]
    c_out, wc, k, k2, k3 = w.shape
    if wc != c_in:
        raise DimensionError(f"conv3d channel mismatch: input has {c_in}, weight expects {wc}")
    if not (k == k2 == k3) or k % 2 == 0:
        raise DimensionError(f"conv3d needs a cubic odd kernel, got {w.shape[2:]}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"invalid stride/pad {stride}/{pad}")
    ext = x.shape[1:]
    if any(e + 2 * pad < k for e in ext):
        raise DimensionError(f"kernel {k} larger than padded input {tuple(e + 2 * pad for e in ext)}")
    out_ext = tuple((e + 2 * pad - k) // stride + 1 for e in ext)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.data
    s = stride
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::s, ::s, ::s]
    # win: C_in x Do x Ho x Wo x k x k x k
    out = np.tensordot(w.data, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))

    def bw(g):
        gw = np.tensordot(g, win, axes=([1, 2, 3], [1, 2, 3]))
        gxp = np.zeros_like(xp)
        do, ho, wo = out_ext
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    contrib = np.tensordot(w.data[:, :, i, j, l], g, axes=([0], [0]))
                    gxp[:, i:i + s * (do - 1) + 1:s, j:j + s * (ho - 1) + 1:s, l:l + s * (wo - 1) + 1:s] += contrib
        if pad:
            gxp = gxp[:, pad:-pad, pad:-pad, pad:-pad]
        return gxp, gw

    return Tensor._result(out, "conv3d", (x, w), bw)


# -- interpolation --------------------------------------------------------------

def linear_weights(coords: np.ndarray, ext: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower index, upper index and upper weight for 1-D linear interpolation.

    ``coords`` must already lie in ``[0, ext - 1]``.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if ext == 1:
        z = np.zeros(coords.shape, dtype=np.int64)
        return z, z, np.zeros(coords.shape)
    lo = np.clip(np.floor(coords).astype(np.int64), 0, ext - 2)
    return lo, lo + 1, coords - lo


def interp_matrix(coords: np.ndarray, ext: int) -> np.ndarray:
    """Dense ``len(coords) x ext`` matrix of 1-D linear interpolation weights."""
    lo, hi, f = linear_weights(coords, ext)
    m = np.zeros((len(lo), ext))
    rows = np.arange(len(lo))
    np.add.at(m, (rows, lo), 1.0 - f)
    np.add.at(m, (rows, hi), f)
    return m


def _check_coords(coords: np.ndarray, ext: Sequence[int], tol: float = 1e-9) -> np.ndarray:
    names = ("z", "y", "x")
    coords = np.array(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DimensionError(f"coords must be N x 3, got {coords.shape}")
    for a in range(3):
        c = coords[:, a]
        bad = (c < -tol) | (c > ext[a] - 1 + tol) | ~np.isfinite(c)
        if bad.any():
            v = c[bad][0]
            raise RangeError(f"coordinate {v!r} on axis {names[a]} outside [0, {ext[a] - 1}]")
        coords[:, a] = np.clip(c, 0, ext[a] - 1)
    return coords


def trilinear_sample(fmap: Tensor, coords) -> Tensor:
    """Sample a ``C x D x H x W`` map at continuous voxel-index points.

    Integer coordinates address voxel centres; valid range per axis is
    ``[0, extent - 1]``. Returns ``C x N``.
    """
    if fmap.ndim != 4:
        raise DimensionError(f"trilinear_sample expects C x D x H x W, got {fmap.shape}")
    c, d, h, w = fmap.shape
    coords = _check_coords(coords, (d, h, w))
    n = coords.shape[0]
    idx, wts = [], []
    lz, hz, fz = linear_weights(coords[:, 0], d)
    ly, hy, fy = linear_weights(coords[:, 1], h)
    lx, hx, fx = linear_weights(coords[:, 2], w)
    for zi, wz in ((lz, 1 - fz), (hz, fz)):
        for yi, wy in ((ly, 1 - fy), (hy, fy)):
            for xi, wx in ((lx, 1 - fx), (hx, fx)):
                idx.append((zi * h + yi) * w + xi)
                wts.append(wz * wy * wx)
    rows = np.tile(np.arange(n), 8)
    s = sparse.csr_matrix((np.concatenate(wts), (rows, np.concatenate(idx))), shape=(n, d * h * w))
    flat = fmap.data.reshape(c, -1)
    out = np.asarray((s @ flat.T).T, dtype=fmap.dtype)

    def bw(g):
        return (np.asarray((s.T @ g.T).T, dtype=fmap.dtype).reshape(fmap.shape),)

    return Tensor._result(out, "trilinear_sample", (fmap,), bw)


def resample_axis(t: Tensor, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a constant ``out x in`` matrix along one axis (separable linear resampling)."""
    m = np.asarray(matrix, dtype=t.dtype)
    axis = axis % t.ndim
    if m.ndim != 2 or m.shape[1] != t.shape[axis]:
        raise DimensionError(f"resample matrix {m.shape} does not match axis {axis} of {t.shape}")
    out = np.moveaxis(np.tensordot(m, t.data, axes=([1], [axis])), 0, axis)

    def bw(g):
        return (np.moveaxis(np.tensordot(m.T, g, axes=([1], [axis])), 0, axis),)

    return Tensor._result(out, "resample_axis", (t,), bw)


# -- reductions -----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(out)


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, t.ndim)
    out = t.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, t.shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=t.dtype), "sum", (t,), bw)


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, t.ndim)
    count = t.size if axes is None else int(np.prod([t.shape[a] for a in axes]))
    return scale(tsum(t, axes, keepdims), 1.0 / count)


def l2_normalize(t: Tensor, axis: int = -1) -> Tensor:
    """``x / sqrt(sum(x^2) + EPS)`` along ``axis``; zero-norm slices raise a ZeroNormWarning."""
    ax = _norm_axis(axis, t.ndim)[0]
    x = t.data
    sq = (x * x).sum(axis=ax, keepdims=True)
    if (sq < ZERO_NORM_THRESHOLD).any():
        warnings.warn(f"{int((sq < ZERO_NORM_THRESHOLD).sum())} zero-norm vector(s) normalized", ZeroNormWarning, stacklevel=2)
    norm = np.sqrt(sq + EPS)
    y = x / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=ax, keepdims=True)) / norm,)

    return Tensor._result(y, "l2_normalize", (t,), bw)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, t.ndim)[0]
    z = t.data - t.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return Tensor._result(y, "softmax", (t,), bw)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Log-sum-exp stabilised log-softmax."""
    ax = _norm_axis(axis, t.ndim)[0]
    z = t.data - t.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return Tensor._result(out, "log_softmax", (t,), bw)


REDUCTIONS: dict[str, Callable] = {
    "sum": lambda t, axis=None: tsum(t, axis),
    "mean": lambda t, axis=None: mean(t, axis),
    "channel_l2_normalize": lambda t, axis=0: l2_normalize(t, 0 if axis is None else axis),
    "softmax_lastdim": lambda t, axis=None: softmax(t, -1),
}


def reduce(op: str, t: Tensor, axis=None) -> Tensor:
    """Dispatch by name: ``sum, mean, channel_l2_normalize, softmax_lastdim``."""
    try:
        fn = REDUCTIONS[op]
    except KeyError:
        raise ContractError(f"unknown reduction {op!r}") from None
    return fn(t, axis)


# -- shape operations -----------------------------------------------------------

def reshape(t: Tensor, shape) -> Tensor:
    try:
        out = t.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {t.shape} to {tuple(shape)}") from None
    return Tensor._result(out, "reshape", (t,), lambda g: (g.reshape(t.shape),))


def transpose(t: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(t.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return Tensor._result(t.data.transpose(axes), "transpose", (t,), lambda g: (g.transpose(inv),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    if not ts:
        raise ContractError("concat of an empty sequence")
    for t in ts[1:]:
        _check_dtypes(ts[0], t)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, "concat", ts, bw)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


def index(t: Tensor, idx) -> Tensor:
    out = t.data[idx]

    def bw(g):
        full = np.zeros(t.shape, dtype=t.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(np.array(out), "index", (t,), bw)


# -- backward -------------------------------------------------------------------

@dataclass
class TapeEntry:
    op: str
    out_id: int
    input_ids: tuple[int, ...]
    tensor: Tensor = field(repr=False)


@dataclass
class GradTape:
    """Recorded operations in topological order (inputs before outputs)."""

    entries: list[TapeEntry] = field(default_factory=list)
    consumed: bool = False

    @classmethod
    def from_root(cls, root: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen or not node.requires_grad:
                continue
            seen.add(node.id)
            stack_.append((node, True))
            for p in reversed(node.parents):
                if p.id not in seen and p.requires_grad:
                    stack_.append((p, False))
        entries = [TapeEntry(t.op, t.id, tuple(p.id for p in t.parents), t) for t in order]
        return cls(entries)

    def is_topological(self) -> bool:
        pos = {e.out_id: i for i, e in enumerate(self.entries)}
        return all(pos.get(i, -1) < pos[e.out_id] for e in self.entries for i in e.input_ids if i in pos)

    def replay(self, root: Tensor, seed: np.ndarray | None = None) -> "Gradients":
        if self.consumed:
            raise ContractError("tape already consumed; rebuild it from the root")
        grads: dict[int, np.ndarray] = {}
        result = Gradients()
        if not root.requires_grad:
            self.reset()
            return result
        grads[root.id] = np.ones(root.shape, dtype=root.dtype) if seed is None else np.asarray(seed, dtype=root.dtype)
        for entry in reversed(self.entries):
            t = entry.tensor
            g = grads.pop(t.id, None)
            if g is None:
                continue
            if not t.parents:
                result[t.id] = Tensor(g, dtype=t.dtype)
                continue
            pgs = t.backward_fn(g)
            for p, pg in zip(t.parents, pgs):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ContractError(f"backward of {t.op} produced {pg.shape} for input {p.shape}")
                if p.id in grads:
                    grads[p.id] = grads[p.id] + pg
                else:
                    grads[p.id] = pg
        self.reset()
        return result

    def reset(self) -> None:
        self.entries = []
        self.consumed = True


class Gradients(dict):
    """``{tensor id -> gradient Tensor}``; also indexable by the tensor itself."""

    @staticmethod
    def _key(k):
        return k.id if isinstance(k, Tensor) else k

    def __getitem__(self, k):
        return super().__getitem__(self._key(k))

    def __contains__(self, k):
        return super().__contains__(self._key(k))

    def get(self, k, default=None):
        return super().get(self._key(k), default)


def backward(root: Tensor, seed=None) -> Gradients:
    """Gradients of a scalar ``root`` with respect to every leaf that requires one."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    return GradTape.from_root(root).replay(root, seed)


def params_from_arrays(arrays: dict[str, np.ndarray], requires_grad: bool, dtype=None) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, dtype=dtype) for k, v in arrays.items()}


def as_arrays(ts: Iterable[Tensor]) -> list[np.ndarray]:
    return [t.data for t in ts]
