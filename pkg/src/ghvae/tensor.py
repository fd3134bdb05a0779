"""Dense tensors with reverse-mode automatic differentiation on a recording tape.

Data lives in row-major numpy buffers (f32 for training, f64 for verification).
Operations record onto the active ``Tape`` only when at least one input requires
gradients, so frozen subnetworks run for free: their intermediate results are
never retained and never receive gradients. ``backward`` replays the tape in
reverse recording order exactly once per node and accumulates (+=) into the
``grad`` buffers of leaf tensors.

Finite values are part of every op's contract. Outputs are checked after each
forward at f64 always, and at f32 when GHVAE_CHECK_FINITE=1 is set (full scans
at training speed are wasteful; the training loop checks its scalar loss).
"""

from __future__ import annotations

import os
import struct
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Parameter",
    "GruWeights",
    "no_grad",
    "backward",
    "adam_step",
    "zero_grads",
    "save_tensor",
    "load_tensor",
    "tensor_to_bytes",
    "ShapeError",
    "NonFiniteError",
    "EmptyTapeError",
    "FormatError",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "softplus",
    "exp",
    "log",
    "clamp",
    "concat_channels",
    "slice_channels",
    "batch_slice",
    "concat_batch",
    "tile_spatial",
    "group_norm",
    "mean",
    "tsum",
    "l1",
    "mse",
    "conv2d",
    "conv2d_transpose",
    "conv_gru_step",
]


class ShapeError(ValueError):
    """An operation received incompatibly shaped inputs."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf, which is an error state."""


class EmptyTapeError(RuntimeError):
    """backward() was called without any recorded operations."""


class FormatError(ValueError):
    """A serialized tensor file is malformed."""


_CHECK_F32 = os.environ.get("GHVAE_CHECK_FINITE", "0") == "1"


def set_f32_finite_checks(enabled: bool) -> None:
    global _CHECK_F32
    _CHECK_F32 = enabled


class Tensor:
    """An N-dimensional array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index", "_param")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._index: int = -1
        self._param = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are treated as constants, not graph inputs
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a registered op; divide by a scalar")
        return scale(self, 1.0 / float(other))


class Parameter:
    """A named trainable tensor with Adam moment buffers."""

    __slots__ = ("name", "tensor", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.tensor = Tensor(value, requires_grad=True)
        self.tensor._param = True
        self.adam_m = np.zeros_like(self.tensor.data)
        self.adam_v = np.zeros_like(self.tensor.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def requires_grad(self) -> bool:
        return self.tensor.requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        self.tensor.requires_grad = flag

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class _Entry(NamedTuple):
    output: Tensor
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op_name: str
    alloc: bool = True  # False for views, which retain no buffer of their own


class Tape:
    """Recorded forward operations, in execution (= topological) order."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False

    def __len__(self):
        return len(self.entries)

    def retained_elements(self) -> int:
        """Total elements of op outputs this tape keeps alive for backward."""
        return sum(e.output.data.size for e in self.entries if e.alloc)

    def retained_leaf_elements(self) -> int:
        """Elements of non-parameter leaf inputs the tape keeps alive (data
        batches, frozen-subnetwork outputs consumed by recorded ops)."""
        seen: set[int] = set()
        total = 0
        for e in self.entries:
            for t in e.inputs:
                if t._tape is self or t._param or id(t.data) in seen:
                    continue
                seen.add(id(t.data))
                total += t.data.size
        return total


_TAPE_STACK: list[Optional[Tape]] = []


def _push_tape(tape: Optional[Tape]) -> None:
    _TAPE_STACK.append(tape)


def _pop_tape(tape: Optional[Tape]) -> None:
    popped = _TAPE_STACK.pop()
    if popped is not tape:
        raise RuntimeError("tape stack corrupted: exited a tape that is not innermost")


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Context manager that suspends recording entirely."""

    def __enter__(self):
        _push_tape(None)
        return self

    def __exit__(self, *exc):
        _pop_tape(None)
        return False


def _check_finite(arr: np.ndarray, op_name: str) -> None:
    if arr.dtype == np.float64 or _CHECK_F32:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{op_name} produced non-finite values")


def _make_output(data: np.ndarray, inputs: tuple, backward_fn, op_name: str,
                 alloc: bool = True) -> Tensor:
    _check_finite(data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    out._index = -1
    out._param = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        out._index = len(tape.entries)
        tape.entries.append(_Entry(out, inputs, backward_fn, op_name, alloc))
    return out


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt.name} and {t.dtype.name} in one op")
    return dt


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over dimensions that were broadcast in the forward pass."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# pointwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make_output(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make_output(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make_output(out, (a, b), bwd, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * x.dtype.type(c)

    def bwd(g):
        return (g * x.dtype.type(c),)

    return _make_output(out, (x,), bwd, "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data + x.dtype.type(c)

    def bwd(g):
        return (g,)

    return _make_output(out, (x,), bwd, "add_scalar")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.dtype.type(slope) * x.data)

    def bwd(g):
        return (np.where(pos, g, x.dtype.type(slope) * g),)

    return _make_output(out, (x,), bwd, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    # stable in both tails
    out = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                   np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    out = out.astype(x.dtype, copy=False)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make_output(out, (x,), bwd, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make_output(out, (x,), bwd, "tanh")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(x.dtype.type(0.0), x.data)

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-x.data))
        return (g * sig,)

    return _make_output(out, (x,), bwd, "softplus")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _make_output(out, (x,), bwd, "exp")


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _make_output(out, (x,), bwd, "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    interior = (x.data > lo) & (x.data < hi)

    def bwd(g):
        return (np.where(interior, g, 0.0),)

    return _make_output(out, (x,), bwd, "clamp")


def concat_channels(*tensors: Tensor) -> Tensor:
    _require(len(tensors) >= 1, "concat_channels needs at least one input")
    _same_dtype(*tensors)
    lead = tensors[0].data.shape[:-1]
    for i, t in enumerate(tensors[1:], start=1):
        _require(
            t.data.shape[:-1] == lead,
            f"concat_channels: input {i} non-channel extents {t.data.shape[:-1]} != {lead}",
        )
    out = np.concatenate([t.data for t in tensors], axis=-1)
    widths = [t.data.shape[-1] for t in tensors]
    edges = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[..., edges[i]:edges[i + 1]] for i in range(len(widths)))

    return _make_output(out, tuple(tensors), bwd, "concat_channels")


def tile_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """Broadcast a [B, C] tensor to [B, height, width, C]."""
    _require(x.data.ndim == 2, f"tile_spatial expects rank 2, got rank {x.data.ndim}")
    out = np.broadcast_to(x.data[:, None, None, :], (x.data.shape[0], height, width, x.data.shape[1])).copy()

    def bwd(g):
        return (g.sum(axis=(1, 2)),)

    return _make_output(out, (x,), bwd, "tile_spatial")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """View of a channel range along the last axis."""
    c = x.data.shape[-1]
    _require(0 <= start < stop <= c, f"slice_channels: [{start}:{stop}] out of range for {c} channels")
    out = x.data[..., start:stop]

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[..., start:stop] = g
        return (dx,)

    return _make_output(out, (x,), bwd, "slice_channels", alloc=False)


def batch_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """View of a row range along the leading (batch) axis."""
    b = x.data.shape[0]
    _require(0 <= start < stop <= b, f"batch_slice: [{start}:{stop}] out of range for {b} rows")
    out = x.data[start:stop]

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return _make_output(out, (x,), bwd, "batch_slice", alloc=False)


def concat_batch(*tensors: Tensor) -> Tensor:
    """Concatenate along the leading (batch) axis."""
    _require(len(tensors) >= 1, "concat_batch needs at least one input")
    _same_dtype(*tensors)
    trail = tensors[0].data.shape[1:]
    for i, t in enumerate(tensors[1:], start=1):
        _require(t.data.shape[1:] == trail,
                 f"concat_batch: input {i} trailing extents {t.data.shape[1:]} != {trail}")
    out = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]
    edges = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[edges[i]:edges[i + 1]] for i in range(len(sizes)))

    return _make_output(out, tuple(tensors), bwd, "concat_batch")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize per (batch, group) to zero mean / unit variance, then affine."""
    _require(x.data.ndim == 4, f"group_norm expects rank-4 input, got rank {x.data.ndim}")
    b, h, w, c = x.data.shape
    _require(c % groups == 0, f"group_norm: groups={groups} must divide channels={c}")
    _require(gamma.data.shape == (c,), f"group_norm: gamma shape {gamma.data.shape} != ({c},)")
    _require(beta.data.shape == (c,), f"group_norm: beta shape {beta.data.shape} != ({c},)")
    _same_dtype(x, gamma, beta)
    cg = c // groups
    xg = x.data.reshape(b, h * w, groups, cg)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    var = xg.var(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(b, h, w, c)
    out = xhat * gamma.data + beta.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 1, 2))
        dbeta = g.sum(axis=(0, 1, 2))
        dxh = (g * gamma.data).reshape(b, h * w, groups, cg)
        xh = xhat.reshape(b, h * w, groups, cg)
        m1 = dxh.mean(axis=(1, 3), keepdims=True)
        m2 = (dxh * xh).mean(axis=(1, 3), keepdims=True)
        dx = ((dxh - m1 - xh * m2) * inv).reshape(b, h, w, c)
        return dx, dgamma, dbeta

    return _make_output(out, (x, gamma, beta), bwd, "group_norm")


def mean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    n = x.data.size

    def bwd(g):
        return (np.full_like(x.data, g / n),)

    return _make_output(out, (x,), bwd, "mean")


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def bwd(g):
        return (np.full_like(x.data, g),)

    return _make_output(out, (x,), bwd, "sum")


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference (scalar)."""
    _require(a.data.shape == b.data.shape, f"l1: shapes {a.data.shape} != {b.data.shape}")
    _same_dtype(a, b)
    d = a.data - b.data
    out = np.asarray(np.abs(d).mean(), dtype=a.dtype)
    n = d.size

    def bwd(g):
        s = np.sign(d) * (g / n)
        return s, -s

    return _make_output(out, (a, b), bwd, "l1")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference (scalar)."""
    _require(a.data.shape == b.data.shape, f"mse: shapes {a.data.shape} != {b.data.shape}")
    _same_dtype(a, b)
    d = a.data - b.data
    out = np.asarray((d * d).mean(), dtype=a.dtype)
    n = d.size

    def bwd(g):
        s = (2.0 * g / n) * d
        return s, -s

    return _make_output(out, (a, b), bwd, "mse")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        pad_h = max((oh - 1) * stride + kh - h, 0)
        pad_w = max((ow - 1) * stride + kw - w, 0)
    elif padding == "valid":
        _require(h >= kh and w >= kw, f"valid conv: input {h}x{w} smaller than kernel {kh}x{kw}")
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        pad_h = pad_w = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return oh, ow, pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution, NHWC input, [kh, kw, Cin, Cout] weight.

    Computed as one matmul per kernel offset accumulated in a fixed (i, j)
    order: no im2col buffer, and the reduction order is deterministic.
    """
    _require(x.data.ndim == 4, f"conv2d: input rank {x.data.ndim} != 4")
    _require(weight.data.ndim == 4, f"conv2d: weight rank {weight.data.ndim} != 4")
    _require(stride >= 1, f"conv2d: stride {stride} < 1")
    b, h, w, cin = x.data.shape
    kh, kw, wcin, cout = weight.data.shape
    _require(wcin == cin, f"conv2d: input channels Cin={cin} but weight expects Cin={wcin}")
    _require(bias.data.shape == (cout,), f"conv2d: bias shape {bias.data.shape} != ({cout},)")
    if padding == "same":
        _require(kh % 2 == 1 and kw % 2 == 1, f"conv2d: same padding requires odd kernel, got {kh}x{kw}")
    _same_dtype(x, weight, bias)

    oh, ow, pt, pb, pl, pr = _conv_geometry(h, w, kh, kw, stride, padding)
    padded = pt or pb or pl or pr

    def pad_input():
        if not padded:
            return x.data
        return np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))

    s = stride
    xp = pad_input()
    out = np.zeros((b, oh, ow, cout), dtype=x.dtype)
    om = out.reshape(b * oh * ow, cout)
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, i:i + s * oh:s, j:j + s * ow:s, :].reshape(b * oh * ow, cin)
            om += sl @ weight.data[i, j]
    out += bias.data

    def bwd(g):
        gm = g.reshape(b * oh * ow, cout)
        xpb = pad_input()  # cheap; avoids retaining a padded copy on the tape
        dw = np.empty_like(weight.data)
        dxp = np.zeros_like(xpb)
        for i in range(kh):
            for j in range(kw):
                sl = xpb[:, i:i + s * oh:s, j:j + s * ow:s, :].reshape(b * oh * ow, cin)
                dw[i, j] = sl.T @ gm
                dxp[:, i:i + s * oh:s, j:j + s * ow:s, :] += (gm @ weight.data[i, j].T).reshape(b, oh, ow, cin)
        dx = dxp[:, pt:pt + h, pl:pl + w, :] if padded else dxp
        db = g.sum(axis=(0, 1, 2))
        return dx, dw, db

    return _make_output(out, (x, weight, bias), bwd, "conv2d")


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Adjoint of a same-padded strided conv2d; upsamples spatial extents by ``stride``.

    Weight is [kh, kw, Cout, Cin]: the op is the transpose of conv2d with that
    weight mapping Cout channels down to Cin.
    """
    _require(x.data.ndim == 4, f"conv2d_transpose: input rank {x.data.ndim} != 4")
    _require(weight.data.ndim == 4, f"conv2d_transpose: weight rank {weight.data.ndim} != 4")
    _require(stride >= 1, f"conv2d_transpose: stride {stride} < 1")
    b, h, w, cin = x.data.shape
    kh, kw, cout, wcin = weight.data.shape
    _require(wcin == cin, f"conv2d_transpose: input channels Cin={cin} but weight expects Cin={wcin}")
    _require(bias.data.shape == (cout,), f"conv2d_transpose: bias shape {bias.data.shape} != ({cout},)")
    _require(kh % 2 == 1 and kw % 2 == 1, f"conv2d_transpose: odd kernel required, got {kh}x{kw}")
    _same_dtype(x, weight, bias)

    ho, wo = h * stride, w * stride
    # geometry of the conv this op is adjoint to: [B,ho,wo,cout] -> [B,h,w,cin]
    _, _, pt, pb, pl, pr = _conv_geometry(ho, wo, kh, kw, stride, "same")
    s = stride
    xm = x.data.reshape(b * h * w, cin)
    yp = np.zeros((b, ho + pt + pb, wo + pl + pr, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            yp[:, i:i + s * h:s, j:j + s * w:s, :] += (xm @ weight.data[i, j].T).reshape(b, h, w, cout)
    out = np.ascontiguousarray(yp[:, pt:pt + ho, pl:pl + wo, :]) if (pt or pb or pl or pr) else yp
    out += bias.data

    def bwd(g):
        gp = np.pad(g, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else g
        dx = np.zeros((b * h * w, cin), dtype=x.dtype)
        dw = np.empty_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                gsl = gp[:, i:i + s * h:s, j:j + s * w:s, :].reshape(b * h * w, cout)
                dx += gsl @ weight.data[i, j]
                dw[i, j] = gsl.T @ xm
        db = g.sum(axis=(0, 1, 2))
        return dx.reshape(b, h, w, cin), dw, db

    return _make_output(out, (x, weight, bias), bwd, "conv2d_transpose")


class GruWeights(NamedTuple):
    gates_w: Tensor   # one conv emitting reset and update gates, 2 x channels
    gates_b: Tensor
    cand_w: Tensor
    cand_b: Tensor


def conv_gru_step(state: Tensor, inp: Tensor, weights: GruWeights) -> Tensor:
    """One convolutional GRU step; returns the new state.

    Gating follows the standard formulation: with update gate z and candidate c,
    the new state is (1 - z) * state + z * c, so a gate forced to 0 preserves
    the state exactly. Reset and update gates share one convolution.
    """
    _require(
        state.data.shape[:3] == inp.data.shape[:3],
        f"conv_gru_step: state extents {state.data.shape[:3]} != input extents {inp.data.shape[:3]}",
    )
    ch = state.data.shape[-1]
    xs = concat_channels(inp, state)
    gates = conv2d(xs, weights.gates_w, weights.gates_b, 1, "same")
    r = sigmoid(slice_channels(gates, 0, ch))
    z = sigmoid(slice_channels(gates, ch, 2 * ch))
    c = tanh(conv2d(concat_channels(inp, mul(r, state)), weights.cand_w, weights.cand_b, 1, "same"))
    one_minus_z = add_scalar(scale(z, -1.0), 1.0)
    return add(mul(one_minus_z, state), mul(z, c))


# ---------------------------------------------------------------------------
# backward pass and optimizer
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None or not tape.entries:
        raise EmptyTapeError("backward called with no recorded operations")
    cotangents: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries[: loss._index + 1]):
        g = cotangents.pop(id(entry.output), None)
        if g is None:
            continue
        grads = entry.backward_fn(g)
        for t, gi in zip(entry.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is tape:
                prev = cotangents.get(id(t))
                cotangents[id(t)] = gi if prev is None else prev + gi
            else:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi


def zero_grads(params) -> None:
    for p in params:
        p.tensor.grad = None


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update over ``params``; zeroes grads afterwards."""
    for p in params:
        if not p.tensor.requires_grad or p.tensor.grad is None:
            continue
        g = p.tensor.grad
        p.step_count += 1
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        mhat = p.adam_m / (1.0 - beta1 ** p.step_count)
        vhat = p.adam_v / (1.0 - beta2 ** p.step_count)
        p.tensor.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.tensor.dtype, copy=False)
        p.tensor.grad = None


# ---------------------------------------------------------------------------
# serialization: magic "GHVT", u8 dtype code (0=f32, 1=f64), u8 rank,
# u32 x rank little-endian extents, raw row-major scalars
# ---------------------------------------------------------------------------

_MAGIC = b"GHVT"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float32:
        code, dt = 0, "<f4"
    elif arr.dtype == np.float64:
        code, dt = 1, "<f8"
    else:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = _MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype(dt, copy=False).tobytes()


def bytes_to_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 6 or blob[:4] != _MAGIC:
        raise FormatError("bad magic: not a GHVT tensor blob")
    code, rank = struct.unpack("<BB", blob[4:6])
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    need = 6 + 4 * rank
    if len(blob) < need:
        raise FormatError("truncated tensor header")
    shape = struct.unpack(f"<{rank}I", blob[6:need])
    dt = _DTYPE_CODES[code]
    count = int(np.prod(shape)) if rank else 1
    body = blob[need:]
    if len(body) != count * dt.itemsize:
        raise FormatError(f"truncated tensor body: expected {count * dt.itemsize} bytes, got {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(shape).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return bytes_to_tensor(f.read())
