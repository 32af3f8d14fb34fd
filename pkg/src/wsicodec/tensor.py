"""Dense NCHW tensors with a small reverse-mode tape.

Only the operators the codec, the entropy model and the metrics need are
provided. Storage is float32; float64 tensors are accepted so gradients can
be checked against finite differences recomputed at double precision.
Reductions accumulate in float64.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

GDN_BETA_MIN = 1e-6

#: Number of times GDN parameters had to be clamped, keyed by parameter name.
clamp_events: Counter = Counter()

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 and getattr(_state, "f64", False) else np.float32
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """An n-dimensional float array, optionally tracked on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


@contextlib.contextmanager
def float64_mode():
    """Let ``Tensor`` keep float64 inputs instead of downcasting them."""
    prev = getattr(_state, "f64", False)
    _state.f64 = True
    try:
        yield
    finally:
        _state.f64 = prev


def from_op(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    """Wrap ``data`` as the output of ``op``; records a tape node when needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out.node = TapeNode(op, tuple(inputs), backward_fn)
    return out


def _result_dtype(*ts: Tensor):
    return np.result_type(*(t.data.dtype for t in ts))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return from_op(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return from_op(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return from_op(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return from_op(a.data * a.data.dtype.type(c), (a,), "scale", lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return from_op(a.data + a.data.dtype.type(c), (a,), "add_scalar", lambda g: (g,))


def square(a: Tensor) -> Tensor:
    return from_op(a.data * a.data, (a,), "square", lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    """Square root with a zero gradient at exactly zero."""
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0).astype(out.dtype),)

    return from_op(out, (a,), "sqrt", bw)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return from_op(out, (a,), "exp", lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return from_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), "relu", lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes only where the input was inside the range."""
    mask = (a.data >= lo) & (a.data <= hi)
    return from_op(np.clip(a.data, lo, hi), (a,), "clamp", lambda g: (g * mask,))


# --- reductions and reshaping ------------------------------------------------


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    total = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype).reshape(())
    return from_op(total, (a,), "sum", lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    m = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype).reshape(())
    return from_op(m, (a,), "mean", lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def spatial_mean(x: Tensor) -> Tensor:
    """Average NCHW over H and W, giving an (N, C) tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"spatial_mean expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return from_op(out, (x,), "spatial_mean", bw)


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row of an (N, D) tensor; zero rows get zero gradient."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_norm expects (N, D), got {x.shape}")
    norms = np.sqrt(np.sum(x.data.astype(np.float64) ** 2, axis=1)).astype(x.dtype)

    def bw(g):
        safe = np.where(norms > 0, norms, 1.0)
        coef = np.where(norms > 0, g / safe, 0.0)
        return ((coef[:, None] * x.data).astype(x.dtype),)

    return from_op(norms, (x,), "row_norm", bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias of shape (C,) to an NCHW tensor."""
    if x.data.ndim != 4 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {b.shape} does not match channels of {x.shape}")
    out = x.data + b.data[None, :, None, None]
    return from_op(out.astype(_result_dtype(x, b)), (x, b), "add_bias",
                   lambda g: (g, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(b.dtype)))


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    return np.pad(np.arange(n), (before, after), mode="reflect")


def pad_reflect(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Mirror-pad the two spatial axes without repeating the edge sample."""
    n, c, h, w = x.shape
    if max(top, bottom) >= h or max(left, right) >= w:
        raise ShapeError(f"reflect pad ({top},{bottom},{left},{right}) too large for {h}x{w}")
    if top == bottom == left == right == 0:
        return x
    ih = _reflect_index(h, top, bottom)
    iw = _reflect_index(w, left, right)
    out = np.ascontiguousarray(x.data[:, :, ih][:, :, :, iw])

    def bw(g):
        gh = g[:, :, top:top + h, :].copy()
        for r in list(range(top)) + list(range(top + h, top + h + bottom)):
            gh[:, :, ih[r], :] += g[:, :, r, :]
        gw = gh[:, :, :, left:left + w].copy()
        for col in list(range(left)) + list(range(left + w, left + w + right)):
            gw[:, :, :, iw[col]] += gh[:, :, :, col]
        return (gw,)

    return from_op(out, (x,), "pad_reflect", bw)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    n, c, h, w = x.shape
    if top + height > h or left + width > w or top < 0 or left < 0:
        raise ShapeError(f"crop {height}x{width}@({top},{left}) outside {h}x{w}")
    if (top, left, height, width) == (0, 0, h, w):
        return x
    out = np.ascontiguousarray(x.data[:, :, top:top + height, left:left + width])

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, top:top + height, left:left + width] = g
        return (full,)

    return from_op(out, (x,), "crop", bw)


# --- convolution ------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, pad: int, output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * pad + kernel + output_padding


def _check_conv_args(x: np.ndarray, k: np.ndarray, stride: int, pad: int, op: str, in_axis: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be NCHW, got rank {x.ndim}")
    if k.ndim != 4 or k.shape[2] != k.shape[3]:
        raise ShapeError(f"{op}: kernel must be square rank-4, got {k.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"{op}: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if x.shape[1] != k.shape[in_axis]:
        raise ShapeError(
            f"{op}: input has {x.shape[1]} channels but kernel expects {k.shape[in_axis]} "
            f"(kernel shape {k.shape})"
        )


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather (N*ho*wo, k*k*C) patch rows from a padded NCHW array."""
    n, c = xp.shape[:2]
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xt[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(n * ho * wo, k * k * c)


def _col2im(cols: np.ndarray, out_hw: tuple, stride: int) -> np.ndarray:
    """Adjoint of ``_im2col``: ``cols`` is (N, ho, wo, k, k, C); returns NCHW."""
    n, ho, wo, k, _, c = cols.shape
    buf = np.zeros((n,) + tuple(out_hw) + (c,), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            buf[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, :, :, i, j]
    return buf.transpose(0, 3, 1, 2)


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    # (O, C, k, k) -> (k*k*C, O), matching the _im2col column order
    o = kernel.shape[0]
    return np.ascontiguousarray(kernel.transpose(2, 3, 1, 0).reshape(-1, o))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding. ``kernel`` is (out, in, K, K)."""
    _check_conv_args(x.data, kernel.data, stride, pad, "conv2d", in_axis=1)
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    dtype = _result_dtype(x, kernel)
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp.astype(dtype, copy=False), k, stride, ho, wo)
    wmat = _kernel_matrix(kernel.data.astype(dtype, copy=False))
    out = np.ascontiguousarray((cols @ wmat).reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gx = gk = None
        if x.requires_grad:
            dcols = (gmat @ wmat.T).reshape(n, ho, wo, k, k, c)
            gx = _col2im(dcols, xp.shape[2:], stride)[:, :, pad:pad + h, pad:pad + w]
        if kernel.requires_grad:
            gk = (cols.T @ gmat).reshape(k, k, c, o).transpose(3, 2, 0, 1)
        return gx, gk

    return from_op(out, (x, kernel), "conv2d", bw)


def deconv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of ``conv2d`` for the same kernel.

    ``kernel`` is (in, out, K, K): the layout of the conv2d kernel it transposes.
    """
    _check_conv_args(x.data, kernel.data, stride, pad, "deconv2d", in_axis=0)
    if not 0 <= output_padding < stride:
        raise ShapeError(f"deconv2d: output_padding must be in [0, stride), got {output_padding}")
    n, c, h, w = x.shape
    co, k = kernel.shape[1], kernel.shape[2]
    ho = deconv_output_size(h, k, stride, pad, output_padding)
    wo = deconv_output_size(w, k, stride, pad, output_padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"deconv2d: empty output for input {h}x{w}, kernel {k}, pad {pad}")
    dtype = _result_dtype(x, kernel)
    full_h = max((h - 1) * stride + k, pad + ho)
    full_w = max((w - 1) * stride + k, pad + wo)
    # kernel viewed as a conv2d kernel mapping co -> c
    wmat = _kernel_matrix(kernel.data.astype(dtype, copy=False))  # (k*k*co, c)
    xmat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1), dtype=dtype).reshape(-1, c)
    cols = (xmat @ wmat.T).reshape(n, h, w, k, k, co)
    out = np.ascontiguousarray(_col2im(cols, (full_h, full_w), stride)[:, :, pad:pad + ho, pad:pad + wo])

    def bw(g):
        gfull = np.zeros((n, co, full_h, full_w), dtype=g.dtype)
        gfull[:, :, pad:pad + ho, pad:pad + wo] = g
        gcols = _im2col(gfull, k, stride, h, w)
        gx = gk = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ wmat).reshape(n, h, w, c).transpose(0, 3, 1, 2))
        if kernel.requires_grad:
            gk = (gcols.T @ xmat).reshape(k, k, co, c).transpose(3, 2, 0, 1)
        return gx, gk

    return from_op(out, (x, kernel), "deconv2d", bw)


# --- generalized divisive normalization --------------------------------------


def gdn(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool = False) -> Tensor:
    """y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2); ``inverse`` multiplies instead."""
    if x.data.ndim != 4:
        raise ShapeError(f"gdn expects NCHW, got {x.shape}")
    c = x.shape[1]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise ShapeError(f"gdn: beta {beta.shape} / gamma {gamma.shape} do not match {c} channels")
    b, gm = beta.data, gamma.data
    if np.any(b < GDN_BETA_MIN):
        clamp_events["beta"] += 1
        logger.warning("gdn: clamping %d beta values below %g", int(np.sum(b < GDN_BETA_MIN)), GDN_BETA_MIN)
        b = np.maximum(b, GDN_BETA_MIN)
    if np.any(gm < 0):
        clamp_events["gamma"] += 1
        logger.warning("gdn: clamping %d negative gamma values", int(np.sum(gm < 0)))
        gm = np.maximum(gm, 0)
    dtype = _result_dtype(x, beta, gamma)
    xd = x.data
    norm = np.einsum("ij,njhw->nihw", gm, xd * xd, optimize=True) + b[None, :, None, None]
    root = np.sqrt(norm)
    out = (xd * root if inverse else xd / root).astype(dtype)

    def bw(g):
        # t_i = d y_i / d norm_i, times the upstream gradient
        if inverse:
            t = 0.5 * g * xd / root
            gx_direct = g * root
        else:
            t = -0.5 * g * xd / (norm * root)
            gx_direct = g / root
        gx = (gx_direct + 2.0 * xd * np.einsum("ij,nihw->njhw", gm, t, optimize=True)).astype(dtype)
        gb = t.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
        gg = np.einsum("nihw,njhw->ij", t, xd * xd, optimize=True).astype(dtype)
        return gx, gb, gg

    return from_op(out, (x, beta, gamma), "gdn_inverse" if inverse else "gdn", bw)


# --- tape traversal ---------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``root``.

    Leaf gradients are assigned, not accumulated, so repeated calls on the
    same tape give identical results.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root is not on the tape")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for t in reversed(_topo_order(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = np.array(g, dtype=t.dtype, copy=True).reshape(t.shape)
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step. Returns (new_params, state)."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_update: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_update: shape mismatch for parameter {i}: {p.shape} vs {g.shape}")
        g64 = g.astype(np.float64)
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g64
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g64 * g64
        upd = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        out.append((p - upd).astype(p.dtype))
    return out, state


class Adam:
    """Adam over a fixed list of leaf tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_update([p.data for p in self.params], grads, self.state,
                                      self.lr, self.betas[0], self.betas[1], self.eps)
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
