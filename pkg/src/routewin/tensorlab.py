"""Dense numpy-backed tensors with a reverse-mode tape.

Every op is a plain function that computes its forward value with numpy and,
when any input requires grad, records a closure that maps the output
gradient back onto its inputs.  ``Tensor.backward`` replays those closures in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "DimensionError", "NumericError",
    "no_grad", "mac_counter", "tensor", "zeros", "ones",
    "add", "sub", "mul", "div", "neg", "matmul", "sum", "mean", "reshape",
    "transpose", "take", "concat", "split", "getitem", "softmax", "abs",
    "square", "gelu", "conv2d", "conv1x1", "dwconv", "layer_norm",
    "pixel_shuffle", "pixel_unshuffle", "dft2", "roll", "pad_edge",
    "crop", "resample", "grad_check",
]


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an op."""


class NumericError(ArithmeticError):
    """Raised on non-finite values where an op forbids them."""


_GRAD_ENABLED = True
_MAC_COUNTERS: list[dict] = []


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def mac_counter():
    """Tally multiply-accumulates performed by ``matmul`` inside the block.

    Yields a dict whose ``"macs"`` entry is updated in place.
    """
    ctr = {"macs": 0, "calls": 0}
    _MAC_COUNTERS.append(ctr)
    try:
        yield ctr
    finally:
        _MAC_COUNTERS.remove(ctr)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = Tape.from_output(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Tape:
    """Topologically ordered view of the graph that produced a tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        return _as_tensor(a, b), b
    if not isinstance(b, Tensor):
        return a, _as_tensor(b, a)
    return a, b


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def zeros(*shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(*shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _record(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def abs(a: Tensor) -> Tensor:
    # np.sign(0) == 0, so the subgradient at a kink is zero
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    return _record(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), bw, "getitem")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """``np.take`` with a scatter-add backward; repeated indices accumulate."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def bw(g):
        full = np.zeros_like(a.data)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(np.moveaxis(full, axis, 0), indices, gm)
        return (full,)

    return _record(np.take(a.data, indices, axis=axis), (a,), bw, "take")


def concat(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [_as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([t.data for t in items], axis=axis), tuple(items), bw, "concat")


def split(a: Tensor, parts: int, axis: int = 0) -> list[Tensor]:
    n = a.shape[axis]
    if n % parts:
        raise DimensionError(f"cannot split axis of size {n} into {parts} equal chunks")
    step = n // parts
    out = []
    for i in range(parts):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(a, tuple(idx)))
    return out


def roll(a: Tensor, shifts, axes) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _record(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, back, axes),), "roll")


def pad_edge(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Edge-replicate ``x[..., h, w]`` on the bottom and right."""
    if pad_h == 0 and pad_w == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, pad_h), (0, pad_w)]
    h, w = x.shape[-2:]

    def bw(g):
        g = g.copy()
        if pad_h:
            g[..., h - 1, :] += g[..., h:, :].sum(axis=-2)
        if pad_w:
            g[..., :, w - 1] += g[..., :, w:].sum(axis=-1)
        return (g[..., :h, :w],)

    return _record(np.pad(x.data, widths, mode="edge"), (x,), bw, "pad_edge")


def crop(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape[-2:] == (h, w):
        return x
    return getitem(x, (Ellipsis, slice(0, h), slice(0, w)))


# ---------------------------------------------------------------------------
# reductions / linear algebra
# ---------------------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    if _MAC_COUNTERS:
        macs = int(np.prod(out.shape)) * a.shape[-1]
        for ctr in _MAC_COUNTERS:
            ctr["macs"] += macs
            ctr["calls"] += 1

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record(out, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# image ops, layout [c, h, w]
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[c_in,h,w]`` with ``weight[c_out,c_in,kh,kw]``."""
    c_in, h, w = x.shape
    c_out, wc, kh, kw = weight.shape
    if wc != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d kernel {weight.shape} larger than padded input {x.shape}")
    if kh == kw == 1 and stride == 1 and padding == 0:
        return conv1x1(x, weight, bias)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = cols.shape[1:3]
    # cols: [c_in, oh, ow, kh, kw]
    out = np.einsum("chwij,ocij->ohw", cols, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def bw(g):
        gw = np.einsum("ohw,chwij->ocij", g, cols, optimize=True)
        gcols = np.einsum("ohw,ocij->chwij", g, weight.data, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[..., i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g.sum(axis=(1, 2)) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _record(out, parents, bw, "conv2d")


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    c_in, h, w = x.shape
    w2 = weight.data.reshape(weight.shape[0], -1)
    if w2.shape[1] != c_in:
        raise DimensionError(f"conv1x1 channel mismatch: input {x.shape}, weight {weight.shape}")
    xf = x.data.reshape(c_in, h * w)
    out = w2 @ xf
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(-1, h, w)

    def bw(g):
        gf = g.reshape(g.shape[0], -1)
        gx = (w2.T @ gf).reshape(x.shape)
        gw = (gf @ xf.T).reshape(weight.shape)
        gb = gf.sum(axis=1) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _record(out, parents, bw, "conv1x1")


def dwconv(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """Depth-wise convolution: ``weight[c,1,kh,kw]``, one filter per channel."""
    c, h, w = x.shape
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise DimensionError(f"dwconv weight {weight.shape} incompatible with input {x.shape}")
    kh, kw = weight.shape[2:]
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"dwconv kernel {weight.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    oh, ow = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    wk = weight.data[:, 0]
    out = np.zeros((c, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += wk[:, i, j, None, None] * xp[:, i:i + oh, j:j + ow]
    if bias is not None:
        out += bias.data[:, None, None]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + oh, j:j + ow] += wk[:, i, j, None, None] * g
                gw[:, 0, i, j] = (g * xp[:, i:i + oh, j:j + ow]).sum(axis=(1, 2))
        gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g.sum(axis=(1, 2)) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _record(out, parents, bw, "dwconv")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over channels (axis 0) at every spatial site."""
    mu = x.data.mean(axis=0, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_ = gamma.data[:, None, None]
    out = xhat * g_ + beta.data[:, None, None]

    def bw(g):
        gxhat = g * g_
        gx = inv * (gxhat - gxhat.mean(axis=0, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=0, keepdims=True))
        return (gx, (g * xhat).sum(axis=(1, 2)), g.sum(axis=(1, 2)))

    return _record(out, (x, gamma, beta), bw, "layer_norm")


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """``out[ch, s*y+dy, s*x+dx] = in[ch*s*s + dy*s + dx, y, x]``."""
    c, h, w = x.shape
    if c % (s * s):
        raise DimensionError(f"pixel_shuffle: {c} channels not divisible by {s}^2")
    out = x.reshape(c // (s * s), s, s, h, w).transpose(0, 3, 1, 4, 2)
    return out.reshape(c // (s * s), h * s, w * s)


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    c, h, w = x.shape
    if h % s or w % s:
        raise DimensionError(f"pixel_unshuffle: spatial {h}x{w} not divisible by {s}")
    out = x.reshape(c, h // s, s, w // s, s).transpose(0, 2, 4, 1, 3)
    return out.reshape(c * s * s, h // s, w // s)


def dft2(x: Tensor) -> tuple[Tensor, Tensor]:
    """Unnormalised 2-D DFT over the last two axes; returns (real, imag)."""
    h, w = x.shape[-2:]
    spec = np.fft.fft2(x.data, axes=(-2, -1))
    stacked = np.stack([spec.real, spec.imag]).astype(x.dtype, copy=False)

    def bw(g):
        # adjoint of the real->(re, im) map: Re(h*w * ifft2(g_re + i g_im))
        back = np.fft.ifft2(g[0] + 1j * g[1], axes=(-2, -1)) * (h * w)
        return (back.real.astype(x.dtype, copy=False),)

    out = _record(stacked, (x,), bw, "dft2")
    return getitem(out, 0), getitem(out, 1)


def resample_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Bilinear (half-pixel aligned) 1-D resampling matrix of shape [n_out, n_in]."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def resample(x: Tensor, h_out: int, w_out: int) -> Tensor:
    """Separable bilinear resize of ``x[..., h, w]``."""
    h, w = x.shape[-2:]
    rh = Tensor(resample_matrix(h, h_out, x.dtype))
    rw = Tensor(resample_matrix(w, w_out, x.dtype).T)
    return _linear_rows(_linear_cols(x, rw), rh)


def _linear_cols(x: Tensor, m: Tensor) -> Tensor:
    out = x.data @ m.data
    return _record(out, (x,), lambda g: (g @ m.data.T,), "resample")


def _linear_rows(x: Tensor, m: Tensor) -> Tensor:
    out = np.einsum("oh,...hw->...ow", m.data, x.data)
    return _record(out, (x,), lambda g: (np.einsum("oh,...ow->...hw", m.data, g),), "resample")


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor] | Tensor,
               h: float = 1e-6, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is a zero-argument closure returning a scalar Tensor that reads the
    current values of ``params``.  ``max_entries`` subsamples entries per
    parameter (chosen by ``rng``) to keep large models tractable.
    """
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise NumericError("grad_check requires 64-bit parameters")
        p.requires_grad = True
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: non-finite function value")
    out.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError("grad_check: non-finite value at perturbed point")
                num = (fp - fm) / (2 * h)
                a = float(analytic.reshape(-1)[i])
                err = math.fabs(a - num) / max(math.fabs(a), math.fabs(num), 1e-8)
                worst = max(worst, err)
    return worst
