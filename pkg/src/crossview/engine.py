"""Reverse-mode automatic differentiation on dense numpy arrays.

Every operation produces a new :class:`Tensor` that records its parents and
a backward closure, so the history of a computation forms an implicit
append-only tape (node ids grow monotonically, nodes are never mutated).
:func:`backward` walks that tape once in reverse topological order and
accumulates vector-Jacobian products into the ``grad`` slot of every
reachable tensor that requires gradients.

Design constraints, in rough order of importance:

* correctness first: every op validates shapes eagerly and checks its
  output for NaN/Inf, raising :class:`NonFiniteError` that names the
  producing op and node id;
* f32/f64 agnostic: dtype is taken from the inputs, tests run the same
  code in float64;
* single writer per node: gradients are accumulated by the engine only,
  never in op closures, so repeated ``backward`` calls accumulate.

Convolutions are lowered to im2col + GEMM. Interpolated gathers
(:func:`bilinear_sample2d`, :func:`trilinear_sample3d`) return the sampled
tensor together with a boolean in-bounds mask; out-of-bounds rows are
exactly zero in both the value and the gradient.
"""

import itertools
import math
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_const",
    "exp",
    "sigmoid",
    "silu",
    "softmax",
    "matmul",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "cast",
    "concat",
    "getitem",
    "conv2d",
    "conv3d",
    "avg_pool2d",
    "upsample_nearest2d",
    "bilinear_sample2d",
    "trilinear_sample3d",
    "finite_difference_grad",
    "check_gradients",
]

_node_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the ``with`` block (process-wide)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    """Return whether new ops currently record backward closures."""
    return _grad_enabled


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf; names the op and node id."""


def _check_finite(data, op, node_id):
    if data.size and not (np.isfinite(data.min()) and np.isfinite(data.max())):
        raise NonFiniteError(f"non-finite values produced by op '{op}' (node {node_id})")


class Tensor:
    """A dense numpy array plus the bookkeeping needed for backprop.

    Parameters
    ----------
    data : array_like
        Converted with ``np.asarray``; integer input is promoted to float64.
    requires_grad : bool
        Whether :func:`backward` should populate ``grad`` for this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backfn")

    def __init__(self, data, requires_grad=False, *, op="leaf", _parents=(), _backfn=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backfn = _backfn
        _check_finite(arr, op, self.node_id)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """Return a leaf tensor sharing this tensor's array."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r}, grad={self.requires_grad})"

    # Operator sugar; all arithmetic routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def exp(self):
        return exp(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backfn):
    """Create a result node; drops the closure when grads are off."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, _parents=parents, _backfn=backfn)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss, grad=None):
    """Backpropagate from a scalar ``loss`` through the recorded tape.

    Gradients accumulate into ``.grad`` of every reachable tensor with
    ``requires_grad`` (call ``zero_grad`` between steps to reset). Returns
    the gradient store as a dict mapping node id to gradient array.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise ValueError("seed gradient shape mismatch")

    # Iterative post-order over parents that require gradients.
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))

    store = {loss.node_id: grad}
    for node in reversed(topo):
        g = store.get(node.node_id)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backfn is None:
            continue
        parent_grads = node._backfn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ValueError(
                    f"op '{node.op}' produced gradient of shape {pg.shape} "
                    f"for parent of shape {p.shape}"
                )
            prev = store.get(p.node_id)
            store[p.node_id] = pg if prev is None else prev + pg
    return store


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), back)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, "sub", (a, b), back)


def neg(a):
    a = _wrap(a)

    def back(g):
        return (-g,)

    return _make(-a.data, "neg", (a,), back)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), back)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, "div", (a, b), back)


def pow_const(a, p):
    """Elementwise ``a ** p`` for a python scalar exponent."""
    a = _wrap(a)
    p = float(p)
    out = a.data**p

    def back(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, "pow", (a,), back)


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)

    def back(g):
        return (g * out,)

    return _make(out, "exp", (a,), back)


def sigmoid(a):
    a = _wrap(a)
    # Stable in both tails: exp is only taken of non-positive values.
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (a,), back)


def silu(a):
    """Fused ``x * sigmoid(x)``; smooth, so finite differences stay sane."""
    a = _wrap(a)
    e = np.exp(-np.abs(a.data))
    s = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = a.data * s

    def back(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return _make(out, "silu", (a,), back)


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis`` (max-subtracted, fused)."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (a,), back)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(out, "sum", (a,), back)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.data.shape[axis] if isinstance(axis, int) else int(
        np.prod([a.data.shape[ax] for ax in axis])
    )

    def back(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(out, "mean", (a,), back)


def reshape(a, shape):
    a = _wrap(a)
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _make(out, "reshape", (a,), back)


def transpose(a, axes=None):
    a = _wrap(a)
    out = a.data.transpose(axes)

    def back(g):
        if axes is None:
            return (g.transpose(),)
        inv = np.argsort(axes)
        return (g.transpose(inv),)

    return _make(out, "transpose", (a,), back)


def cast(a, dtype):
    """Dtype conversion; the gradient is cast back to the input dtype."""
    a = _wrap(a)
    dtype = np.dtype(dtype)
    out = a.data.astype(dtype)

    def back(g):
        return (g.astype(a.dtype),)

    return _make(out, "cast", (a,), back)


def concat(tensors, axis=0):
    tensors = tuple(_wrap(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes[:-1])

    def back(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _make(out, "concat", tensors, back)


def getitem(a, idx):
    """Basic indexing (ints/slices); the gradient scatters back into place."""
    a = _wrap(a)
    out = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out, "getitem", (a,), back)


def matmul(a, b):
    """Matrix product with numpy batch broadcasting on leading dims."""
    a, b = _wrap(a), _wrap(b)
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if ga.shape != a.shape:
            ga = _unbroadcast(ga, a.shape)
        if gb.shape != b.shape:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make(out, "matmul", (a, b), back)


# ---------------------------------------------------------------------------
# Convolution (im2col + GEMM), pooling, upsampling
# ---------------------------------------------------------------------------


def _conv_cols(xv, ksz):
    """im2col: (B, Cin, *S) -> (B*P, Cin*K) windows under same-padding."""
    nsp = len(ksz)
    pads = [(0, 0), (0, 0)] + [((k - 1) // 2, (k - 1) // 2) for k in ksz]
    xp = np.pad(xv, pads)
    win = np.lib.stride_tricks.sliding_window_view(xp, ksz, axis=tuple(range(2, 2 + nsp)))
    # win: (B, Cin, *S, *ksz) -> (B, *S, Cin, *ksz) -> (B*P, Cin*K)
    order = (0,) + tuple(range(2, 2 + nsp)) + (1,) + tuple(range(2 + nsp, 2 + 2 * nsp))
    cols = win.transpose(order).reshape(xv.shape[0] * int(np.prod(xv.shape[2:])), -1)
    return np.ascontiguousarray(cols)


def _conv_forward(xd, kd, nsp):
    batched = xd.ndim == nsp + 2
    xv = xd if batched else xd[None]
    ksz = kd.shape[2:]
    cout = kd.shape[0]
    cols = _conv_cols(xv, ksz)
    out = cols @ kd.reshape(cout, -1).T
    spatial = xv.shape[2:]
    out = out.reshape(xv.shape[0], *spatial, cout)
    out = np.moveaxis(out, -1, 1)
    if not batched:
        out = out[0]
    return out, cols, batched


def _conv_backward(g, xd, kd, cols, nsp, batched):
    ksz = kd.shape[2:]
    cout = kd.shape[0]
    gv = g if batched else g[None]
    gmat = np.moveaxis(gv, 1, -1).reshape(-1, cout)
    grad_k = (gmat.T @ cols).reshape(kd.shape)
    # Input gradient is the same-padded convolution of g with the
    # spatially flipped kernel, channels transposed.
    kflip = kd[..., ::-1, ::-1] if nsp == 2 else kd[..., ::-1, ::-1, ::-1]
    kT = np.ascontiguousarray(np.swapaxes(kflip, 0, 1))
    grad_x, _, _ = _conv_forward(gv, kT, nsp)
    if not batched:
        grad_x = grad_x[0]
    return grad_x, grad_k


def _conv_nd(x, kernel, bias, nsp, opname):
    x, kernel = _wrap(x), _wrap(kernel)
    if kernel.ndim != nsp + 2:
        raise ValueError(f"{opname} kernel must have {nsp + 2} dims, got {kernel.ndim}")
    if x.ndim not in (nsp + 1, nsp + 2):
        raise ValueError(f"{opname} input must have {nsp + 1} or {nsp + 2} dims, got {x.ndim}")
    cin_axis = 0 if x.ndim == nsp + 1 else 1
    if x.shape[cin_axis] != kernel.shape[1]:
        raise ValueError(
            f"{opname}: input has {x.shape[cin_axis]} channels, kernel expects {kernel.shape[1]}"
        )
    if any(k % 2 == 0 for k in kernel.shape[2:]):
        raise ValueError(f"{opname} requires odd kernel extents, got {kernel.shape[2:]}")
    out, cols, batched = _conv_forward(x.data, kernel.data, nsp)
    parents = [x, kernel]
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (kernel.shape[0],):
            raise ValueError(f"{opname} bias must have shape ({kernel.shape[0]},)")
        bshape = (-1,) + (1,) * nsp
        out = out + bias.data.reshape(bshape)
        parents.append(bias)

    def back(g):
        grad_x, grad_k = _conv_backward(g, x.data, kernel.data, cols, nsp, batched)
        grads = [grad_x, grad_k]
        if bias is not None:
            axes = tuple(i for i in range(g.ndim) if i != (1 if batched else 0))
            grads.append(g.sum(axis=axes))
        return tuple(grads)

    return _make(out, opname, tuple(parents), back)


def conv2d(x, kernel, bias=None):
    """Same-padded stride-1 cross-correlation.

    ``x`` is ``(Cin, H, W)`` or ``(B, Cin, H, W)``; ``kernel`` is
    ``(Cout, Cin, kh, kw)`` with odd extents; optional ``bias`` is ``(Cout,)``.
    """
    return _conv_nd(x, kernel, bias, 2, "conv2d")


def conv3d(x, kernel, bias=None):
    """Same-padded stride-1 cross-correlation over three spatial dims.

    ``x`` is ``(Cin, D, H, W)`` or ``(B, Cin, D, H, W)``; ``kernel`` is
    ``(Cout, Cin, kd, kh, kw)`` with odd extents.
    """
    return _conv_nd(x, kernel, bias, 3, "conv3d")


def avg_pool2d(x, factor=2):
    """Non-overlapping mean pooling over the trailing two dims."""
    x = _wrap(x)
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"avg_pool2d needs extents divisible by {factor}, got {(h, w)}")
    lead = x.shape[:-2]
    xv = x.data.reshape(*lead, h // factor, factor, w // factor, factor)
    out = xv.mean(axis=(-3, -1))

    def back(g):
        g = g[..., :, None, :, None] / (factor * factor)
        g = np.broadcast_to(g, (*lead, h // factor, factor, w // factor, factor))
        return (g.reshape(x.shape).copy(),)

    return _make(out, "avg_pool2d", (x,), back)


def upsample_nearest2d(x, factor=2):
    """Nearest-neighbour upsampling of the trailing two dims."""
    x = _wrap(x)
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    h, w = x.shape[-2:]
    lead = x.shape[:-2]

    def back(g):
        g = g.reshape(*lead, h, factor, w, factor)
        return (g.sum(axis=(-3, -1)),)

    return _make(out, "upsample_nearest2d", (x,), back)


# ---------------------------------------------------------------------------
# Interpolated gathers
# ---------------------------------------------------------------------------


def bilinear_sample2d(m, coords):
    """Bilinearly sample ``m`` of shape (C, H, W) at ``coords`` (K, 2).

    Coordinates are continuous ``(row, col)`` pixel positions; integer
    coordinates hit pixel centers exactly. Returns ``(samples, valid)``
    where ``samples`` is a (K, C) tensor and ``valid`` a (K,) bool array;
    rows outside ``[0, H-1] x [0, W-1]`` are exactly zero and flagged
    invalid. Gradients flow to ``m`` only (coords are constants).
    """
    m = _wrap(m)
    coords = np.asarray(coords, dtype=np.float64)
    if m.ndim != 3:
        raise ValueError(f"bilinear_sample2d expects (C, H, W), got {m.shape}")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"coords must be (K, 2), got {coords.shape}")
    c, h, w = m.shape
    r = coords[:, 0]
    q = coords[:, 1]
    valid = np.isfinite(r) & np.isfinite(q) & (r >= 0) & (r <= h - 1) & (q >= 0) & (q <= w - 1)
    r = np.where(valid, r, 0.0)
    q = np.where(valid, q, 0.0)
    r0 = np.minimum(np.floor(r), h - 2 if h > 1 else 0).astype(np.int64)
    q0 = np.minimum(np.floor(q), w - 2 if w > 1 else 0).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    q1 = np.minimum(q0 + 1, w - 1)
    fr = (r - r0).astype(m.dtype)
    fq = (q - q0).astype(m.dtype)
    vmask = valid.astype(m.dtype)
    w00 = (1 - fr) * (1 - fq) * vmask
    w01 = (1 - fr) * fq * vmask
    w10 = fr * (1 - fq) * vmask
    w11 = fr * fq * vmask
    flat = m.data.reshape(c, h * w)
    i00 = r0 * w + q0
    i01 = r0 * w + q1
    i10 = r1 * w + q0
    i11 = r1 * w + q1
    out = (
        flat[:, i00] * w00
        + flat[:, i01] * w01
        + flat[:, i10] * w10
        + flat[:, i11] * w11
    ).T

    def back(g):
        gm = np.zeros((h * w, c), dtype=m.dtype)
        np.add.at(gm, i00, g * w00[:, None])
        np.add.at(gm, i01, g * w01[:, None])
        np.add.at(gm, i10, g * w10[:, None])
        np.add.at(gm, i11, g * w11[:, None])
        return (gm.T.reshape(c, h, w),)

    return _make(np.ascontiguousarray(out), "bilinear_sample2d", (m,), back), valid


def trilinear_sample3d(vol, coords):
    """Trilinearly sample ``vol`` of shape (C, D0, D1, D2) at ``coords`` (K, 3).

    Coordinates are continuous cell indices along the three trailing axes.
    Returns ``(samples, valid)`` with ``samples`` a (K, C) tensor; rows
    outside the grid are exactly zero and flagged invalid.
    """
    vol = _wrap(vol)
    coords = np.asarray(coords, dtype=np.float64)
    if vol.ndim != 4:
        raise ValueError(f"trilinear_sample3d expects (C, D0, D1, D2), got {vol.shape}")
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"coords must be (K, 3), got {coords.shape}")
    c = vol.shape[0]
    dims = vol.shape[1:]
    valid = np.all(np.isfinite(coords), axis=1)
    for ax in range(3):
        valid &= (coords[:, ax] >= 0) & (coords[:, ax] <= dims[ax] - 1)
    pts = np.where(valid[:, None], coords, 0.0)
    i0 = []
    i1 = []
    fr = []
    for ax in range(3):
        lo = np.minimum(np.floor(pts[:, ax]), dims[ax] - 2 if dims[ax] > 1 else 0).astype(np.int64)
        i0.append(lo)
        i1.append(np.minimum(lo + 1, dims[ax] - 1))
        fr.append((pts[:, ax] - lo).astype(vol.dtype))
    vmask = valid.astype(vol.dtype)
    flat = vol.data.reshape(c, -1)
    s12 = dims[1] * dims[2]
    out = np.zeros((coords.shape[0], c), dtype=vol.dtype)
    corner_idx = []
    corner_w = []
    for b0 in (0, 1):
        for b1 in (0, 1):
            for b2 in (0, 1):
                idx = (
                    (i1[0] if b0 else i0[0]) * s12
                    + (i1[1] if b1 else i0[1]) * dims[2]
                    + (i1[2] if b2 else i0[2])
                )
                wgt = (
                    (fr[0] if b0 else 1 - fr[0])
                    * (fr[1] if b1 else 1 - fr[1])
                    * (fr[2] if b2 else 1 - fr[2])
                    * vmask
                )
                corner_idx.append(idx)
                corner_w.append(wgt)
                out += flat[:, idx].T * wgt[:, None]

    def back(g):
        gv = np.zeros((int(np.prod(dims)), c), dtype=vol.dtype)
        for idx, wgt in zip(corner_idx, corner_w):
            np.add.at(gv, idx, g * wgt[:, None])
        return (gv.T.reshape(vol.shape),)

    return _make(out, "trilinear_sample3d", (vol,), back), valid


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def finite_difference_grad(f, arrays, index, h_scale=1e-4):
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. one input.

    The step for each coordinate is ``h_scale * max(1, |x|)``. Arrays are
    evaluated in float64 regardless of input dtype.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    x = arrays[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = h_scale * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = float(f(*arrays))
        flat[i] = orig - h
        fm = float(f(*arrays))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(f, arrays, rtol=1e-4, h_scale=1e-4):
    """Compare analytic and finite-difference gradients of ``f``.

    ``f`` maps Tensors (one per input array) to a scalar Tensor. Returns
    the largest elementwise relative error, where the denominator is
    ``max(1, |fd|, |analytic|)``.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = f(*tensors)
    backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)

        def scalar_f(*arrs):
            with no_grad():
                return f(*[Tensor(a) for a in arrs]).item()

        fd = finite_difference_grad(scalar_f, [t.data for t in tensors], i, h_scale=h_scale)
        denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(analytic)))
        err = float(np.max(np.abs(fd - analytic) / denom)) if fd.size else 0.0
        worst = max(worst, err)
        if worst > rtol:
            raise AssertionError(
                f"gradient check failed on input {i}: max relative error {worst:.3e} > {rtol:.1e}"
            )
    return worst


def directional_derivative(f, arrays, index, direction, h=1e-4):
    """Central-difference derivative of ``f`` along ``direction`` in one input."""
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    d = np.asarray(direction, dtype=np.float64)
    x = arrays[index]
    arrays[index] = x + h * d
    fp = float(f(*arrays))
    arrays[index] = x - h * d
    fm = float(f(*arrays))
    return (fp - fm) / (2.0 * h)


def assert_allclose_rel(actual, expected, rtol, label=""):
    """Assert max elementwise relative error (denominator >= 1) within rtol."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(actual), np.abs(expected)))
    err = float(np.max(np.abs(actual - expected) / denom)) if actual.size else 0.0
    if err > rtol:
        raise AssertionError(f"{label or 'comparison'}: max relative error {err:.3e} > {rtol:.1e}")
    return err


def l2_norm(x):
    return math.sqrt(float(np.sum(np.asarray(x, dtype=np.float64) ** 2)))
