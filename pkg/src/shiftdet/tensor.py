"""Reverse-mode automatic differentiation over numpy arrays.

The computation graph is implicit and rebuilt on every forward pass
(define-by-run): each operation returns a new Tensor that references its
parent tensors and a closure routing the output gradient to them.
``Tensor.backward()`` walks the graph once in reverse topological order,
accumulating gradients additively across fan-out.

Broadcasting is deliberately restricted to keep the engine auditable:
two operands must have identical shapes, or the smaller operand's shape
must equal a trailing suffix of the larger's (leading-batch broadcast),
or be a scalar. Anything else raises; use explicit reshape.

Training runs in float32; gradient checks build float64 graphs. Binary
ops require matching float dtypes so a stray float64 constant cannot
silently promote a float32 graph.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import as_strided

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """N-dimensional float array participating in the autodiff graph.

    Attributes:
        data: numpy array (float32 or float64), row-major.
        grad: same-shape numpy array after backward(), else None.
        requires_grad: whether backward() should deposit a gradient here.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bw = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self):
        """Leaf tensor sharing this tensor's values, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    # -- backward ------------------------------------------------------------

    def backward(self):
        """Populate .grad on every reachable requires_grad tensor.

        The loss must be scalar (shape ()). Gradients accumulate
        additively when a tensor fans out into several consumers.
        """
        if self.data.shape != ():
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.asarray(1.0, dtype=self.data.dtype)
        for node in reversed(order):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    def _accum(self, g, own=False):
        # own=True promises g is freshly allocated, unaliased and writable,
        # so the first accumulation may take the buffer without copying.
        # Pass-through gradients (views, shared or broadcast buffers) must
        # use own=False or later in-place accumulation would corrupt them.
        if self.grad is None:
            if own:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- method forms ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _toposort(root):
    """Deterministic iterative post-order over the parent DAG."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- construction helpers ------------------------------------------------------


def _node(data, parents, bw):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = True
    out._parents = parents
    out._bw = bw
    return out


def _leaf(data):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._bw = None
    return out


def _coerce(x, dtype):
    """Wrap scalars/arrays as constant tensors of the given dtype."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype not in _FLOAT_DTYPES or arr.shape == ():
        arr = arr.astype(dtype)
    return _leaf(arr)


def _check_dtypes(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise TypeError(
            f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}; cast explicitly"
        )


def _check_broadcast(sa, sb, op):
    """Permit identical shapes, scalars, or trailing-suffix (leading-batch)."""
    if sa == sb or sa == () or sb == ():
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ValueError(
            f"{op}: shapes {sa} and {sb} do not match; only leading-batch "
            "broadcast is supported (reshape explicitly)"
        )


def _unbroadcast(g, shape):
    """Sum gradient over leading axes introduced by broadcast."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def _accum_unb(t, g):
    """Accumulate a pass-through gradient, unbroadcasting if needed."""
    if g.shape == t.data.shape:
        t._accum(g)
    else:
        t._accum(_unbroadcast(g, t.data.shape), own=True)


def _accum_unb_owned(t, g_fresh):
    """Accumulate a freshly allocated gradient, unbroadcasting if needed."""
    t._accum(_unbroadcast(g_fresh, t.data.shape), own=True)


# -- elementwise binary ops ------------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_dtypes(a, b, "add")
    _check_broadcast(a.shape, b.shape, "add")
    data = a.data + b.data
    if not (_grad_enabled and (a.requires_grad or b.requires_grad)):
        return _leaf(data)

    def bw(g):
        if a.requires_grad:
            _accum_unb(a, g)
        if b.requires_grad:
            _accum_unb(b, g)

    return _node(data, (a, b), bw)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_dtypes(a, b, "sub")
    _check_broadcast(a.shape, b.shape, "sub")
    data = a.data - b.data
    if not (_grad_enabled and (a.requires_grad or b.requires_grad)):
        return _leaf(data)

    def bw(g):
        if a.requires_grad:
            _accum_unb(a, g)
        if b.requires_grad:
            _accum_unb_owned(b, -g)

    return _node(data, (a, b), bw)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_dtypes(a, b, "mul")
    _check_broadcast(a.shape, b.shape, "mul")
    data = a.data * b.data
    if not (_grad_enabled and (a.requires_grad or b.requires_grad)):
        return _leaf(data)

    def bw(g):
        if a.requires_grad:
            _accum_unb_owned(a, g * b.data)
        if b.requires_grad:
            _accum_unb_owned(b, g * a.data)

    return _node(data, (a, b), bw)


def div(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_dtypes(a, b, "div")
    _check_broadcast(a.shape, b.shape, "div")
    data = a.data / b.data
    if not (_grad_enabled and (a.requires_grad or b.requires_grad)):
        return _leaf(data)

    def bw(g):
        if a.requires_grad:
            _accum_unb_owned(a, g / b.data)
        if b.requires_grad:
            _accum_unb_owned(b, -g * a.data / (b.data * b.data))

    return _node(data, (a, b), bw)


def neg(a):
    data = -a.data
    if not (_grad_enabled and a.requires_grad):
        return _leaf(data)

    def bw(g):
        a._accum(-g, own=True)

    return _node(data, (a,), bw)


def power(a, exponent):
    """Elementwise power with a python-scalar exponent."""
    if not isinstance(exponent, (int, float)):
        raise TypeError("power: exponent must be a python scalar")
    data = a.data ** exponent
    if not (_grad_enabled and a.requires_grad):
        return _leaf(data)

    def bw(g):
        a._accum(g * (exponent * a.data ** (exponent - 1)), own=True)

    return _node(data, (a,), bw)


# -- elementwise unary ops ---------------------------------------------------------


def texp(a):
    data = np.exp(a.data)
    if not (_grad_enabled and a.requires_grad):
        return _leaf(data)

    def bw(g):
        a._accum(g * data, own=True)

    return _node(data, (a,), bw)


def tlog(a):
    data = np.log(a.data)
    if not (_grad_enabled and a.requires_grad):
        return _leaf(data)

    def bw(g):
        a._accum(g / a.data, own=True)

    return _node(data, (a,), bw)


def relu(a):
    data = np.maximum(a.data, 0)
    if not (_grad_enabled and a.requires_grad):
        return _leaf(data)

    def bw(g):
        a._accum(g * (a.data > 0), own=True)

    return _node(data, (a,), bw)


def sigmoid(a):
    # Stable: never exponentiate a positive argument.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if not (_grad_enabled and a.requires_grad):
        return _leaf(out)

    def bw(g):
        a._accum(g * out * (1.0 - out), own=True)

    return _node(out, (a,), bw)


def tabs(a):
    data = np.abs(a.data)
    if not (_grad_enabled and a.requires_grad):
        return _leaf(data)

    def bw(g):
        a._accum(g * np.sign(a.data), own=True)

    return _node(data, (a,), bw)


def tmaximum(a, b):
    """Elementwise max; on ties the gradient goes to the first operand."""
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_dtypes(a, b, "maximum")
    _check_broadcast(a.shape, b.shape, "maximum")
    data = np.maximum(a.data, b.data)
    if not (_grad_enabled and (a.requires_grad or b.requires_grad)):
        return _leaf(data)
    a_wins = a.data >= b.data

    def bw(g):
        if a.requires_grad:
            _accum_unb_owned(a, g * a_wins)
        if b.requires_grad:
            _accum_unb_owned(b, g * ~a_wins)

    return _node(data, (a, b), bw)


def tminimum(a, b):
    """Elementwise min; on ties the gradient goes to the first operand."""
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_dtypes(a, b, "minimum")
    _check_broadcast(a.shape, b.shape, "minimum")
    data = np.minimum(a.data, b.data)
    if not (_grad_enabled and (a.requires_grad or b.requires_grad)):
        return _leaf(data)
    a_wins = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            _accum_unb_owned(a, g * a_wins)
        if b.requires_grad:
            _accum_unb_owned(b, g * ~a_wins)

    return _node(data, (a, b), bw)


def clamp(a, lo, hi):
    """Clip values to [lo, hi]; gradient passes only through the interior."""
    data = np.clip(a.data, lo, hi)
    if not (_grad_enabled and a.requires_grad):
        return _leaf(data)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        a._accum(g * inside, own=True)

    return _node(data, (a,), bw)


# -- reductions ----------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not (_grad_enabled and a.requires_grad):
        return _leaf(data)

    def bw(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape))
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gk, a.data.shape))

    return _node(data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if not (_grad_enabled and a.requires_grad):
        return _leaf(data)

    def bw(g):
        scale = np.asarray(1.0 / count, dtype=a.data.dtype)
        if axis is None:
            a._accum(np.broadcast_to(g * scale, a.data.shape))
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gk * scale, a.data.shape))

    return _node(data, (a,), bw)


# -- shape ops --------------------------------------------------------------------------


def reshape(a, shape):
    data = a.data.reshape(shape)
    if not (_grad_enabled and a.requires_grad):
        return _leaf(data)

    def bw(g):
        a._accum(g.reshape(a.data.shape))

    return _node(data, (a,), bw)


def transpose(a, axes):
    axes = tuple(axes)
    data = a.data.transpose(axes)
    if not (_grad_enabled and a.requires_grad):
        return _leaf(data)
    inv = tuple(np.argsort(axes))

    def bw(g):
        a._accum(g.transpose(inv))

    return _node(data, (a,), bw)


def take(a, idx):
    """Indexing/slicing; supports slices and integer-array gathers."""
    data = a.data[idx]
    if not (_grad_enabled and a.requires_grad):
        return _leaf(np.ascontiguousarray(data))

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accum(buf, own=True)

    return _node(np.ascontiguousarray(data), (a,), bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not (_grad_enabled and any(t.requires_grad for t in tensors)):
        return _leaf(data)
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        pieces = np.split(g, sizes, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accum(piece)

    return _node(data, tuple(tensors), bw)


def tile_leading(a, n):
    """Repeat a tensor along a new leading axis: shape S -> (n, *S)."""
    data = np.broadcast_to(a.data, (n,) + a.data.shape).copy()
    if not (_grad_enabled and a.requires_grad):
        return _leaf(data)

    def bw(g):
        a._accum(g.sum(axis=0), own=True)

    return _node(data, (a,), bw)


# -- matmul ------------------------------------------------------------------------------


def _swap_last(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    """numpy-semantics matmul for operands with ndim >= 2.

    Batch dimensions broadcast per numpy; the backward pass sums the
    gradient over any broadcast leading axes.
    """
    if not isinstance(b, Tensor):
        b = _coerce(b, a.dtype)
    if not isinstance(a, Tensor):
        a = _coerce(a, b.dtype)
    _check_dtypes(a, b, "matmul")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires ndim >= 2 operands; reshape vectors")
    data = a.data @ b.data
    if not (_grad_enabled and (a.requires_grad or b.requires_grad)):
        return _leaf(data)

    def bw(g):
        if a.requires_grad:
            _accum_unb_owned(a, g @ _swap_last(b.data))
        if b.requires_grad:
            _accum_unb_owned(b, _swap_last(a.data) @ g)

    return _node(data, (a, b), bw)


def linear(x, w, b):
    """Fused affine map on the last axis: x [..., Din] @ w [Din, Dout] + b.

    Leading axes are flattened internally so both forward and the weight
    gradient run as single 2-D GEMMs.
    """
    _check_dtypes(x, w, "linear")
    shape = x.data.shape
    dout = w.data.shape[1]
    x2 = x.data.reshape(-1, shape[-1])
    out2 = x2 @ w.data
    out2 += b.data
    data = out2.reshape(shape[:-1] + (dout,))
    if not (_grad_enabled and (x.requires_grad or w.requires_grad or b.requires_grad)):
        return _leaf(data)

    def bw(g):
        g2 = g.reshape(-1, dout)
        if x.requires_grad:
            x._accum((g2 @ w.data.T).reshape(shape), own=True)
        if w.requires_grad:
            w._accum(x2.T @ g2, own=True)
        if b.requires_grad:
            b._accum(g2.sum(axis=0), own=True)

    return _node(data, (x, w, b), bw)


# -- fused softmax family ----------------------------------------------------------------


def softmax(a, axis=-1):
    """Shift-stabilized softmax along `axis`."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    if not (_grad_enabled and a.requires_grad):
        return _leaf(p)

    def bw(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        a._accum(p * (g - inner), own=True)

    return _node(p, (a,), bw)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    if not (_grad_enabled and a.requires_grad):
        return _leaf(out)
    p = np.exp(out)

    def bw(g):
        a._accum(g - p * g.sum(axis=axis, keepdims=True), own=True)

    return _node(out, (a,), bw)


# -- layer norm (fused) ---------------------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    _check_dtypes(x, gamma, "layer_norm")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    if not (_grad_enabled and (x.requires_grad or gamma.requires_grad or beta.requires_grad)):
        return _leaf(data)

    def bw(g):
        if gamma.requires_grad:
            axes = tuple(range(g.ndim - 1))
            gamma._accum((g * xhat).sum(axis=axes), own=True)
        if beta.requires_grad:
            axes = tuple(range(g.ndim - 1))
            beta._accum(g.sum(axis=axes), own=True)
        if x.requires_grad:
            gy = g * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x._accum(inv * (gy - m1 - xhat * m2), own=True)

    return _node(data, (x, gamma, beta), bw)


# -- convolution (fused, im2col) ---------------------------------------------------------------


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution (cross-correlation) over NCHW input.

    x: [N, C, H, W]; w: [O, C, kh, kw]; b: [O] or None.
    Output spatial size: floor((H + 2*padding - kh)/stride) + 1.
    """
    N, C, H, W = x.data.shape
    O, Ci, kh, kw = w.data.shape
    if C != Ci:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {Ci}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ValueError("conv2d: kernel larger than padded input")
    _check_dtypes(x, w, "conv2d")
    s, p = int(stride), int(padding)
    if p:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    else:
        xp = x.data
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    sN, sC, sH, sW = xp.strides
    view = as_strided(
        xp,
        shape=(N, C, Ho, Wo, kh, kw),
        strides=(sN, sC, sH * s, sW * s, sH, sW),
    )
    # [N, Ho*Wo, C*kh*kw]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(N, Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = cols @ wmat.T
    if b is not None:
        _check_dtypes(x, b, "conv2d")
        out = out + b.data
    data = out.transpose(0, 2, 1).reshape(N, O, Ho, Wo)

    needs = _grad_enabled and (
        x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    )
    if not needs:
        return _leaf(data)

    def bw(g):
        gmat = g.reshape(N, O, Ho * Wo).transpose(0, 2, 1)  # [N, HoWo, O]
        if b is not None and b.requires_grad:
            b._accum(gmat.sum(axis=(0, 1)), own=True)
        if w.requires_grad:
            gw = np.ascontiguousarray(gmat).reshape(-1, O).T @ cols.reshape(-1, C * kh * kw)
            w._accum(gw.reshape(w.data.shape), own=True)
        if x.requires_grad:
            gcols = gmat @ wmat  # [N, HoWo, C*kh*kw]
            gview = gcols.reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += gview[:, :, i, j]
            x._accum(gxp[:, :, p : p + H, p : p + W] if p else gxp, own=True)

    parents = (x, w) if b is None else (x, w, b)
    return _node(data, parents, bw)


# -- gradient reversal ----------------------------------------------------------------------------


def grad_reverse(x, coeff=1.0):
    """Identity forward; backward multiplies the upstream gradient by -coeff."""
    if coeff < 0:
        raise ValueError("grad_reverse: coefficient must be non-negative")
    if not (_grad_enabled and x.requires_grad):
        return _leaf(x.data)
    scale = float(coeff)

    def bw(g):
        x._accum(g * np.asarray(-scale, dtype=x.data.dtype), own=True)

    return _node(x.data, (x,), bw)
