"""Minimal reverse-mode differentiable tensor engine.

NumPy-backed tape autodiff covering exactly the primitives the networks
here need: elementwise arithmetic, matmul, reshaping, convolution,
depth-to-space, group normalization, GeLU, softmax and a composed
self-attention block.  Images and activations use NHWC layout, kernels
KhKwCinCout.  f32 is the training dtype; build the same graph from f64
arrays for verification work.

Tensors are immutable values once created.  Gradients accumulate into the
optional ``grad`` field during :meth:`Tensor.backward`, in the fixed
reverse-topological order of graph construction, so repeated runs of a
single-threaded step are bit-identical.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference / finite-difference evals)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _assert_finite(arr: np.ndarray, what: str) -> None:
    # one reduction pass: NaN propagates and Inf survives summation
    # (values are O(1) here, so no spurious overflow to Inf)
    if arr.size and not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values in {what}")


def _pad4(arr: np.ndarray, pt: int, pb: int, pl: int, pr: int) -> np.ndarray:
    """Zero-pad the two spatial axes of an NHWC array."""
    n, h, w, c = arr.shape
    out = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=arr.dtype)
    out[:, pt:pt + h, pl:pl + w, :] = arr
    return out


class Tensor:
    """Dense array plus optional gradient accumulator and tape hooks."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.ndarray):
            arr = data
            if dtype is not None:
                arr = arr.astype(dtype, copy=False)
            elif arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        else:
            # python scalars / lists default to the training dtype
            arr = np.asarray(data, dtype=dtype or np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # ------------------------------------------------------------------
    def backward(self, free_graph: bool = True) -> None:
        """Reverse-accumulate gradients from this scalar root."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar root")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            node_grad = node.grad
            grads = node._backward(node_grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # take ownership of fresh arrays; copy anything that
                    # aliases this node's gradient (views from reshape,
                    # split, broadcast or pass-through adds)
                    if g.dtype != parent.data.dtype:
                        parent.grad = g.astype(parent.data.dtype)
                    elif np.may_share_memory(g, node_grad):
                        parent.grad = g.copy()
                    else:
                        parent.grad = g
                else:
                    parent.grad += g
            if free_graph:
                node._parents = ()
                node._backward = None


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) and dtype is None else Tensor(x, dtype=dtype)


def _make(data, parents, backward) -> Tensor:
    """Wrap an op result, recording the tape only when it matters."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise / broadcast arithmetic
# ----------------------------------------------------------------------

def _is_pyscalar(x) -> bool:
    # python numbers stay weakly typed so f32 graphs are not upcast
    return not isinstance(x, Tensor) and np.isscalar(x)


def add(a, b) -> Tensor:
    if _is_pyscalar(b):
        a = as_tensor(a)
        return _make(a.data + float(b), (a,), lambda g: (g,))
    if _is_pyscalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    if _is_pyscalar(b):
        a = as_tensor(a)
        return _make(a.data - float(b), (a,), lambda g: (g,))
    if _is_pyscalar(a):
        b = as_tensor(b)
        return _make(float(a) - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    if _is_pyscalar(b):
        a = as_tensor(a)
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if _is_pyscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    if _is_pyscalar(b):
        return mul(a, 1.0 / float(b))
    if _is_pyscalar(a):
        b = as_tensor(b)
        c, bd = float(a), b.data
        return _make(c / bd, (b,), lambda g: (-g * c / (bd * bd),))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _make(out, (a, b), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.where(ad > 0, ad, slope * ad)

    def backward(g):
        return (g * np.where(ad > 0, 1.0, slope).astype(ad.dtype),)

    return _make(out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GeLU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = as_tensor(a)
    x = a.data
    u = x * x
    u *= x
    u *= 0.044715
    u += x
    u *= _GELU_C
    inner = np.tanh(u, out=u)
    out = inner + 1.0
    out *= x
    out *= 0.5

    def backward(g):
        d = 1.0 - inner * inner  # sech^2
        d *= _GELU_C * 0.5 * x * (1.0 + 0.134145 * (x * x))
        d += 0.5 * (1.0 + inner)
        return (g * d,)

    return _make(out, (a,), backward)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.clip(ad, lo, hi)

    def backward(g):
        return (g * ((ad > lo) & (ad < hi)),)

    return _make(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), backward)


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------

def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(out, ts, backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).astype(a.data.dtype, copy=False),)

    return _make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in ax]))
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    """np.matmul semantics for ndim >= 2 operands, with batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires ndim >= 2 on both operands")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data
    a_req, b_req = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape) if a_req else None
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), b.shape) if b_req else None
        return ga, gb

    return _make(out, (a, b), backward)


# ----------------------------------------------------------------------
# structured ops
# ----------------------------------------------------------------------

def _same_pad(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _im2col(arr: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N,H,W,C) -> (N*OH*OW, KH*KW*C) patch matrix (valid windows)."""
    win = sliding_window_view(arr, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, oh, ow = win.shape[:3]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, -1)


def conv2d(x, w, stride: int = 1, padding: str = "same", bias=None) -> Tensor:
    """2-D convolution(cross-correlation), NHWC input, KhKwCinCout kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/kernel, got {x.shape}, {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {wcin}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv2d padding must be 'same' or 'valid', got {padding!r}")
    b = as_tensor(bias) if bias is not None else None
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    _assert_finite(x.data, "conv2d input")

    if padding == "same":
        oh, pt, pb = _same_pad(h, kh, stride)
        ow, pl, pr = _same_pad(wd, kw, stride)
        xp = _pad4(x.data, pt, pb, pl, pr) if (pt | pb | pl | pr) else x.data
    else:
        if h < kh or wd < kw:
            raise ShapeError("conv2d valid padding: input smaller than kernel")
        oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
        pt = pl = 0
        xp = x.data

    hp, wp = xp.shape[1], xp.shape[2]
    patches = _im2col(xp, kh, kw, stride)
    w2d = w.data.reshape(kh * kw * cin, cout)
    out2d = patches @ w2d
    if b is not None:
        out2d += b.data
    out = out2d.reshape(n, oh, ow, cout)
    x_req, w_req = x.requires_grad, w.requires_grad

    def backward(g):
        g2d = g.reshape(n * oh * ow, cout)
        gw = (patches.T @ g2d).reshape(kh, kw, cin, cout) if w_req else None
        gb = g2d.sum(axis=0) if (b is not None and b.requires_grad) else None
        if not x_req:
            return (None, gw) if b is None else (None, gw, gb)
        if stride == 1 and oh * ow >= 100:
            # input gradient as one full correlation with the flipped kernel
            # (faster than scatter unless the edge overhead dominates)
            gpad = _pad4(g, kh - 1, kh - 1, kw - 1, kw - 1)
            gpatch = _im2col(gpad, kh, kw, 1)
            wt = np.ascontiguousarray(
                w.data[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(kh * kw * cout, cin)
            gxp = (gpatch @ wt).reshape(n, hp, wp, cin)
        else:
            gp = (g2d @ w2d.T).reshape(n, oh, ow, kh, kw, cin)
            gxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += gp[:, :, :, i, j, :]
        gx = gxp[:, pt:pt + h, pl:pl + wd, :] if xp is not x.data else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def space_to_depth(x, block: int) -> Tensor:
    """(N,H,W,C) -> (N,H/b,W/b,C*b^2); inverse of depth_to_space."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % block or w % block:
        raise ShapeError(f"space_to_depth: spatial dims {h}x{w} not divisible by {block}")
    out = (x.data.reshape(n, h // block, block, w // block, block, c)
           .transpose(0, 1, 3, 2, 4, 5)
           .reshape(n, h // block, w // block, c * block * block))

    def backward(g):
        gi = (g.reshape(n, h // block, w // block, block, block, c)
              .transpose(0, 1, 3, 2, 4, 5)
              .reshape(n, h, w, c))
        return (gi,)

    return _make(np.ascontiguousarray(out), (x,), backward)


def depth_to_space(x, block: int) -> Tensor:
    """(N,H,W,C) -> (N,H*b,W*b,C/b^2).

    Pixel order: out[n, h*b+bh, w*b+bw, c] = in[n, h, w, (bh*b+bw)*C' + c]
    with C' = C / b^2, the inverse of :func:`space_to_depth`.
    """
    x = as_tensor(x)
    n, h, w, c = x.shape
    if c % (block * block):
        raise ShapeError(f"depth_to_space: channels {c} not divisible by {block}^2")
    cp = c // (block * block)
    out = (x.data.reshape(n, h, w, block, block, cp)
           .transpose(0, 1, 3, 2, 4, 5)
           .reshape(n, h * block, w * block, cp))

    def backward(g):
        gi = (g.reshape(n, h, block, w, block, cp)
              .transpose(0, 1, 3, 2, 4, 5)
              .reshape(n, h, w, c))
        return (gi,)

    return _make(np.ascontiguousarray(out), (x,), backward)


def group_norm(x, groups: int, eps: float, gain, bias) -> Tensor:
    """Normalize to zero mean / unit variance per (sample, group), then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ValueError("group_norm eps must be positive")
    n, h, w, c = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: channels {c} not divisible by {groups} groups")
    cg = c // groups
    m = h * w * cg
    xg = x.data.reshape(n, h * w, groups, cg)
    # one-pass moments; var clamped at 0 against f32 cancellation
    mu = xg.sum(axis=(1, 3), keepdims=True)
    mu *= 1.0 / m
    var = (xg * xg).sum(axis=(1, 3), keepdims=True)
    var *= 1.0 / m
    var -= mu * mu
    np.maximum(var, 0.0, out=var)
    var += eps
    istd = 1.0 / np.sqrt(var)
    xhat = (xg - mu) * istd
    xhat4 = xhat.reshape(n, h, w, c)
    out = xhat4 * gain.data + bias.data
    affine_req = gain.requires_grad or bias.requires_grad

    def backward(g):
        if affine_req:
            dgain = (g * xhat4).sum(axis=(0, 1, 2))
            dbias = g.sum(axis=(0, 1, 2))
        else:
            dgain = dbias = None
        dxh = (g * gain.data).reshape(n, h * w, groups, cg)
        m1 = dxh.sum(axis=(1, 3), keepdims=True)
        m1 *= 1.0 / m
        m2 = (dxh * xhat).sum(axis=(1, 3), keepdims=True)
        m2 *= 1.0 / m
        dx = (istd * (dxh - m1 - xhat * m2)).reshape(n, h, w, c)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), backward)


def self_attention(x, heads: int, params: dict, return_weights: bool = False):
    """Softmax attention over the HxW token grid plus residual add.

    ``params`` holds projection matrices ``wq``, ``wk``, ``wv``, ``wo``
    (each C x C).  No positional term: the op is equivariant to spatial
    permutations of the tokens.
    """
    x = as_tensor(x)
    n, h, w, c = x.shape
    if c % heads:
        raise ShapeError(f"self_attention: channels {c} not divisible by {heads} heads")
    dh = c // heads
    tok = reshape(x, (n, h * w, c))

    def split_heads(t):
        return reshape(transpose(reshape(t, (n, h * w, heads, dh)), (0, 2, 1, 3)),
                       (n * heads, h * w, dh))

    q = split_heads(matmul(tok, params["wq"]))
    k = split_heads(matmul(tok, params["wk"]))
    v = split_heads(matmul(tok, params["wv"]))
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    att = matmul(weights, v)
    merged = reshape(transpose(reshape(att, (n, heads, h * w, dh)), (0, 2, 1, 3)),
                     (n, h * w, c))
    out = add(x, reshape(matmul(merged, params["wo"]), (n, h, w, c)))
    if return_weights:
        return out, weights.data
    return out


def stop_gradient(a) -> Tensor:
    return as_tensor(a).detach()
