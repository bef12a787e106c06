"""Reverse-mode autodiff over numpy arrays, sized for a desk-scale model.

Working precision is float32; the finite-difference checker promotes to
float64 so discretization noise stays below logic errors. Only
scalar-to-tensor broadcasting is allowed: anything else is a shape error,
which keeps every gradient rule auditable.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """Dense nd-array node on a dynamic backward tape.

    The tape is the implicit graph of ``_parents`` / ``_backward`` links built
    during the forward pass; ``backward()`` on a scalar root accumulates
    gradients into ``.grad`` of every reachable tensor with
    ``requires_grad=True`` and releases the graph as it goes. A tensor whose
    inputs do not require gradients records nothing, so inference-style code
    pays no tape overhead.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return stop_gradient(self)

    def numpy(self):
        return self.data

    def backward(self):
        """Reverse sweep from a scalar root; frees the tape afterwards."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar root, got shape {self.data.shape}"
            )
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            fn = node._backward
            if fn is not None and node.grad is not None:
                for parent, g in zip(node._parents, fn(node.grad)):
                    if g is None or not parent.requires_grad:
                        continue
                    if parent.grad is None:
                        parent.grad = g
                    else:
                        parent.grad = parent.grad + g
            node._parents = ()
            node._backward = None

    # Operator sugar; named functions below are the real surface.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def _node(data, parents, backward):
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _const_like(value, ref):
    return Tensor(np.asarray(value, dtype=ref.data.dtype))


def _binary_operands(a, b):
    """Resolve shapes for an elementwise op: equal shapes or scalar broadcast."""
    if not isinstance(a, Tensor):
        a = _const_like(a, b)
    if not isinstance(b, Tensor):
        b = _const_like(b, a)
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return a, b
    raise ShapeError(
        f"elementwise op needs equal shapes or a scalar, got {a.data.shape} and {b.data.shape}"
    )


def _reduce_to(grad, shape):
    """Collapse a broadcast gradient back to a scalar operand's shape."""
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape)


def add(a, b):
    a, b = _binary_operands(a, b)
    data = a.data + b.data

    def backward(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _node(data, (a, b), backward)


def sub(a, b):
    a, b = _binary_operands(a, b)
    data = a.data - b.data

    def backward(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _node(data, (a, b), backward)


def mul(a, b):
    a, b = _binary_operands(a, b)
    data = a.data * b.data

    def backward(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return _node(data, (a, b), backward)


def div(a, b):
    a, b = _binary_operands(a, b)
    data = a.data / b.data

    def backward(g):
        ga = _reduce_to(g / b.data, a.data.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _node(data, (a, b), backward)


def scale(x, s):
    """Multiply by a python-number constant."""
    s = float(s)
    data = x.data * np.asarray(s, dtype=x.data.dtype)

    def backward(g):
        return (g * np.asarray(s, dtype=g.dtype),)

    return _node(data, (x,), backward)


def one_minus(x):
    data = np.asarray(1.0, dtype=x.data.dtype) - x.data

    def backward(g):
        return (-g,)

    return _node(data, (x,), backward)


def sigmoid(x):
    # Split by sign to avoid exp overflow on large-magnitude inputs.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), backward)


def relu(x):
    data = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _node(data, (x,), backward)


def exp(x):
    data = np.exp(x.data)

    def backward(g):
        return (g * data,)

    return _node(data, (x,), backward)


def log(x):
    bad = np.flatnonzero(x.data <= 0)
    if bad.size:
        raise ValueError(f"log needs strictly positive input, entry {int(bad[0])} is {x.data.reshape(-1)[bad[0]]}")
    data = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _node(data, (x,), backward)


def clamp(x, min=None, max=None):
    """Clip values; gradient passes only where the input was inside the range."""
    data = np.clip(x.data, min, max)
    inside = np.ones_like(x.data, dtype=bool)
    if min is not None:
        inside &= x.data >= min
    if max is not None:
        inside &= x.data <= max

    def backward(g):
        return (g * inside,)

    return _node(data, (x,), backward)


def stop_gradient(x):
    """Identity forward, zero backward: no tape edge is recorded."""
    return Tensor(x.data, dtype=x.data.dtype)


def tsum(x):
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _node(data, (x,), backward)


def tmean(x):
    n = x.data.size
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def backward(g):
        return (np.broadcast_to(g / n, x.data.shape).copy(),)

    return _node(data, (x,), backward)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul needs (m,k)x(k,n), got {a.data.shape} and {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), backward)


def transpose(x):
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.data.shape}")
    data = x.data.T.copy()

    def backward(g):
        return (g.T.copy(),)

    return _node(data, (x,), backward)


def add_row_bias(x, b):
    """Add a length-C bias vector to every row of a (T, C) matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_row_bias needs (T,C)+(C,), got {x.data.shape} and {b.data.shape}")
    data = x.data + b.data

    def backward(g):
        return g, g.sum(axis=0)

    return _node(data, (x, b), backward)


def softmax(x, temperature=1.0, axis=-1):
    """Temperature softmax along ``axis``, stabilized by max subtraction."""
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be > 0, got {temperature}")
    t = np.asarray(temperature, dtype=x.data.dtype)
    z = x.data / t
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / t,)

    return _node(out, (x,), backward)


def flatten(x):
    return reshape(x, (x.data.size,))


def reshape(x, shape):
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _node(data, (x,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _node(data, tuple(tensors), backward)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis; backward zero-pads."""
    if start < 0 or start + length > x.data.shape[axis]:
        raise IndexError(
            f"narrow [{start}:{start + length}) out of range for axis {axis} of shape {x.data.shape}"
        )
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = x.data[index].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _node(data, (x,), backward)


def gather_rows(x, indices):
    """Select rows (or elements of a vector) by index; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(f"gather_rows index out of range for first dim {x.data.shape[0]}")
    data = x.data[idx].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(data, (x,), backward)


def one_hot(index, n, dtype=np.float32):
    """Constant one-hot (int index) or multi-hot (iterable of indices) vector."""
    out = np.zeros(n, dtype=dtype)
    if np.isscalar(index) or isinstance(index, (int, np.integer)):
        index = [index]
    for i in index:
        if not 0 <= int(i) < n:
            raise IndexError(f"one_hot index {i} out of range for length {n}")
        out[int(i)] = 1.0
    return Tensor(out, dtype=dtype)


def argmax(x):
    return int(np.argmax(x.data))


def top_k_indices(x, k):
    """Indices of the k largest entries, descending, ties broken by position."""
    flat = x.data.reshape(-1)
    if not 0 <= k <= flat.size:
        raise IndexError(f"top_k_indices k={k} out of range for size {flat.size}")
    order = np.argsort(-flat, kind="stable")
    return [int(i) for i in order[:k]]


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlate (c_in,h,w) with (c_out,c_in,kh,kw) via im2col."""
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape}, kernel {kernel.data.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d kernel {kernel.data.shape} larger than padded input ({cin},{hp},{wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (cin, ho, wo, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2)).reshape(
        cin * kh * kw, ho * wo
    )
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = (kmat @ cols).reshape(cout, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gmat = g.reshape(cout, ho * wo)
        gk = (gmat @ cols.T).reshape(kernel.data.shape)
        gcols = (kmat.T @ gmat).reshape(cin, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += (
                    gcols[:, di, dj]
                )
        gx = gxp[:, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(1, 2))

    return _node(out, parents, backward)


def conv_transpose2d(x, kernel, bias=None, stride=2):
    """Transposed conv restricted to kernel == stride (non-overlapping upsample).

    kernel layout is (c_in, c_out, k, k); output is (c_out, h*k, w*k).
    """
    cin, h, w = x.data.shape
    kcin, cout, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input {x.data.shape}, kernel {kernel.data.shape}"
        )
    if kh != stride or kw != stride:
        raise ValueError(f"conv_transpose2d supports kernel == stride only, got k={kh}, stride={stride}")
    xt = x.data.reshape(cin, h * w).T  # (hw, cin)
    kmat = kernel.data.reshape(cin, cout * kh * kw)
    prod = xt @ kmat  # (hw, cout*k*k)
    out = (
        prod.reshape(h, w, cout, kh, kw)
        .transpose(2, 0, 3, 1, 4)
        .reshape(cout, h * kh, w * kw)
        .copy()
    )
    if bias is not None:
        out = out + bias.data[:, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gprod = (
            g.reshape(cout, h, kh, w, kw).transpose(1, 3, 0, 2, 4).reshape(h * w, cout * kh * kw)
        )
        gx = (gprod @ kmat.T).T.reshape(cin, h, w)
        gk = (xt.T @ gprod).reshape(kernel.data.shape)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(1, 2))

    return _node(out, parents, backward)


_BILINEAR_CACHE = {}


def _bilinear_plan(h, w, factor):
    key = (h, w, factor)
    plan = _BILINEAR_CACHE.get(key)
    if plan is None:
        ho, wo = h * factor, w * factor

        def axis_plan(n_in, n_out):
            pos = (np.arange(n_out) + 0.5) / factor - 0.5
            lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
            hi = np.clip(lo + 1, 0, n_in - 1)
            frac = np.clip(pos - np.floor(pos), 0.0, 1.0)
            frac[pos < 0] = 0.0
            frac[pos > n_in - 1] = 0.0
            return lo, hi, frac

        y0, y1, fy = axis_plan(h, ho)
        x0, x1, fx = axis_plan(w, wo)
        plan = (y0, y1, fy, x0, x1, fx)
        _BILINEAR_CACHE[key] = plan
    return plan


def bilinear_upsample(x, factor):
    """Bilinear upsampling of an (h, w) map by an integer factor (half-pixel centers)."""
    if x.data.ndim != 2:
        raise ShapeError(f"bilinear_upsample expects (h, w), got {x.data.shape}")
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"bilinear_upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    h, w = x.data.shape
    y0, y1, fy, x0, x1, fx = _bilinear_plan(h, w, factor)
    d = x.data
    wy = fy[:, None].astype(d.dtype)
    wx = fx[None, :].astype(d.dtype)
    out = (
        d[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + d[np.ix_(y1, x0)] * wy * (1 - wx)
        + d[np.ix_(y0, x1)] * (1 - wy) * wx
        + d[np.ix_(y1, x1)] * wy * wx
    )

    def backward(g):
        gx = np.zeros_like(d)
        np.add.at(gx, np.ix_(y0, x0), g * (1 - wy) * (1 - wx))
        np.add.at(gx, np.ix_(y1, x0), g * wy * (1 - wx))
        np.add.at(gx, np.ix_(y0, x1), g * (1 - wy) * wx)
        np.add.at(gx, np.ix_(y1, x1), g * wy * wx)
        return (gx,)

    return _node(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Row-wise layer normalization of a (T, C) matrix with affine parameters."""
    if x.data.ndim != 2 or gamma.data.shape != (x.data.shape[1],) or beta.data.shape != (x.data.shape[1],):
        raise ShapeError(
            f"layer_norm needs (T,C) with (C,) affine, got {x.data.shape}, {gamma.data.shape}, {beta.data.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        c = x.data.shape[1]
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(out, (x, gamma, beta), backward)


def grad_check(f, x, eps=1e-4, max_coords=None, rng=None):
    """Max relative error between the tape gradient of f and central differences.

    Runs in float64 regardless of x's dtype. ``f`` must be a pure scalar
    function of one tensor (fix any randomness inside it). When ``max_coords``
    is given, a random subset of coordinates is probed, which keeps large
    inputs affordable.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"grad_check eps must lie in [1e-6, 1e-3], got {eps}")

    base = x.data.astype(np.float64)
    probe = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    out = f(probe)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("grad_check needs f to return a scalar tensor")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    analytic = analytic.reshape(-1)

    coords = np.arange(base.size)
    if max_coords is not None and base.size > max_coords:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(base.size, size=max_coords, replace=False)

    flat = base.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(base.copy(), dtype=np.float64)).item()
        flat[i] = orig - eps
        lo = f(Tensor(base.copy(), dtype=np.float64)).item()
        flat[i] = orig
        numeric = (hi - lo) / (2 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
