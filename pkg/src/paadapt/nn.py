"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class that collects parameters from attributes.

    Every Tensor attribute counts as a parameter (frozen ones included, so
    checkpoints always see the full set); nested modules and lists of modules
    contribute with dotted names. Non-parameter buffers are kept as plain
    numpy arrays. There is no forward dispatch magic, subclasses just define
    their own methods.
    """

    def parameters(self):
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[name] = value
            elif isinstance(value, Module):
                for sub, p in value.parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
        return out

    def n_parameters(self):
        return sum(p.data.size for p in self.parameters().values())

    def set_trainable(self, flag):
        for p in self.parameters().values():
            p.requires_grad = bool(flag)

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


def param(array):
    return Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)


def he_normal(rng, shape, fan_in):
    return param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


class Linear(Module):
    def __init__(self, rng, c_in, c_out, bias=True, zero_init=False, gain=1.0):
        if zero_init:
            self.weight = param(np.zeros((c_in, c_out)))
        else:
            self.weight = param(rng.normal(0.0, gain / np.sqrt(c_in), size=(c_in, c_out)))
        self.bias = param(np.zeros(c_out)) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add_row_bias(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, c):
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class Mlp(Module):
    """Two-layer perceptron with a relu in the middle."""

    def __init__(self, rng, c_in, hidden, c_out, zero_init_out=False):
        self.fc1 = Linear(rng, c_in, hidden, gain=np.sqrt(2.0))
        self.fc2 = Linear(rng, hidden, c_out, zero_init=zero_init_out)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k, stride=1, padding=0, zero_init=False):
        self.stride = stride
        self.padding = padding
        if zero_init:
            self.weight = param(np.zeros((c_out, c_in, k, k)))
        else:
            self.weight = he_normal(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = param(np.zeros(c_out))

    def __call__(self, x):
        return T.conv2d(x, self.weight, bias=self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """Non-overlapping learned upsampling (kernel == stride)."""

    def __init__(self, rng, c_in, c_out, k):
        self.k = k
        self.weight = he_normal(rng, (c_in, c_out, k, k), c_in)
        self.bias = param(np.zeros(c_out))

    def __call__(self, x):
        return T.conv_transpose2d(x, self.weight, bias=self.bias, stride=self.k)


class MultiheadAttention(Module):
    """Standard multi-head attention over (T, C) token matrices."""

    def __init__(self, rng, c, heads, zero_init_out=False):
        if c % heads:
            raise ValueError(f"channels {c} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(rng, c, c)
        self.k_proj = Linear(rng, c, c)
        self.v_proj = Linear(rng, c, c)
        self.out_proj = Linear(rng, c, c, zero_init=zero_init_out)

    def __call__(self, q, k, v):
        c = self.q_proj.weight.data.shape[0]
        dh = c // self.heads
        qs, ks, vs = self.q_proj(q), self.k_proj(k), self.v_proj(v)
        outs = []
        for h in range(self.heads):
            qh = T.narrow(qs, 1, h * dh, dh)
            kh = T.narrow(ks, 1, h * dh, dh)
            vh = T.narrow(vs, 1, h * dh, dh)
            logits = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh))
            attn = T.softmax(logits, 1.0, axis=-1)
            outs.append(T.matmul(attn, vh))
        return self.out_proj(T.concat(outs, axis=1))


class SingleHeadAttention(Module):
    """Projection attention with a zero-initialized value path.

    Starting from a zero value projection makes the block an exact identity
    residual at initialization; the value weights receive gradient from the
    first step on.
    """

    def __init__(self, rng, c):
        self.scale = 1.0 / np.sqrt(c)
        self.q_proj = Linear(rng, c, c, bias=False)
        self.k_proj = Linear(rng, c, c, bias=False)
        self.v_proj = Linear(rng, c, c, bias=False, zero_init=True)

    def __call__(self, q, k, v):
        logits = T.scale(T.matmul(self.q_proj(q), T.transpose(self.k_proj(k))), self.scale)
        return T.matmul(T.softmax(logits, 1.0, axis=-1), self.v_proj(v))


class Adam(Module):
    """Adaptive moment estimation over an explicit name -> tensor dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[k] = b1 * self._m[k] + (1 - b1) * g
            v = self._v[k] = b2 * self._v[k] + (1 - b2) * (g * g)
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
