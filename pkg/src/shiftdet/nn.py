"""Small neural-net layer zoo on top of the autodiff engine.

A `Module` is a lightweight parameter registry: anything assigned as an
attribute that is a requires_grad Tensor, a Module, or a list of Modules
is discovered by `named_parameters()` in deterministic (insertion) order.
Weight initialization draws from an explicitly passed numpy Generator so
that model construction is reproducible bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(
                f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}"
                )
            p.data = arr.copy()

    def param_ids(self):
        return {id(p) for p in self.parameters()}


def _uniform(rng, shape, bound, dtype):
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


class Linear(Module):
    def __init__(self, rng, in_dim, out_dim, dtype=np.float32):
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = _uniform(rng, (in_dim, out_dim), bound, dtype)
        self.bias = _uniform(rng, (out_dim,), bound, dtype)

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = _uniform(rng, (out_ch, in_ch, kernel, kernel), bound, dtype)
        self.bias = _uniform(rng, (out_ch,), bound, dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class MLP(Module):
    """Stack of Linear layers with ReLU between (none after the last)."""

    def __init__(self, rng, dims, dtype=np.float32):
        self.layers = [Linear(rng, dims[i], dims[i + 1], dtype) for i in range(len(dims) - 1)]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head splitting.

    All of q, k, v are [N, T, D]; D must divide evenly into heads.
    Query/key positional tensors may be added by the caller before the
    call; values are always the raw content stream.
    """

    def __init__(self, rng, dim, heads, dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(rng, dim, dim, dtype)
        self.k_proj = Linear(rng, dim, dim, dtype)
        self.v_proj = Linear(rng, dim, dim, dtype)
        self.out_proj = Linear(rng, dim, dim, dtype)

    def __call__(self, q, k, v):
        n, tq, d = q.shape
        tk = k.shape[1]
        h, hd = self.heads, self.head_dim
        qh = T.transpose(T.reshape(self.q_proj(q), (n, tq, h, hd)), (0, 2, 1, 3))
        kh = T.transpose(T.reshape(self.k_proj(k), (n, tk, h, hd)), (0, 2, 1, 3))
        vh = T.transpose(T.reshape(self.v_proj(v), (n, tk, h, hd)), (0, 2, 1, 3))
        scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = T.softmax(scores, axis=-1)
        mixed = T.matmul(attn, vh)  # [N, H, Tq, hd]
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (n, tq, d))
        return self.out_proj(merged)


def sinusoidal_positions_2d(h, w, dim, dtype=np.float32, temperature=10000.0):
    """Fixed 2-D sine/cosine position table, shape [h*w, dim].

    Half the channels encode the row coordinate, half the column, each
    with interleaved sin/cos at geometrically spaced frequencies.
    """
    if dim % 4 != 0:
        raise ValueError("positional encoding dim must be divisible by 4")
    quarter = dim // 4
    freq = 1.0 / (temperature ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ys = ys.reshape(-1, 1) * freq
    xs = xs.reshape(-1, 1) * freq
    table = np.concatenate([np.sin(xs), np.cos(xs), np.sin(ys), np.cos(ys)], axis=1)
    return table.astype(dtype)
