"""Neural-network layers built on the autodiff core.

Layers accept inputs shaped (..., T, D) so the same code runs batched during
training and unbatched during streaming inference.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat, softmax


class Parameter(Tensor):
    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=True)
        self.requires_grad = True  # leaf grads are kept even inside no_grad()
        self.name = name
        self.trainable = trainable


class Module:
    """Minimal container: collects Parameters from attributes recursively."""

    def params(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                out[key] = val
            elif isinstance(val, Module):
                for sub, p in val.params().items():
                    out[f"{key}.{sub}"] = p
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        out[f"{key}.{i}"] = item
                    elif isinstance(item, Module):
                        for sub, p in item.params().items():
                            out[f"{key}.{i}.{sub}"] = p
        return out

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, param in self.params().items():
            key = f"{prefix}{name}"
            if key not in state:
                raise KeyError(f"missing parameter {key} in state")
            if state[key].shape != param.data.shape:
                raise ValueError(
                    f"shape mismatch for {key}: {state[key].shape} vs {param.data.shape}")
            param.data = np.array(state[key], dtype=np.float64)


def xavier_uniform(rng: np.random.Generator, n_in: int, n_out: int,
                   scale: float = 1.0) -> np.ndarray:
    bound = scale * np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, init_scale: float = 1.0):
        self.weight = Parameter(xavier_uniform(rng, n_in, n_out, init_scale))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    """Normalization over the last axis with learned gain and offset."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.offset = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered * ((var + self.eps) ** -0.5)
        return normed * self.gain + self.offset


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query/key/value inputs."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, t, _ = x.shape
        return x.reshape(*lead, t, self.n_heads, self.head_dim).swapaxes(-3, -2)

    def _join(self, x: Tensor) -> Tensor:
        x = x.swapaxes(-3, -2)
        *lead, t, h, d = x.shape
        return x.reshape(*lead, t, h * d)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        q = self._split(self.wq(query))
        k = self._split(self.wk(key))
        v = self._split(self.wv(value))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.head_dim))
        attn = softmax(scores, axis=-1)
        return self.wo(self._join(attn @ v))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.lin1 = Linear(dim, hidden, rng)
        self.lin2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.lin1(x).silu())


def depthwise_conv1d(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """Per-channel convolution along the time axis with same padding.

    x: (..., T, D); weight: (K, D); bias: (D,). Implemented as a sum of
    shifted slices so the backward pass falls out of the autodiff ops.
    """
    kernel, dim = weight.shape
    t = x.shape[-2]
    pad_left = (kernel - 1) // 2
    pad_right = kernel - 1 - pad_left
    zeros_left = Tensor(np.zeros(x.shape[:-2] + (pad_left, dim)))
    zeros_right = Tensor(np.zeros(x.shape[:-2] + (pad_right, dim)))
    padded = concat([zeros_left, x, zeros_right], axis=-2)
    lead = (slice(None),) * (x.ndim - 2)
    out = None
    for j in range(kernel):
        term = padded[lead + (slice(j, j + t), slice(None))] * weight[j]
        out = term if out is None else out + term
    return out + bias


class ConformerBlock(Module):
    """Feedforward / self-attention / depthwise-conv / feedforward sandwich.

    Every sub-module is pre-normalized with a residual connection; the two
    feedforward branches contribute with weight one half.
    """

    def __init__(self, dim: int, n_heads: int, ffn_dim: int, conv_kernel: int,
                 rng: np.random.Generator):
        self.norm_ffn1 = LayerNorm(dim)
        self.ffn1 = FeedForward(dim, ffn_dim, rng)
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.norm_conv = LayerNorm(dim)
        self.conv_in = Linear(dim, 2 * dim, rng)
        self.conv_weight = Parameter(
            xavier_uniform(rng, conv_kernel, dim, scale=1.0).reshape(conv_kernel, dim))
        self.conv_bias = Parameter(np.zeros(dim))
        self.conv_out = Linear(dim, dim, rng)
        self.norm_ffn2 = LayerNorm(dim)
        self.ffn2 = FeedForward(dim, ffn_dim, rng)
        self.dim = dim

    def _conv_module(self, x: Tensor) -> Tensor:
        gates = self.conv_in(x)
        lead = (slice(None),) * (x.ndim - 1)
        a = gates[lead + (slice(0, self.dim),)]
        b = gates[lead + (slice(self.dim, 2 * self.dim),)]
        y = a * b.sigmoid()
        y = depthwise_conv1d(y, self.conv_weight, self.conv_bias).silu()
        return self.conv_out(y)

    def __call__(self, x: Tensor) -> Tensor:
        # With all residual-branch output projections at zero the block is the
        # identity map; the encoder applies one LayerNorm after the stack.
        x = x + self.ffn1(self.norm_ffn1(x)) * 0.5
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h)
        x = x + self._conv_module(self.norm_conv(x))
        x = x + self.ffn2(self.norm_ffn2(x)) * 0.5
        return x


def sinusoidal_positions(n_pos: int, dim: int, wavelength: float = 10000.0) -> np.ndarray:
    """Interleaved sine/cosine position codes, shape (n_pos, dim)."""
    positions = np.arange(n_pos, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)
    rates = wavelength ** (-idx / dim)
    pe = np.zeros((n_pos, dim))
    pe[:, 0::2] = np.sin(positions * rates)
    pe[:, 1::2] = np.cos(positions * rates[: dim // 2])
    return pe
