"""Transformer building blocks on top of :mod:`mtmlf.tensor`.

Attention heads are processed by slicing the feature axis, so every
intermediate stays within the three-dimensional tensor limit.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


class Module:
    """Parameter container. Submodules and parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        T.zero_grads(self.named_parameters().values())


def param(rng: np.random.Generator, shape: tuple, scale: float | None = None) -> Tensor:
    if scale is None:
        scale = 1.0 / np.sqrt(shape[0])
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int):
        self.w = param(rng, (d_in, d_out))
        self.b = zeros((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = ones((d,))
        self.bias = zeros((d,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, rng, d_model: int, n_heads: int):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = Linear(rng, d_model, d_model)
        self.k = Linear(rng, d_model, d_model)
        self.v = Linear(rng, d_model, d_model)
        self.o = Linear(rng, d_model, d_model)

    def __call__(self, x: Tensor, memory: Tensor, bias: np.ndarray | None = None) -> Tensor:
        """``x``: (B, Lq, D) queries; ``memory``: (B, Lk, D); ``bias``: (B, Lq, Lk) additive."""
        q, k, v = self.q(x), self.k(memory), self.v(memory)
        scale = 1.0 / np.sqrt(self.d_head)
        heads = []
        for h in range(self.n_heads):
            lo, hi = h * self.d_head, (h + 1) * self.d_head
            qh = T.slice_last(q, lo, hi)
            kh = T.slice_last(k, lo, hi)
            vh = T.slice_last(v, lo, hi)
            scores = T.mul(T.matmul(qh, T.transpose(kh)), scale)
            if bias is not None:
                scores = T.add(scores, bias)
            heads.append(T.matmul(T.softmax(scores, axis=-1), vh))
        return self.o(T.concat(heads, axis=-1))


class EncoderBlock(Module):
    """Post-norm transformer encoder block."""

    def __init__(self, rng, d_model: int, n_heads: int, d_ff: int):
        self.attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln1 = LayerNorm(d_model)
        self.ff = MLP(rng, d_model, d_ff, d_model)
        self.ln2 = LayerNorm(d_model)

    def __call__(self, x: Tensor, bias: np.ndarray | None) -> Tensor:
        x = self.ln1(T.add(x, self.attn(x, x, bias)))
        return self.ln2(T.add(x, self.ff(x)))


class DecoderBlock(Module):
    def __init__(self, rng, d_model: int, n_heads: int, d_ff: int):
        self.self_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln1 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln2 = LayerNorm(d_model)
        self.ff = MLP(rng, d_model, d_ff, d_model)
        self.ln3 = LayerNorm(d_model)

    def __call__(self, y: Tensor, memory: Tensor, self_bias, cross_bias) -> Tensor:
        y = self.ln1(T.add(y, self.self_attn(y, y, self_bias)))
        y = self.ln2(T.add(y, self.cross_attn(y, memory, cross_bias)))
        return self.ln3(T.add(y, self.ff(y)))


class TransformerEncoder(Module):
    def __init__(self, rng, d_model: int, n_heads: int, n_blocks: int, d_ff: int | None = None):
        d_ff = d_ff or 4 * d_model
        self.blocks = [EncoderBlock(rng, d_model, n_heads, d_ff) for _ in range(n_blocks)]

    def __call__(self, x: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        bias = None if pad_mask is None else key_padding_bias(pad_mask, x.shape[1])
        for block in self.blocks:
            x = block(x, bias)
        return x


def key_padding_bias(valid: np.ndarray, n_queries: int) -> np.ndarray:
    """(B, Lk) validity mask -> (B, Lq, Lk) additive bias blocking padded keys."""
    valid = np.asarray(valid, dtype=bool)
    b = np.where(valid, 0.0, NEG_INF)[:, None, :]
    return np.repeat(b, n_queries, axis=1)


def causal_bias(batch: int, length: int) -> np.ndarray:
    tri = np.triu(np.full((length, length), NEG_INF), k=1)
    return np.broadcast_to(tri, (batch, length, length)).copy()
