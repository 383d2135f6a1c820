"""Transformer building blocks on top of the tensor core."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_VALUE = -1e9
INIT_STD = 0.02


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


def normal_init(rng: np.random.Generator, *shape: int, std: float = INIT_STD) -> Tensor:
    return T.parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = normal_init(rng, d_in, d_out)
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def attention_bias(batch: int, lq: int, lk: int, key_mask=None, causal: bool = False) -> np.ndarray | None:
    """Additive bias ``[B, 1, Lq, Lk]``; ``key_mask`` is True for usable keys."""
    if key_mask is None and not causal:
        return None
    bias = np.zeros((batch, 1, lq, lk))
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        bias = bias + np.where(key_mask, 0.0, MASK_VALUE)[:, None, None, :]
    if causal:
        bias = bias + np.triu(np.full((lq, lk), MASK_VALUE), k=1)[None, None]
    return bias


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, length, d = x.shape
        return x.reshape(b, length, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, memory: Tensor | None = None, key_mask=None, causal: bool = False):
        """Return ``(output, attention)``; attention is ``[B, H, Lq, Lk]`` data."""
        mem = x if memory is None else memory
        b, lq, d = x.shape
        lk = mem.shape[1]
        q = self._split(self.q(x))
        k = self._split(self.k(mem))
        v = self._split(self.v(mem))
        scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(d // self.heads))
        bias = attention_bias(b, lq, lk, key_mask, causal)
        if bias is not None:
            scores = scores + bias
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, lq, d)
        return self.o(out), attn.data


class FeedForward(Module):
    def __init__(self, d: int, rng: np.random.Generator, mult: int = 4):
        self.fc1 = Linear(d, mult * d, rng)
        self.fc2 = Linear(mult * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block, optionally with a cross-attention sublayer."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, cross: bool = False):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        if cross:
            self.ln_cross = LayerNorm(d)
            self.cross = MultiHeadAttention(d, heads, rng)
        else:
            self.ln_cross = None
            self.cross = None
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, rng)

    def __call__(self, x: Tensor, key_mask=None, causal: bool = False, memory: Tensor | None = None, memory_mask=None):
        h, attn = self.attn(self.ln1(x), key_mask=key_mask, causal=causal)
        x = x + h
        if self.cross is not None:
            if memory is None:
                raise ValueError("cross-attention block called without memory")
            h, _ = self.cross(self.ln_cross(x), memory=memory, key_mask=memory_mask)
            x = x + h
        x = x + self.ffn(self.ln2(x))
        return x, attn
