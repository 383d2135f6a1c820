"""Text-guided patch scoring, key patch extraction and patch abstraction."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import keep_count
from .errors import ConfigError, DomainError, StateError
from .nn import Block, LayerNorm, Linear, Module
from .sequences import PatchSequence
from .tensor import Tensor


class TSPS(Module):
    """Three-layer MLP over ``concat(patch, t_cls)`` with a sigmoid output."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(2 * d, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.head = Linear(hidden, 1, rng)

    def __call__(self, patch_states: Tensor, t_cls: Tensor) -> Tensor:
        return tsps_score(patch_states, t_cls, self)


def tsps_score(patch_states: Tensor, t_cls: Tensor, w: TSPS) -> Tensor:
    """Alignment score per patch, ``[B, n]`` (or ``[n]`` for unbatched input)."""
    unbatched = patch_states.ndim == 2
    if unbatched:
        patch_states = patch_states.reshape(1, *patch_states.shape)
        t_cls = t_cls.reshape(1, -1)
    b, n, d = patch_states.shape
    if t_cls.shape != (b, d):
        raise ValueError(f"t_cls {t_cls.shape} does not match patches {patch_states.shape}")
    text = T.mul(t_cls.reshape(b, 1, d), np.ones((1, n, 1)))
    h = T.gelu(w.fc1(T.concat([patch_states, text], axis=-1)))
    h = T.gelu(w.fc2(h))
    a = T.sigmoid(w.head(h)).reshape(b, n)
    return a.reshape(n) if unbatched else a


def normalize(x: np.ndarray, kind: str = "minmax") -> np.ndarray:
    """Row-wise normalization over the last axis.

    min-max maps each row onto [0, 1]; a row with zero range (including a
    single element) maps to 0.5 everywhere.
    """
    x = np.asarray(x, dtype=np.float64)
    if kind == "minmax":
        lo = x.min(axis=-1, keepdims=True)
        span = x.max(axis=-1, keepdims=True) - lo
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (x - lo) / safe, 0.5)
    if kind == "softmax":
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown normalization {kind!r}")


def mix_saliency(a, p, beta: float, norm_kind: str = "minmax") -> np.ndarray:
    """``beta * F_N(a) + (1 - beta) * F_N(p)`` row-wise."""
    if not 0.0 <= beta <= 1.0:
        raise DomainError(f"beta={beta} outside [0, 1]")
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if a.shape != p.shape:
        raise ValueError(f"score shapes differ: {a.shape} vs {p.shape}")
    return beta * normalize(a, norm_kind) + (1.0 - beta) * normalize(p, norm_kind)


def top_indices(scores: np.ndarray, count: int) -> np.ndarray:
    """Positions of the ``count`` largest scores per row, in ascending position order.

    Ties go to the lower position.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :count]
    return np.sort(order, axis=-1)


def kpe_select(seq: PatchSequence, a_dot: np.ndarray, alpha: float, fusion_enabled: bool = True) -> PatchSequence:
    """Keep CLS plus the top ``floor(n * alpha)`` patches by saliency.

    With ``fusion_enabled`` one trailing token is appended: the saliency-weighted
    mean of the discarded patch states (weights renormalized over the
    discarded set, uniform if they sum to zero).
    """
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"alpha={alpha} outside (0, 1]")
    a_dot = np.atleast_2d(np.asarray(a_dot, dtype=np.float64))
    n = seq.patch_count
    if seq.has_fusion_token:
        raise ValueError("kpe_select expects a sequence without a fusion token")
    if a_dot.shape != (seq.batch, n):
        raise ValueError(f"saliency shape {a_dot.shape} != ({seq.batch}, {n})")
    u = keep_count(n, alpha)
    if u < 1:
        raise ConfigError(f"alpha={alpha} keeps no patch out of {n}")
    if u == n:
        return seq

    keep = top_indices(a_dot, u)  # positions among patches
    slots = np.concatenate([np.zeros((seq.batch, 1), dtype=np.int64), keep + 1], axis=1)
    kept_states = T.gather_rows(seq.states, slots)
    grid = np.take_along_axis(seq.grid_indices, slots, axis=1)
    if not fusion_enabled:
        return PatchSequence(kept_states, grid)

    discarded = np.ones((seq.batch, n), dtype=bool)
    np.put_along_axis(discarded, keep, False, axis=1)
    weights = np.where(discarded, a_dot, 0.0)
    totals = weights.sum(axis=1, keepdims=True)
    uniform = discarded / discarded.sum(axis=1, keepdims=True)
    weights = np.where(totals > 0, weights / np.where(totals > 0, totals, 1.0), uniform)
    patch_states = seq.states[:, 1:, :]
    fused = T.matmul(T.as_tensor(weights[:, None, :]), patch_states)  # [B, 1, d]
    return PatchSequence(T.concat([kept_states, fused], axis=1), grid, has_fusion_token=True)


def tpa_select(final_seq: PatchSequence, a_dot_at_k: np.ndarray, gamma: float) -> PatchSequence:
    """Seed tokens for the abstraction decoder: CLS plus top ``floor(gamma * u)`` patches.

    Saliency of each retained patch is looked up through its grid index in
    the layer-k record; the fusion token is never a seed.
    """
    if not 0.0 < gamma <= 1.0:
        raise DomainError(f"gamma={gamma} outside (0, 1]")
    a_dot_at_k = np.atleast_2d(np.asarray(a_dot_at_k, dtype=np.float64))
    u = final_seq.patch_count
    s = keep_count(u, gamma)
    if s < 1:
        raise ConfigError(f"gamma={gamma} keeps no seed out of {u} patches")
    patch_grid = final_seq.grid_indices[:, 1:]
    scores = np.take_along_axis(a_dot_at_k, patch_grid, axis=1)
    keep = top_indices(scores, s)
    slots = np.concatenate([np.zeros((final_seq.batch, 1), dtype=np.int64), keep + 1], axis=1)
    return PatchSequence(
        T.gather_rows(final_seq.states, slots), np.take_along_axis(final_seq.grid_indices, slots, axis=1)
    )


class PatchAbstractionDecoder(Module):
    """Blocks of self-attention over seeds, cross-attention into the ViT output, FFN."""

    def __init__(self, d: int, heads: int, layers: int, rng: np.random.Generator):
        self.blocks = [Block(d, heads, rng, cross=True) for _ in range(layers)]
        self.ln_f = LayerNorm(d)

    def __call__(self, seeds: PatchSequence, full_seq: PatchSequence) -> PatchSequence:
        return pad_forward(seeds, full_seq, self)


def pad_forward(seeds: PatchSequence, full_seq: PatchSequence, weights: PatchAbstractionDecoder) -> PatchSequence:
    if full_seq.slots == 0:
        raise StateError("patch abstraction needs a non-empty visual sequence")
    x = seeds.states
    for block in weights.blocks:
        x, _ = block(x, memory=full_seq.states)
    return PatchSequence(weights.ln_f(x), seeds.grid_indices)
