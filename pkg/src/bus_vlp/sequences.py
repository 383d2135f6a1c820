"""Batched token-sequence records passed between the stacks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

CLS_INDEX = -1


@dataclass
class PatchSequence:
    """Visual token states ``[B, slots, d]``.

    ``grid_indices`` (``[B, 1 + count]``) gives the original patch index of
    the CLS slot (-1) and every retained patch. When ``has_fusion_token`` is
    set, one extra trailing slot summarizes the discarded patches and has no
    grid index.
    """

    states: Tensor
    grid_indices: np.ndarray
    has_fusion_token: bool = False

    @property
    def batch(self) -> int:
        return self.states.shape[0]

    @property
    def patch_count(self) -> int:
        return self.grid_indices.shape[1] - 1

    @property
    def slots(self) -> int:
        return self.states.shape[1]

    def __post_init__(self):
        self.grid_indices = np.asarray(self.grid_indices, dtype=np.int64)
        expected = self.grid_indices.shape[1] + int(self.has_fusion_token)
        if self.states.ndim != 3 or self.states.shape[1] != expected:
            raise ValueError(
                f"states {self.states.shape} do not match {self.grid_indices.shape[1]} indexed slots"
                f" (+fusion={self.has_fusion_token})"
            )

    @classmethod
    def full(cls, states: Tensor) -> PatchSequence:
        b, slots = states.shape[:2]
        grid = np.tile(np.arange(-1, slots - 1), (b, 1))
        return cls(states, grid)


@dataclass
class TextEncoding:
    t_cls: Tensor  # [B, d]
    sequence: Tensor  # [B, 1 + m, d]
    token_ids: np.ndarray  # [B, 1 + m]
    attention_mask: np.ndarray  # [B, 1 + m], True for real tokens

    def __post_init__(self):
        if self.sequence.shape[:2] != self.attention_mask.shape:
            raise ValueError("text sequence length does not match its mask")


@dataclass
class SaliencyRecord:
    a: Tensor  # [B, n] TSPS scores in (0, 1), differentiable
    p: np.ndarray  # [B, n] head-mean CLS attention at layer k
    a_dot: np.ndarray  # [B, n] mixed saliency
    beta: float
    norm_kind: str
