"""Toy-scale ViT, text encoder, cross-modal fusion encoder and caption decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .errors import ConfigError, DataError, DomainError, StateError
from .nn import Block, LayerNorm, Linear, Module, normal_init
from .sequences import PatchSequence, SaliencyRecord, TextEncoding
from .summarizer import TSPS, kpe_select, mix_saliency
from .synthdata import VOCAB, Vocab
from .tensor import Tensor


def patchify(images, patch_size: int) -> Tensor:
    """``[B, H, W, C]`` (or ``[H, W, C]``) pixels to ``[B, n, p*p*C]`` row-major patches."""
    images = T.as_tensor(images)
    if images.ndim == 3:
        images = images.reshape(1, *images.shape)
    b, h, w, c = images.shape
    p = patch_size
    if p <= 0 or h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


@dataclass
class ViTTrace:
    """Per-layer attention maps ``[B, H, L, L]`` recorded during one forward."""

    attention: dict[int, np.ndarray] = field(default_factory=dict)

    def cls_attention(self, layer_index: int) -> np.ndarray:
        """Head-mean attention from the CLS query to every patch key, ``[B, n]``."""
        if layer_index not in self.attention:
            raise StateError(f"no attention recorded for layer {layer_index}; run the forward first")
        return cls_attention_from_map(self.attention[layer_index])


def cls_attention_from_map(attn: np.ndarray) -> np.ndarray:
    return attn[:, :, 0, 1:].mean(axis=1)


class ImageEncoder(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        n = cfg.n_patches
        self.patch_size = cfg.patch_size
        self.patch_embed = Linear(cfg.patch_size * cfg.patch_size * 3, cfg.d, rng)
        self.cls = normal_init(rng, 1, 1, cfg.d)
        self.pos = normal_init(rng, 1, n + 1, cfg.d)
        self.blocks = [Block(cfg.d, cfg.heads, rng) for _ in range(cfg.vit_layers)]
        self.tsps = TSPS(cfg.d, cfg.hidden, rng)
        self.ln_f = LayerNorm(cfg.d)

    def embed(self, images) -> PatchSequence:
        patches = patchify(images, self.patch_size)
        b, n, _ = patches.shape
        if n + 1 != self.pos.shape[1]:
            raise ConfigError(f"image yields {n} patches, encoder was built for {self.pos.shape[1] - 1}")
        tokens = self.patch_embed(patches)
        cls = T.mul(self.cls, np.ones((b, 1, 1)))
        return PatchSequence.full(T.concat([cls, tokens], axis=1) + self.pos)

    def saliency(self, x: Tensor, attn: np.ndarray, t_cls: Tensor, beta: float, norm_kind: str) -> SaliencyRecord:
        a = self.tsps(x[:, 1:, :], t_cls)
        p = cls_attention_from_map(attn)
        a_dot = T.forward_constant(lambda: mix_saliency(a.data, p, beta, norm_kind))
        return SaliencyRecord(a, p, a_dot, beta, norm_kind)

    def forward(
        self,
        seq: PatchSequence,
        text: TextEncoding,
        cfg: RunConfig,
        beta: float,
        trace: ViTTrace | None = None,
        stop_at_k: bool = False,
    ) -> tuple[PatchSequence, SaliencyRecord]:
        """Layers 1..k on all patches, KPE, layers k+1..N on the kept ones."""
        if not 0.0 <= beta <= 1.0:
            raise DomainError(f"beta={beta} outside [0, 1]")
        x = seq.states
        record = None
        for index, block in enumerate(self.blocks, 1):
            x, attn = block(x)
            if trace is not None:
                trace.attention[index] = attn
            if index == cfg.k:
                record = self.saliency(x, attn, text.t_cls, beta, cfg.norm_kind)
                seq = PatchSequence(x, seq.grid_indices)
                if stop_at_k:
                    return seq, record
                if cfg.kpe_enabled:
                    seq = kpe_select(seq, record.a_dot, cfg.alpha, cfg.fusion_token)
                x = seq.states
        return PatchSequence(self.ln_f(x), seq.grid_indices, seq.has_fusion_token), record


def vit_forward(encoder: ImageEncoder, patches: PatchSequence, text: TextEncoding, cfg: RunConfig, beta: float, trace=None):
    return encoder.forward(patches, text, cfg, beta, trace)


class TextEncoder(Module):
    def __init__(self, cfg: RunConfig, vocab_size: int, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.max_len = cfg.max_text_len
        self.token = normal_init(rng, vocab_size, cfg.d)
        self.pos = normal_init(rng, cfg.max_text_len + 1, cfg.d)
        self.blocks = [Block(cfg.d, cfg.heads, rng) for _ in range(cfg.text_layers)]
        self.ln_f = LayerNorm(cfg.d)

    def __call__(self, token_ids, pad_id: int) -> TextEncoding:
        ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
        if ids.shape[1] > self.max_len + 1:
            raise DataError(f"text of {ids.shape[1] - 1} tokens exceeds max_text_len={self.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise DataError(f"token id outside vocabulary of {self.vocab_size}")
        mask = ids != pad_id
        x = T.embedding(self.token, ids) + self.pos[: ids.shape[1]]
        for block in self.blocks:
            x, _ = block(x, key_mask=mask)
        x = self.ln_f(x)
        return TextEncoding(x[:, 0, :], x, ids, mask)


def text_encode(encoder: TextEncoder, token_ids, vocab: Vocab = VOCAB) -> TextEncoding:
    return encoder(token_ids, vocab.pad_id)


def pack_text(sequences, max_len: int, vocab: Vocab = VOCAB) -> np.ndarray:
    """``[CLS] ids... [PAD]...`` rows of width ``1 + max_len``."""
    out = np.full((len(sequences), max_len + 1), vocab.pad_id, dtype=np.int64)
    out[:, 0] = vocab.cls_id
    for row, ids in enumerate(sequences):
        if len(ids) > max_len:
            raise DataError(f"text of {len(ids)} tokens exceeds max_text_len={max_len}")
        out[row, 1 : 1 + len(ids)] = ids
    return out


@dataclass
class FusedSequence:
    states: Tensor  # [B, visual_slots + 1 + m, d]
    mask: np.ndarray  # [B, visual_slots + 1 + m]
    text_offset: int  # slot of the text [CLS]

    @property
    def text_cls(self) -> Tensor:
        return self.states[:, self.text_offset, :]

    @property
    def text_states(self) -> Tensor:
        return self.states[:, self.text_offset :, :]


class FusionEncoder(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.blocks = [Block(cfg.d, cfg.heads, rng) for _ in range(cfg.fusion_layers)]
        self.ln_f = LayerNorm(cfg.d)

    def __call__(self, summary: PatchSequence, text: TextEncoding) -> FusedSequence:
        if summary.batch != text.sequence.shape[0]:
            raise ValueError(f"batch mismatch: {summary.batch} images vs {text.sequence.shape[0]} texts")
        x = T.concat([summary.states, text.sequence], axis=1)
        mask = np.concatenate([np.ones((summary.batch, summary.slots), dtype=bool), text.attention_mask], axis=1)
        for block in self.blocks:
            x, _ = block(x, key_mask=mask)
        return FusedSequence(self.ln_f(x), mask, summary.slots)


def fuse(encoder: FusionEncoder, summary: PatchSequence, text: TextEncoding) -> FusedSequence:
    return encoder(summary, text)


class CaptionDecoder(Module):
    """Causal decoder over ``[CLS] + prefix`` with cross-attention to the fused states."""

    def __init__(self, cfg: RunConfig, vocab_size: int, rng: np.random.Generator):
        self.max_len = cfg.max_text_len
        self.token = normal_init(rng, vocab_size, cfg.d)
        self.pos = normal_init(rng, cfg.max_text_len + 1, cfg.d)
        self.blocks = [Block(cfg.d, cfg.heads, rng, cross=True) for _ in range(cfg.decoder_layers)]
        self.ln_f = LayerNorm(cfg.d)
        self.lm_head = Linear(cfg.d, vocab_size, rng)

    def __call__(self, fused: FusedSequence, target_prefix, bos_id: int) -> Tensor:
        """Logits ``[B, len(prefix) + 1, V]``; position t sees the BOS and prefix[:t]."""
        prefix = np.asarray(target_prefix, dtype=np.int64)
        if prefix.ndim == 1:
            prefix = prefix[None, :].repeat(fused.states.shape[0], axis=0) if prefix.size else np.zeros(
                (fused.states.shape[0], 0), dtype=np.int64
            )
        if prefix.shape[1] > self.max_len:
            raise DataError(f"decoder prefix of {prefix.shape[1]} tokens exceeds max_text_len={self.max_len}")
        ids = np.concatenate([np.full((prefix.shape[0], 1), bos_id, dtype=np.int64), prefix], axis=1)
        x = T.embedding(self.token, ids) + self.pos[: ids.shape[1]]
        for block in self.blocks:
            x, _ = block(x, causal=True, memory=fused.states, memory_mask=fused.mask)
        return self.lm_head(self.ln_f(x))


def decode(decoder: CaptionDecoder, fused: FusedSequence, target_prefix, vocab: Vocab = VOCAB) -> Tensor:
    return decoder(fused, target_prefix, vocab.cls_id)
