"""The full model: encoders, summarizer, fusion, decoder and objective heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import objectives as O
from . import tensor as T
from .config import RunConfig
from .encoders import (
    CaptionDecoder,
    FusedSequence,
    FusionEncoder,
    ImageEncoder,
    TextEncoder,
    ViTTrace,
    pack_text,
)
from .nn import Linear, Module
from .sequences import PatchSequence, SaliencyRecord, TextEncoding
from .summarizer import PatchAbstractionDecoder, tpa_select
from .synthdata import VOCAB, Vocab
from .tensor import Tensor

STREAMS = ("init", "data", "masking", "negatives", "eval")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per purpose, all derived from one root seed."""
    return {name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,))) for i, name in enumerate(STREAMS)}


@dataclass
class VisualSummary:
    final: PatchSequence  # ViT output after KPE
    summary: PatchSequence  # PAD output (or ``final`` when TPA is disabled)
    saliency: SaliencyRecord


@dataclass
class PairedOutput:
    itc: Tensor
    itm: Tensor
    mlm: Tensor
    prefix: Tensor
    kept: int
    seeds: int


class BUSModel(Module):
    def __init__(self, cfg: RunConfig, vocab: Vocab = VOCAB, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = rng if rng is not None else rng_streams(cfg.seed)["init"]
        vocab_size = cfg.vocab_size or len(vocab)
        if vocab_size < len(vocab):
            raise ValueError(f"vocab_size {vocab_size} smaller than the vocabulary ({len(vocab)})")
        self.cfg = cfg
        self.vocab = vocab
        d = cfg.d
        self.text = TextEncoder(cfg, vocab_size, rng)
        self.vision = ImageEncoder(cfg, rng)
        self.pad = PatchAbstractionDecoder(d, cfg.heads, cfg.pad_layers, rng)
        self.fusion = FusionEncoder(cfg, rng)
        self.decoder = CaptionDecoder(cfg, vocab_size, rng)
        self.itc_image = Linear(d, d, rng)
        self.itc_text = Linear(d, d, rng)
        self.log_temperature = T.parameter(math.log(cfg.itc_temperature))
        self.itm_hidden = Linear(d, d, rng)
        self.itm_out = Linear(d, 1, rng)
        self.mlm_head = Linear(d, vocab_size, rng)

    # ---------------------------------------------------------------- stages

    def encode_text(self, token_ids) -> TextEncoding:
        return self.text(token_ids, self.vocab.pad_id)

    def pack(self, sequences) -> np.ndarray:
        return pack_text(sequences, self.cfg.max_text_len, self.vocab)

    def visual_summary(self, images, text: TextEncoding, beta: float, trace: ViTTrace | None = None) -> VisualSummary:
        """Text first, then ViT with KPE, then TPA seeds through the PAD."""
        patches = self.vision.embed(images)
        final, record = self.vision.forward(patches, text, self.cfg, beta, trace)
        if self.cfg.tpa_enabled:
            seeds = tpa_select(final, record.a_dot, self.cfg.gamma)
            summary = self.pad(seeds, final)
        else:
            summary = final
        return VisualSummary(final, summary, record)

    def fuse(self, summary: PatchSequence, text: TextEncoding) -> FusedSequence:
        return self.fusion(summary, text)

    def temperature(self) -> Tensor:
        return T.exp(self.log_temperature)

    def itm_probability(self, fused: FusedSequence) -> Tensor:
        h = T.gelu(self.itm_hidden(fused.text_cls))
        return T.sigmoid(self.itm_out(h)).reshape(-1)

    # ------------------------------------------------------------- objectives

    def ptm_forward(self, images, label_texts, labels) -> tuple[Tensor, Tensor]:
        """PTM loss and TSPS scores; only layers 1..k of the ViT are needed."""
        text = self.encode_text(self.pack(label_texts))
        patches = self.vision.embed(images)
        _, record = self.vision.forward(patches, text, self.cfg, 0.0, stop_at_k=True)
        return O.ptm_loss(record.a, labels), record.a

    def paired_forward(self, images, captions, beta: float, rngs: dict[str, np.random.Generator]) -> PairedOutput:
        cfg, vocab = self.cfg, self.vocab
        ids = self.pack(captions)
        text = self.encode_text(ids)
        vis = self.visual_summary(images, text, beta)
        b = len(captions)

        img_feat = self.itc_image(vis.final.states[:, 0, :])
        txt_feat = self.itc_text(text.t_cls)
        temperature = self.temperature()
        itc = O.itc_loss(img_feat, txt_feat, temperature)

        similarity = O.contrastive_logits(img_feat, txt_feat, temperature).data
        negatives = T.forward_constant(lambda: O.hard_negative_sample(similarity, rngs["negatives"]))
        both_states = T.concat([vis.summary.states, vis.summary.states], axis=0)
        both_grid = np.concatenate([vis.summary.grid_indices] * 2, axis=0)
        both_summary = PatchSequence(both_states, both_grid, vis.summary.has_fusion_token)
        both_text = TextEncoding(
            T.concat([text.t_cls, text.t_cls[negatives]], axis=0),
            T.concat([text.sequence, text.sequence[negatives]], axis=0),
            np.concatenate([ids, ids[negatives]]),
            np.concatenate([text.attention_mask, text.attention_mask[negatives]]),
        )
        match = self.itm_probability(self.fuse(both_summary, both_text))
        itm = O.itm_loss(match, np.concatenate([np.ones(b), np.zeros(b)]))

        masked_ids, mask = O.mlm_mask(ids, rngs["masking"], cfg.mlm_rate, vocab.special_ids, vocab.mask_id)
        fused_masked = self.fuse(vis.summary, self.encode_text(masked_ids))
        mlm = O.mlm_loss(self.mlm_head(fused_masked.text_states), ids, mask)

        prefixes, targets = split_for_prefix_lm(captions, vocab.sep_id)
        fused_prefix = self.fuse(vis.summary, self.encode_text(self.pack(prefixes)))
        width = max(len(t) for t in targets)
        target_ids = np.full((b, width), vocab.pad_id, dtype=np.int64)
        weights = np.zeros((b, width))
        for row, t in enumerate(targets):
            target_ids[row, : len(t)] = t
            weights[row, : len(t)] = 1.0
        logits = self.decoder(fused_prefix, target_ids[:, :-1], vocab.cls_id)
        prefix = O.prefix_lm_loss(logits, target_ids, weights)

        return PairedOutput(itc, itm, mlm, prefix, vis.final.patch_count, vis.summary.patch_count)


def split_for_prefix_lm(captions, end_id: int) -> tuple[list[list[int]], list[list[int]]]:
    """First half of each caption conditions the fusion; the rest plus an end token is generated."""
    prefixes, targets = [], []
    for caption in captions:
        cut = max(1, len(caption) // 2)
        prefixes.append(list(caption[:cut]))
        targets.append(list(caption[cut:]) + [end_id])
    return prefixes, targets
