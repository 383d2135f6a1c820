"""Pretraining losses and the box-to-patch label transform."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericError, ShapeError
from .synthdata import VOCAB, class_label_to_text  # noqa: F401  (re-exported)
from .tensor import Tensor

LOG_EPS = 1e-7
LOSS_NAMES = ("itc", "itm", "mlm", "prefix", "ptm")


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int


def bbox_to_patch_labels(box, image_size: int, patch_size: int) -> np.ndarray:
    """Row-major 0/1 labels: 1 where a patch and the box share positive area."""
    x, y, w, h = (box.x, box.y, box.w, box.h) if isinstance(box, BoundingBox) else box
    if w <= 0 or h <= 0:
        raise DataError(f"degenerate box {w}x{h}")
    if image_size % patch_size:
        raise ConfigError(f"image_size {image_size} not divisible by patch_size {patch_size}")
    if x >= image_size or y >= image_size or x + w <= 0 or y + h <= 0:
        raise DataError(f"box ({x}, {y}, {w}, {h}) lies outside the {image_size}px image")
    grid = image_size // patch_size
    starts = np.arange(grid) * patch_size
    cols = (starts < x + w) & (starts + patch_size > x)
    rows = (starts < y + h) & (starts + patch_size > y)
    return (rows[:, None] & cols[None, :]).astype(np.int8).reshape(-1)


def ptm_loss(a: Tensor, labels) -> Tensor:
    """Patch-text matching: mean binary cross-entropy between scores and labels."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != a.shape:
        raise ShapeError(f"ptm_loss: scores {a.shape} vs labels {labels.shape}")
    return T.binary_cross_entropy(a, labels, LOG_EPS)


def contrastive_logits(img: Tensor, txt: Tensor, temperature) -> Tensor:
    """Cosine-similarity logits ``[B, B]`` (image rows, text columns)."""
    img = T.l2_normalize(img, axis=-1)
    txt = T.l2_normalize(txt, axis=-1)
    return T.div(T.matmul(img, T.swap_last(txt)), temperature)


def itc_loss(img_cls: Tensor, txt_cls: Tensor, temperature=0.07) -> Tensor:
    """Symmetric in-batch InfoNCE with matched diagonal targets."""
    b = img_cls.shape[0]
    if b < 2:
        raise ConfigError("itc_loss needs a batch of at least 2")
    if txt_cls.shape != img_cls.shape:
        raise ShapeError(f"itc_loss: {img_cls.shape} vs {txt_cls.shape}")
    if float(np.min(T.as_tensor(temperature).data)) <= 0:
        raise ConfigError("itc temperature must be positive")
    logits = contrastive_logits(img_cls, txt_cls, temperature)
    targets = np.arange(b)
    i2t = T.cross_entropy(logits, targets)
    t2i = T.cross_entropy(T.swap_last(logits), targets)
    return T.scale(i2t + t2i, 0.5)


def negative_weights(similarity) -> np.ndarray:
    """Row-wise sampling distribution over off-diagonal entries, ``exp``-weighted."""
    sim = np.asarray(similarity, dtype=np.float64)
    b = sim.shape[0]
    if sim.shape != (b, b) or b < 2:
        raise ConfigError("hard negative sampling needs a square similarity matrix with B >= 2")
    off = ~np.eye(b, dtype=bool)
    masked = np.where(off, sim, -np.inf)
    with np.errstate(invalid="ignore"):
        row_max = np.max(np.where(np.isfinite(masked), masked, -np.inf), axis=1, keepdims=True)
        weights = np.where(off & np.isfinite(masked), np.exp(masked - np.where(np.isfinite(row_max), row_max, 0.0)), 0.0)
    totals = weights.sum(axis=1, keepdims=True)
    uniform = off / (b - 1)
    return np.where(totals > 0, weights / np.where(totals > 0, totals, 1.0), uniform)


def hard_negative_sample(similarity, rng: np.random.Generator) -> np.ndarray:
    """For each row, one column index != row drawn from :func:`negative_weights`."""
    probs = negative_weights(similarity)
    draws = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    picks = (cdf < draws[:, None]).sum(axis=1)
    # guard against float round-off at the top of the cdf
    picks = np.minimum(picks, probs.shape[1] - 1)
    for row in np.nonzero(probs[np.arange(len(picks)), picks] == 0)[0]:
        picks[row] = np.flatnonzero(probs[row])[-1]
    return picks


def itm_loss(match_probs: Tensor, match_labels) -> Tensor:
    """Binary cross-entropy on match (1) / mismatch (0) predictions."""
    labels = np.asarray(match_labels, dtype=np.float64)
    if labels.shape[0] < 2:
        raise ConfigError("itm_loss needs at least 2 pairs")
    return T.binary_cross_entropy(match_probs.reshape(labels.shape), labels, LOG_EPS)


def mlm_mask(token_ids, rng: np.random.Generator, mask_rate: float = 0.15, special_ids=None, mask_id: int | None = None):
    """Mask each non-special token with probability ``mask_rate``.

    Masked tokens become ``mask_id`` (no random/keep split). A row with no
    draw gets one uniformly chosen maskable position forced. Returns
    ``(masked_ids, mask)``.
    """
    special_ids = VOCAB.special_ids if special_ids is None else special_ids
    mask_id = VOCAB.mask_id if mask_id is None else mask_id
    ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    maskable = ~np.isin(ids, list(special_ids))
    if not maskable.any(axis=1).all():
        raise DataError("a text row has no maskable (non-special) token")
    draws = rng.random(ids.shape)
    mask = (draws < mask_rate) & maskable
    for row in np.nonzero(~mask.any(axis=1))[0]:
        candidates = np.flatnonzero(maskable[row])
        mask[row, candidates[rng.integers(len(candidates))]] = True
    return np.where(mask, mask_id, ids), mask


def mlm_loss(logits: Tensor, token_ids, mask) -> Tensor:
    """Cross-entropy restricted to masked positions."""
    return T.cross_entropy(logits, np.asarray(token_ids), np.asarray(mask, dtype=np.float64))


def prefix_lm_loss(logits: Tensor, target_ids, weights=None) -> Tensor:
    """Mean token cross-entropy; ``logits[..., t, :]`` predicts ``target_ids[..., t]``."""
    targets = np.asarray(target_ids, dtype=np.int64)
    if targets.size == 0:
        raise DataError("prefix LM target is empty")
    return T.cross_entropy(logits, targets, weights)


@dataclass
class LossBundle:
    itc: float
    itm: float
    mlm: float
    prefix: float
    ptm: float
    total: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in (*LOSS_NAMES, "total")}


def total_loss(itc, itm, mlm, prefix, ptm) -> LossBundle:
    """Unweighted sum in the fixed order itc, itm, mlm, prefix, ptm."""
    parts = dict(itc=itc, itm=itm, mlm=mlm, prefix=prefix, ptm=ptm)
    values = {}
    for name, part in parts.items():
        value = float(part.data) if isinstance(part, Tensor) else float(part)
        if not math.isfinite(value):
            raise NumericError(f"loss {name!r} is not finite ({value})")
        values[name] = value
    graph = None
    tensors = [p for p in parts.values() if isinstance(p, Tensor)]
    if tensors:
        graph = T.as_tensor(itc)
        for name in LOSS_NAMES[1:]:
            graph = graph + parts[name]
        total = float(graph.data)
    else:
        total = values["itc"]
        for name in LOSS_NAMES[1:]:
            total += values[name]
    return LossBundle(**values, total=total, graph=graph)
