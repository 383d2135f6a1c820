"""Held-out evaluation: TSPS patch-label AUC and loss values without updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.metrics import roc_auc_score

from .config import RunConfig
from .model import BUSModel, rng_streams
from .objectives import total_loss
from .schedule import collate_region
from .synthdata import SynthSample, generate
from .tensor import no_grad


def held_out(cfg: RunConfig, kind: str, count: int | None = None) -> list[SynthSample]:
    """Samples drawn from the ``eval`` stream, disjoint in purpose from training data."""
    count = cfg.eval_samples if count is None else count
    rng = rng_streams(cfg.seed)["eval"]
    seeds = rng.integers(0, 2**62, size=count) if kind == "region" else rng.integers(0, 2**62, size=2 * count)[count:]
    return [generate(int(s), kind, cfg.image_size) for s in seeds]


def ptm_auc(model: BUSModel, samples: list[SynthSample], batch: int = 50) -> float:
    """ROC AUC of TSPS scores against box-derived patch labels, pooled over all patches."""
    cfg = model.cfg
    scores, labels = [], []
    with no_grad():
        for start in range(0, len(samples), batch):
            images, texts, y = collate_region(samples[start : start + batch], cfg)
            _, a = model.ptm_forward(images, texts, y)
            scores.append(a.data.ravel())
            labels.append(y.ravel())
    return float(roc_auc_score(np.concatenate(labels), np.concatenate(scores)))


@dataclass(frozen=True)
class EvalReport:
    ptm_auc: float
    losses: dict[str, float]
    samples: int


def evaluate(model: BUSModel, beta: float = 0.0, count: int | None = None, batch: int = 8) -> EvalReport:
    """AUC on held-out region samples plus mean losses over held-out batches."""
    cfg = model.cfg
    region = held_out(cfg, "region", count)
    paired = held_out(cfg, "paired", count)
    rngs = rng_streams(cfg.seed + 1)
    totals: dict[str, float] = {}
    batches = 0
    with no_grad():
        for start in range(0, min(len(region), len(paired)) - batch + 1, batch):
            images_o, texts, y = collate_region(region[start : start + batch], cfg)
            ptm, _ = model.ptm_forward(images_o, texts, y)
            chunk = paired[start : start + batch]
            out = model.paired_forward(np.stack([s.pixels for s in chunk]), [s.caption for s in chunk], beta, rngs)
            bundle = total_loss(out.itc, out.itm, out.mlm, out.prefix, ptm)
            for name, value in bundle.as_dict().items():
                totals[name] = totals.get(name, 0.0) + value
            batches += 1
    losses = {name: value / batches for name, value in totals.items()} if batches else {}
    return EvalReport(ptm_auc(model, region), losses, len(region))
