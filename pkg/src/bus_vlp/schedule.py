"""Alternating PTM / paired-batch training with the beta warm-up and AdamW."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .config import RunConfig
from .errors import NumericError
from .model import BUSModel, rng_streams
from .objectives import LossBundle, bbox_to_patch_labels, total_loss
from .synthdata import SynthSample, generate


@dataclass
class TrainState:
    step: int = 0
    beta: float = 0.0
    ptm_ema: float | None = None
    gate_step: int | None = None  # step at which the PTM EMA first fell below the threshold
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    rngs: dict[str, np.random.Generator] = field(default_factory=dict)

    @classmethod
    def fresh(cls, seed: int) -> TrainState:
        return cls(rngs=rng_streams(seed))


@dataclass
class StepReport:
    step: int
    beta: float
    losses: LossBundle
    wall_ms: float
    kept: int
    seeds: int
    lr: float


# ------------------------------------------------------------------- schedules


def beta_schedule(state: TrainState, cfg: RunConfig) -> float:
    """β for the current step.

    β stays 0 until the PTM EMA drops below ``cfg.ema_threshold``; from that
    step on it ramps linearly to ``cfg.beta_max`` over ``cfg.beta_warmup_steps``.
    The gate latches, so β never decreases.
    """
    if state.gate_step is None and state.ptm_ema is not None and state.ptm_ema < cfg.ema_threshold:
        state.gate_step = state.step
    if state.gate_step is None:
        return 0.0
    elapsed = state.step - state.gate_step
    if cfg.beta_warmup_steps <= 0:
        return cfg.beta_max
    return min(cfg.beta_max, cfg.beta_max * elapsed / cfg.beta_warmup_steps)


def learning_rate(step: int, cfg: RunConfig) -> float:
    """Linear warm-up to ``cfg.lr``, then cosine decay reaching ``cfg.lr_floor`` at the last step."""
    warm = max(0, cfg.warmup_iters)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    last = max(cfg.steps - 1, warm)
    if last == warm:
        return cfg.lr if step <= warm else cfg.lr_floor
    progress = min(1.0, (step - warm) / (last - warm))
    return cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay (decay skipped for vectors and scalars)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.02):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay

    def step(self, named_params, lr: float, state: TrainState) -> None:
        t = state.step + 1
        for name, p in named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
            m, v = state.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            state.moments[name] = (m, v)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            if p.data.ndim >= 2:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimize(named_params, lr: float, state: TrainState, weight_decay: float = 0.02) -> None:
    AdamW(weight_decay=weight_decay).step(named_params, lr, state)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# ------------------------------------------------------------------------ data


def sample_batch(rng: np.random.Generator, kind: str, size: int, image_size: int) -> list[SynthSample]:
    seeds = rng.integers(0, 2**62, size=size)
    return [generate(int(s), kind, image_size) for s in seeds]


def collate_region(samples, cfg: RunConfig):
    images = np.stack([s.pixels for s in samples])
    labels = np.stack([bbox_to_patch_labels(s.box, cfg.image_size, cfg.patch_size) for s in samples])
    return images, [s.caption for s in samples], labels.astype(np.float64)


# ------------------------------------------------------------------- training


def train_step(model: BUSModel, batch_o, batch_d, state: TrainState, cfg: RunConfig) -> StepReport:
    """One iteration: PTM forward, paired forward, single backward, single update."""
    if not batch_o or not batch_d:
        raise ValueError("both the region batch and the paired batch must be non-empty")
    start = time.perf_counter()
    beta = beta_schedule(state, cfg)
    state.beta = beta

    images_o, label_texts, labels = collate_region(batch_o, cfg)
    ptm, _ = model.ptm_forward(images_o, label_texts, labels)

    images_d = np.stack([s.pixels for s in batch_d])
    paired = model.paired_forward(images_d, [s.caption for s in batch_d], beta, state.rngs)
    bundle = total_loss(paired.itc, paired.itm, paired.mlm, paired.prefix, ptm)

    params = list(model.named_parameters())
    model.zero_grad()
    bundle.graph.backward()
    clip_grad_norm([p for _, p in params], cfg.clip_norm)
    lr = learning_rate(state.step, cfg)
    AdamW(weight_decay=cfg.weight_decay).step(params, lr, state)

    decay = cfg.ema_decay
    state.ptm_ema = bundle.ptm if state.ptm_ema is None else decay * state.ptm_ema + (1 - decay) * bundle.ptm
    report = StepReport(state.step, beta, bundle, (time.perf_counter() - start) * 1e3, paired.kept, paired.seeds, lr)
    bundle.graph = None
    state.step += 1
    return report


def train(
    cfg: RunConfig,
    model: BUSModel | None = None,
    state: TrainState | None = None,
    on_step: Callable[[StepReport, TrainState], None] | None = None,
) -> tuple[BUSModel, TrainState, list[StepReport]]:
    """Run ``cfg.steps`` iterations on freshly generated synthetic batches."""
    model = model if model is not None else BUSModel(cfg)
    state = state if state is not None else TrainState.fresh(cfg.seed)
    reports = []
    while state.step < cfg.steps:
        batch_o = sample_batch(state.rngs["data"], "region", cfg.batch_o, cfg.image_size)
        batch_d = sample_batch(state.rngs["data"], "paired", cfg.batch_d, cfg.image_size)
        report = train_step(model, batch_o, batch_d, state, cfg)
        if not math.isfinite(report.losses.total):
            raise NumericError(f"non-finite total loss at step {report.step}")
        reports.append(report)
        if on_step is not None:
            on_step(report, state)
    return model, state, reports


# ----------------------------------------------------------------- checkpoints


def state_tensors(model: BUSModel, state: TrainState) -> dict[str, np.ndarray]:
    tensors = {f"param/{name}": p.data for name, p in model.named_parameters()}
    tensors["state/step"] = np.array(float(state.step))
    tensors["state/beta"] = np.array(state.beta)
    tensors["state/ptm_ema"] = np.array(np.nan if state.ptm_ema is None else state.ptm_ema)
    tensors["state/gate_step"] = np.array(-1.0 if state.gate_step is None else float(state.gate_step))
    for name, (m, v) in state.moments.items():
        tensors[f"adam_m/{name}"] = m
        tensors[f"adam_v/{name}"] = v
    for name, rng in state.rngs.items():
        tensors[f"rng/{name}"] = _rng_words(rng)
    return tensors


def _rng_words(rng: np.random.Generator) -> np.ndarray:
    """PCG64 state as 32-bit words (exactly representable in float64)."""
    st = rng.bit_generator.state
    words = []
    for value in (st["state"]["state"], st["state"]["inc"]):
        words += [(value >> (32 * i)) & 0xFFFFFFFF for i in range(4)]
    words += [st["has_uint32"], st["uinteger"]]
    return np.array(words, dtype=np.float64)


def _restore_rng(words: np.ndarray) -> np.random.Generator:
    w = [int(x) for x in words]
    state = sum(w[i] << (32 * i) for i in range(4))
    inc = sum(w[4 + i] << (32 * i) for i in range(4))
    bit_gen = np.random.PCG64()
    bit_gen.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": w[8],
        "uinteger": w[9],
    }
    return np.random.Generator(bit_gen)


def save_checkpoint(path: str | Path, model: BUSModel, state: TrainState | None = None) -> Path:
    tensors = state_tensors(model, state) if state is not None else {
        f"param/{n}": p.data for n, p in model.named_parameters()
    }
    return checkpoint.save_tensors(path, tensors)


def load_checkpoint(path: str | Path, model: BUSModel, state: TrainState | None = None) -> None:
    tensors = checkpoint.load_tensors(path)
    model.load_state_dict({k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")})
    if state is None or "state/step" not in tensors:
        return
    state.step = int(tensors["state/step"])
    state.beta = float(tensors["state/beta"])
    ema = float(tensors["state/ptm_ema"])
    state.ptm_ema = None if math.isnan(ema) else ema
    gate = int(tensors["state/gate_step"])
    state.gate_step = None if gate < 0 else gate
    state.moments = {
        k[len("adam_m/") :]: (v, tensors["adam_v/" + k[len("adam_m/") :]]) for k, v in tensors.items() if k.startswith("adam_m/")
    }
    state.rngs.update({k[len("rng/") :]: _restore_rng(v) for k, v in tensors.items() if k.startswith("rng/")})
