"""Analytical FLOPs counter for the full pipeline and a wall-clock forward benchmark.

Convention: one multiply-accumulate counts as 2 FLOPs. Embeddings, layer
norms, softmax and activations are not counted.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, keep_count
from .errors import BenchEnvironmentError, ConfigError
from .tensor import no_grad

STAGES = ("vit_pre_k", "tsps", "vit_post_k", "pad", "text", "fusion", "heads", "decoder")


def layer_flops(seq_len: int, d: int, ffn_mult: int = 4) -> int:
    """One self-attention transformer layer on ``seq_len`` tokens."""
    if seq_len < 1 or d < 1:
        raise ConfigError(f"layer_flops needs seq_len, d >= 1 (got {seq_len}, {d})")
    projections = 2 * 4 * seq_len * d * d
    attention = 2 * 2 * seq_len * seq_len * d
    ffn = 2 * 2 * seq_len * d * ffn_mult * d
    return projections + attention + ffn


def cross_attention_flops(queries: int, keys: int, d: int) -> int:
    """Q and output projections on the queries, K and V on the keys, and both attention matmuls."""
    return 2 * 2 * queries * d * d + 2 * 2 * keys * d * d + 2 * 2 * queries * keys * d


def cross_layer_flops(queries: int, keys: int, d: int, ffn_mult: int = 4) -> int:
    """Self-attention over the queries, cross-attention to ``keys`` memory slots, then the FFN."""
    self_attn = 2 * 4 * queries * d * d + 2 * 2 * queries * queries * d
    return self_attn + cross_attention_flops(queries, keys, d) + 2 * 2 * queries * d * ffn_mult * d


def tsps_flops(n_patches: int, d: int, hidden: int) -> int:
    """MLP ``2d -> h -> h -> 1`` evaluated once per patch."""
    return 2 * n_patches * (2 * d * hidden + hidden * hidden + hidden)


@dataclass(frozen=True)
class FlopsBreakdown:
    vit_pre_k: int
    tsps: int
    vit_post_k: int
    pad: int
    text: int
    fusion: int
    heads: int
    decoder: int = 0

    @property
    def total(self) -> int:
        return sum(getattr(self, name) for name in STAGES)

    def as_dict(self) -> dict[str, int]:
        return {**asdict(self), "total": self.total}


@dataclass(frozen=True)
class SequenceTimeline:
    """Token counts seen by each stage."""

    image_slots: int  # CLS + n patches, layers 1..k
    post_k_slots: int  # CLS + u (+ fusion token), layers k+1..N
    summary_slots: int  # slots handed to the fusion encoder
    text_slots: int  # CLS + text tokens


def timeline(cfg: RunConfig, n_img: int | None = None, n_txt: int | None = None) -> SequenceTimeline:
    n_img = cfg.n_patches + 1 if n_img is None else n_img
    n_txt = cfg.max_text_len if n_txt is None else n_txt
    n = n_img - 1
    if n < 1 or n_txt < 0:
        raise ConfigError(f"need at least one patch and a non-negative text length (n_img={n_img}, n_txt={n_txt})")
    if cfg.kpe_enabled:
        u = keep_count(n, cfg.alpha)
        if u < 1:
            raise ConfigError(f"kpe.alpha={cfg.alpha} keeps no patch out of {n}")
        post_k = 1 + u + (1 if cfg.fusion_token and u < n else 0)
    else:
        u, post_k = n, n_img
    if cfg.tpa_enabled:
        s = keep_count(u, cfg.gamma)
        if s < 1:
            raise ConfigError(f"tpa.gamma={cfg.gamma} keeps no seed out of {u}")
        summary = 1 + s
    else:
        summary = post_k
    return SequenceTimeline(n_img, post_k, summary, 1 + n_txt)


def model_flops(
    cfg: RunConfig, n_img: int | None = None, n_txt: int | None = None, include_decoder: bool = False
) -> FlopsBreakdown:
    """FLOPs of one image-text forward with the configured summarizer switches.

    ``n_img`` counts the image slots including CLS (defaults to the config
    resolution); ``n_txt`` counts text tokens excluding CLS. ``heads`` covers
    the two contrastive projections and the matching MLP. The generation
    decoder (causal self-attention plus cross-attention to the fused sequence
    and the vocabulary projection) is added only with ``include_decoder``.
    """
    cfg.validate()
    d = cfg.d
    t = timeline(cfg, n_img, n_txt)
    pre_layers = cfg.k if (cfg.kpe_enabled or cfg.tpa_enabled) else cfg.vit_layers
    pre_layers = min(pre_layers, cfg.vit_layers)
    vit_pre_k = pre_layers * layer_flops(t.image_slots, d)
    vit_post_k = (cfg.vit_layers - pre_layers) * layer_flops(t.post_k_slots, d)
    tsps = tsps_flops(t.image_slots - 1, d, cfg.hidden) if (cfg.kpe_enabled or cfg.tpa_enabled) else 0
    pad = cfg.pad_layers * cross_layer_flops(t.summary_slots, t.post_k_slots, d) if cfg.tpa_enabled else 0
    text = cfg.text_layers * layer_flops(t.text_slots, d)
    fused_slots = t.summary_slots + t.text_slots
    fusion = cfg.fusion_layers * layer_flops(fused_slots, d)
    heads = 2 * 2 * d * d + 2 * (d * d + d)
    decoder = 0
    if include_decoder:
        vocab = cfg.vocab_size or 0
        decoder = cfg.decoder_layers * cross_layer_flops(t.text_slots, fused_slots, d) + 2 * t.text_slots * d * vocab
    return FlopsBreakdown(vit_pre_k, tsps, vit_post_k, pad, text, fusion, heads, decoder)


def baseline_flops(cfg: RunConfig, n_img: int | None = None, n_txt: int | None = None, include_decoder: bool = False):
    """Identical stacks without TSPS, KPE or PAD: full-length sequences throughout."""
    return model_flops(cfg.replace(kpe_enabled=False, tpa_enabled=False), n_img, n_txt, include_decoder)


def flops_ratio(cfg: RunConfig, n_img: int | None = None, n_txt: int | None = None, include_decoder: bool = False):
    return model_flops(cfg, n_img, n_txt, include_decoder).total / baseline_flops(cfg, n_img, n_txt, include_decoder).total


def sweep(cfg: RunConfig, ks=(4, 6, 8), alphas=(0.4, 0.7, 0.9), gammas=(0.2,), resolutions=None, n_txt=None):
    """Rows of ``(k, alpha, gamma, image_size, bus_flops, baseline_flops, ratio)``."""
    resolutions = resolutions or (cfg.image_size,)
    rows = []
    for res in resolutions:
        for k in ks:
            for alpha in alphas:
                for gamma in gammas:
                    run = cfg.replace(k=k, alpha=alpha, gamma=gamma, image_size=res)
                    bus = model_flops(run, n_txt=n_txt).total
                    base = baseline_flops(run, n_txt=n_txt).total
                    rows.append((k, alpha, gamma, res, bus, base, bus / base))
    return rows


# ------------------------------------------------------------------ benchmark


@dataclass(frozen=True)
class BenchResult:
    latency_ms: float
    throughput: float  # items per second
    batch: int
    iterations: int
    samples_ms: tuple[float, ...]
    config: dict

    @property
    def cv(self) -> float:
        return statistics.pstdev(self.samples_ms) / statistics.fmean(self.samples_ms)


def check_timer(resolution_limit: float = 1e-6) -> None:
    info = time.get_clock_info("perf_counter")
    if info.resolution > resolution_limit:
        raise BenchEnvironmentError(f"perf_counter resolution {info.resolution}s is coarser than {resolution_limit}s")


def bench_inputs(cfg: RunConfig, batch: int, seed: int = 0):
    """Fixed synthetic images and captions for benchmarking."""
    from .synthdata import generate

    samples = [generate(seed + i, "paired", cfg.image_size) for i in range(batch)]
    return np.stack([s.pixels for s in samples]), [s.caption for s in samples]


def _forward_fn(cfg: RunConfig, batch: int, model=None):
    from .model import BUSModel

    model = model if model is not None else BUSModel(cfg)
    images, captions = bench_inputs(cfg, batch, cfg.seed)
    ids = model.pack(captions)

    def forward():
        text = model.encode_text(ids)
        vis = model.visual_summary(images, text, cfg.beta_max)
        return model.fuse(vis.summary, text)

    return forward


def _settings(cfg: RunConfig, batch, iters, warmup) -> tuple[int, int, int]:
    batch = cfg.bench_batch if batch is None else batch
    iters = cfg.bench_iters if iters is None else iters
    warmup = cfg.bench_warmup if warmup is None else warmup
    if batch < 1 or iters < 1:
        raise ConfigError("bench needs batch >= 1 and iters >= 1")
    return batch, iters, warmup


def _timed(forward) -> float:
    start = time.perf_counter()
    forward()
    return (time.perf_counter() - start) * 1e3


def _result(cfg: RunConfig, batch: int, samples: list[float]) -> BenchResult:
    latency = statistics.median(samples)
    return BenchResult(latency, batch / (latency / 1e3), batch, len(samples), tuple(samples), cfg.__dict__.copy())


def bench_forward(
    cfg: RunConfig,
    batch: int | None = None,
    iters: int | None = None,
    warmup: int | None = None,
    model=None,
) -> BenchResult:
    """Median latency of the inference forward (text, ViT with KPE, TPA and PAD, fusion), single-threaded."""
    check_timer()
    batch, iters, warmup = _settings(cfg, batch, iters, warmup)
    forward = _forward_fn(cfg, batch, model)
    with threadpool_limits(limits=1), no_grad():
        for _ in range(warmup):
            forward()
        samples = [_timed(forward) for _ in range(iters)]
    return _result(cfg, batch, samples)


def bench_paired(
    first: RunConfig,
    second: RunConfig,
    batch: int | None = None,
    iters: int | None = None,
    warmup: int | None = None,
) -> tuple[BenchResult, BenchResult]:
    """Benchmark two configs with alternating iterations so machine drift hits both equally."""
    check_timer()
    batch, iters, warmup = _settings(first, batch, iters, warmup)
    forwards = (_forward_fn(first, batch), _forward_fn(second, batch))
    samples: tuple[list[float], list[float]] = ([], [])
    with threadpool_limits(limits=1), no_grad():
        for _ in range(warmup):
            for forward in forwards:
                forward()
        for i in range(iters):
            # swap the order every iteration so neither config always runs second
            order = (0, 1) if i % 2 == 0 else (1, 0)
            for j in order:
                samples[j].append(_timed(forwards[j]))
    return _result(first, batch, samples[0]), _result(second, batch, samples[1])
