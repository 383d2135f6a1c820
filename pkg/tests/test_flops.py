import statistics

import numpy as np
import pytest

from bus_vlp.config import RunConfig, paper_config
from bus_vlp.errors import ConfigError
from bus_vlp.flops import (
    STAGES,
    baseline_flops,
    bench_forward,
    bench_paired,
    cross_layer_flops,
    flops_ratio,
    layer_flops,
    model_flops,
    sweep,
    timeline,
)


def matmul_oracle(shapes):
    """FLOPs of a list of (m, k, n) matrix products at 2 per multiply-accumulate."""
    return sum(2 * m * k * n for m, k, n in shapes)


def encoder_layer_shapes(L, d, ffn_mult=4):
    return [
        (L, d, d), (L, d, d), (L, d, d),  # Q, K, V
        (L, d, L),  # scores
        (L, L, d),  # weighted values
        (L, d, d),  # output projection
        (L, d, ffn_mult * d), (L, ffn_mult * d, d),
    ]


class TestLayerFlops:
    def test_unit_case(self):
        assert layer_flops(1, 1) == 28

    def test_quadratic_in_length(self):
        for L in (1, 7, 50, 197):
            assert layer_flops(2 * L, 64) > 2 * layer_flops(L, 64)

    def test_matches_per_matmul_oracle(self):
        for L, d in ((1, 1), (17, 64), (197, 768)):
            assert layer_flops(L, d) == matmul_oracle(encoder_layer_shapes(L, d))

    def test_vit_base_magnitude(self):
        # The usual ViT-B/16 reference of about 17.5 G counts multiply-accumulates
        macs = 12 * layer_flops(197, 768) / 2
        assert macs == pytest.approx(17.5e9, rel=0.15)

    def test_rejects_empty(self):
        with pytest.raises(ConfigError):
            layer_flops(0, 8)

    def test_cross_layer_oracle(self):
        q, k, d = 5, 9, 16
        shapes = [
            (q, d, d), (q, d, d), (q, d, d), (q, d, q), (q, q, d), (q, d, d),  # self-attention
            (q, d, d), (k, d, d), (k, d, d), (q, d, k), (q, k, d), (q, d, d),  # cross-attention
            (q, d, 4 * d), (q, 4 * d, d),
        ]
        assert cross_layer_flops(q, k, d) == matmul_oracle(shapes)


class TestModelFlops:
    def test_breakdown_sums_to_total(self):
        for cfg in (RunConfig(), paper_config(), paper_config(alpha=0.4, k=4)):
            for include in (False, True):
                b = model_flops(cfg, include_decoder=include)
                parts = b.as_dict()
                assert parts["total"] == sum(parts[s] for s in STAGES)
                assert all(parts[s] >= 0 for s in STAGES)

    def test_disabled_pipeline_equals_baseline(self):
        cfg = paper_config(alpha=1.0, gamma=1.0, kpe_enabled=False, tpa_enabled=False)
        assert model_flops(cfg, 197, 40) == baseline_flops(paper_config(), 197, 40)

    def test_timeline_base_scale_point(self):
        t = timeline(paper_config(k=6, alpha=0.7, gamma=0.2), 197, 40)
        assert (t.image_slots, t.post_k_slots, t.summary_slots, t.text_slots) == (197, 1 + 137 + 1, 1 + 27, 41)

    def test_fusion_token_switch(self):
        with_token = timeline(paper_config(), 197, 40).post_k_slots
        without = timeline(paper_config(fusion_token=False), 197, 40).post_k_slots
        assert with_token == without + 1

    def test_ratio_below_one_at_base_scale(self):
        assert flops_ratio(paper_config(k=6, alpha=0.7, gamma=0.2), 197, 40) < 1.0

    def test_selection_that_keeps_nothing(self):
        with pytest.raises(ConfigError):
            model_flops(RunConfig(gamma=0.01), 17, 12)


class TestMonotonicity:
    """More retained tokens or later pruning never costs fewer FLOPs."""

    def test_alpha(self):
        values = [model_flops(paper_config(alpha=a), 197, 40).total for a in np.linspace(0.1, 1.0, 19)]
        assert all(x <= y for x, y in zip(values, values[1:]))

    def test_gamma(self):
        values = [model_flops(paper_config(gamma=g), 197, 40).total for g in np.linspace(0.05, 1.0, 20)]
        assert all(x <= y for x, y in zip(values, values[1:]))

    def test_k(self):
        values = [model_flops(paper_config(k=k), 197, 40).total for k in range(1, 12)]
        assert all(x <= y for x, y in zip(values, values[1:]))

    def test_resolution(self):
        rows = sweep(paper_config(), ks=(6,), alphas=(0.7,), gammas=(0.2,), resolutions=(224, 288, 384, 512), n_txt=40)
        bus = [r[4] for r in rows]
        base = [r[5] for r in rows]
        assert bus == sorted(bus) and base == sorted(base)

    def test_sweep_shape(self):
        rows = sweep(paper_config(), n_txt=40)
        assert len(rows) == 9
        assert all(r[4] < r[5] for r in rows)


@pytest.fixture(scope="module")
def small():
    return RunConfig(bench_iters=30, bench_warmup=5)


class TestBench:
    def test_throughput_is_batch_over_latency(self, small):
        r = bench_forward(small, batch=4)
        assert r.throughput == pytest.approx(r.batch / (r.latency_ms / 1e3), rel=0.05)
        assert r.iterations == 30 and len(r.samples_ms) == 30

    def test_smaller_alpha_is_faster(self):
        fast, slow = bench_paired(RunConfig(alpha=0.4), RunConfig(alpha=0.9))
        assert fast.latency_ms < slow.latency_ms

    def test_batching_amortizes(self, small):
        one, eight = bench_forward(small, batch=1), bench_forward(small, batch=8)
        assert eight.throughput >= 0.95 * one.throughput

    def test_repeated_medians_are_stable(self, small):
        medians = [bench_forward(small, batch=8).latency_ms for _ in range(5)]
        assert statistics.pstdev(medians) / statistics.fmean(medians) < 0.10

    def test_bad_settings(self, small):
        with pytest.raises(ConfigError):
            bench_forward(small, batch=0)
