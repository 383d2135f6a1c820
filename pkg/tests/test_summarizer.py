import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bus_vlp import tensor as T
from bus_vlp.config import keep_count
from bus_vlp.errors import ConfigError, DomainError, StateError
from bus_vlp.sequences import PatchSequence
from bus_vlp.summarizer import (
    TSPS,
    PatchAbstractionDecoder,
    kpe_select,
    mix_saliency,
    normalize,
    tpa_select,
    tsps_score,
)


def gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def sequence(n, d=4, batch=1, seed=0):
    states = T.parameter(np.random.default_rng(seed).standard_normal((batch, n + 1, d)))
    return PatchSequence.full(states)


def distinct_scores(draw_list):
    return len(set(draw_list)) == len(draw_list)


class TestTSPS:
    def setup_method(self):
        self.w = TSPS(4, 6, np.random.default_rng(0))
        self.rng = np.random.default_rng(1)

    def test_matches_reference_mlp(self):
        h = self.rng.standard_normal((5, 4))
        t = self.rng.standard_normal(4)
        x = np.hstack([h, np.tile(t, (5, 1))])
        z = gelu(x @ self.w.fc1.weight.data + self.w.fc1.bias.data)
        z = gelu(z @ self.w.fc2.weight.data + self.w.fc2.bias.data)
        ref = 1 / (1 + np.exp(-(z @ self.w.head.weight.data + self.w.head.bias.data)))
        np.testing.assert_allclose(tsps_score(T.as_tensor(h), T.as_tensor(t), self.w).data, ref[:, 0], rtol=1e-12)

    def test_identical_patches_identical_scores(self):
        h = np.tile(self.rng.standard_normal(4), (3, 1))
        a = self.w(T.as_tensor(h), T.as_tensor(self.rng.standard_normal(4))).data
        assert a[0] == a[1] == a[2]

    def test_permutation_equivariance(self):
        h = self.rng.standard_normal((6, 4))
        t = T.as_tensor(self.rng.standard_normal(4))
        perm = self.rng.permutation(6)
        np.testing.assert_allclose(self.w(T.as_tensor(h[perm]), t).data, self.w(T.as_tensor(h), t).data[perm])

    def test_range(self):
        a = self.w(T.as_tensor(self.rng.standard_normal((2, 8, 4))), T.as_tensor(self.rng.standard_normal((2, 4))))
        assert a.shape == (2, 8) and np.all((a.data > 0) & (a.data < 1))


class TestMixSaliency:
    def test_beta_zero_is_normalized_attention(self):
        a, p = np.array([0.1, 0.9, 0.4]), np.array([0.2, 0.5, 0.3])
        np.testing.assert_array_equal(mix_saliency(a, p, 0.0), normalize(p))

    def test_beta_one_is_normalized_score(self):
        a, p = np.array([0.1, 0.9, 0.4]), np.array([0.2, 0.5, 0.3])
        np.testing.assert_array_equal(mix_saliency(a, p, 1.0), normalize(a))

    def test_constant_vector_rule(self):
        np.testing.assert_allclose(mix_saliency([0.2, 0.8], [0.5, 0.5], 0.5), [0.25, 0.75])

    def test_single_element(self):
        np.testing.assert_array_equal(normalize(np.array([3.0])), [0.5])

    def test_beta_domain(self):
        with pytest.raises(DomainError):
            mix_saliency([0.1, 0.2], [0.3, 0.4], 1.5)

    def test_softmax_alternative(self):
        out = normalize(np.array([0.0, np.log(3.0)]), "softmax")
        np.testing.assert_allclose(out, [0.25, 0.75])

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.integers(-1000, 1000), min_size=2, max_size=20, unique=True),
        st.floats(0.01, 100),
        st.floats(-50, 50),
    )
    def test_argsort_affine_invariance(self, raw, c, b):
        # scores on a 0.01 grid so the shift cannot absorb a gap in rounding
        a = np.array(raw) / 100.0
        p = np.linspace(0, 1, len(a))
        base = np.argsort(mix_saliency(a, p, 0.6), kind="stable")
        moved = np.argsort(mix_saliency(c * a + b, p, 0.6), kind="stable")
        np.testing.assert_array_equal(base, moved)

    def test_monotone_in_score_at_fixed_statistics(self):
        rng = np.random.default_rng(3)
        a, p = rng.uniform(0.1, 0.9, 8), rng.uniform(0, 1, 8)
        a[0], a[1] = 0.0, 1.0  # pin min and max so the statistics stay fixed
        for i in range(2, 8):
            bumped = a.copy()
            bumped[i] += 0.05
            assert mix_saliency(bumped, p, 0.5)[i] > mix_saliency(a, p, 0.5)[i]

    def test_monotone_in_attention_at_fixed_statistics(self):
        rng = np.random.default_rng(4)
        a, p = rng.uniform(0, 1, 8), rng.uniform(0.1, 0.9, 8)
        p[0], p[1] = 0.0, 1.0
        for i in range(2, 8):
            bumped = p.copy()
            bumped[i] += 0.05
            assert mix_saliency(a, bumped, 0.5)[i] > mix_saliency(a, p, 0.5)[i]


class TestKPE:
    def test_alpha_one_is_identity(self):
        seq = sequence(6)
        assert kpe_select(seq, np.arange(6.0)[None], 1.0) is seq

    def test_hand_example(self):
        out = kpe_select(sequence(6), np.array([[0.1, 0.9, 0.3, 0.8, 0.2, 0.7]]), 0.5, fusion_enabled=False)
        np.testing.assert_array_equal(out.grid_indices, [[-1, 1, 3, 5]])

    def test_base_scale_count(self):
        out = kpe_select(sequence(196, d=2), np.random.default_rng(0).random((1, 196)), 0.7)
        assert out.patch_count == 137 and out.slots == 139 and out.has_fusion_token

    def test_order_preserved_and_cls_kept(self):
        seq = sequence(10)
        out = kpe_select(seq, np.random.default_rng(2).random((1, 10)), 0.5, fusion_enabled=False)
        grid = out.grid_indices[0]
        assert grid[0] == -1 and np.all(np.diff(grid) > 0)
        np.testing.assert_array_equal(out.states.data[0], seq.states.data[0, grid + 1])

    def test_ties_go_to_lower_index(self):
        out = kpe_select(sequence(4), np.array([[0.5, 0.5, 0.5, 0.1]]), 0.5, fusion_enabled=False)
        np.testing.assert_array_equal(out.grid_indices, [[-1, 0, 1]])

    def test_fusion_token_is_weighted_mean_of_discarded(self):
        seq = sequence(4)
        a_dot = np.array([[0.9, 0.1, 0.8, 0.3]])
        out = kpe_select(seq, a_dot, 0.5)
        patches = seq.states.data[0, 1:]
        expected = (0.1 * patches[1] + 0.3 * patches[3]) / 0.4
        np.testing.assert_allclose(out.states.data[0, -1], expected)

    def test_fusion_token_uniform_when_weights_vanish(self):
        seq = sequence(4)
        out = kpe_select(seq, np.array([[0.9, 0.0, 0.8, 0.0]]), 0.5)
        patches = seq.states.data[0, 1:]
        np.testing.assert_allclose(out.states.data[0, -1], (patches[1] + patches[3]) / 2)

    def test_zero_keep_rejected(self):
        with pytest.raises(ConfigError):
            kpe_select(sequence(3), np.array([[0.1, 0.2, 0.3]]), 0.2)

    def test_discarded_gradients(self):
        a_dot = np.array([[0.9, 0.1, 0.8, 0.3]])
        for fusion, expect_nonzero in ((False, False), (True, True)):
            seq = sequence(4)
            T.tsum(kpe_select(seq, a_dot, 0.5, fusion).states).backward()
            discarded = seq.states.grad[0, [2, 4]]
            assert bool(np.any(discarded != 0)) is expect_nonzero
            assert np.all(seq.states.grad[0, [0, 1, 3]] != 0)

    @settings(max_examples=300, deadline=None)
    @given(st.data())
    def test_matches_sort_oracle(self, data):
        n = data.draw(st.integers(2, 64))
        scores = data.draw(st.lists(st.floats(0, 1), min_size=n, max_size=n, unique=True))
        alpha = data.draw(st.floats(1.0 / n + 1e-6, 1.0))
        u = keep_count(n, alpha)
        out = kpe_select(sequence(n, d=2), np.array([scores]), alpha, fusion_enabled=False)
        oracle = sorted(range(n), key=lambda i: -scores[i])[:u]
        assert set(out.grid_indices[0, 1:]) == set(oracle)


class TestTPA:
    def test_gamma_one_keeps_every_retained_patch(self):
        seq = kpe_select(sequence(10), np.random.default_rng(0).random((1, 10)), 0.5)
        out = tpa_select(seq, np.random.default_rng(1).random((1, 10)), 1.0)
        np.testing.assert_array_equal(out.grid_indices, seq.grid_indices)
        assert not out.has_fusion_token

    def test_base_scale_seed_count(self):
        kept = kpe_select(sequence(196, d=2), np.random.default_rng(0).random((1, 196)), 0.7)
        assert tpa_select(kept, np.random.default_rng(0).random((1, 196)), 0.2).patch_count == 27

    def test_lookup_through_grid_indices(self):
        a_dot = np.array([[0.0, 0.9, 0.0, 0.2, 0.0, 0.7, 0.6, 0.1, 0.0, 0.3]])
        kept = kpe_select(sequence(10), a_dot, 0.5)  # retains grid 1, 3, 5, 6, 9
        out = tpa_select(kept, a_dot, 0.4)
        np.testing.assert_array_equal(out.grid_indices, [[-1, 1, 5]])

    def test_zero_seeds_rejected(self):
        with pytest.raises(ConfigError):
            tpa_select(sequence(3), np.array([[0.1, 0.2, 0.3]]), 0.2)

    @settings(max_examples=300, deadline=None)
    @given(st.data())
    def test_matches_sort_oracle(self, data):
        n = data.draw(st.integers(2, 64))
        scores = data.draw(st.lists(st.floats(0, 1), min_size=n, max_size=n, unique=True))
        gamma = data.draw(st.floats(1.0 / n + 1e-6, 1.0))
        out = tpa_select(sequence(n, d=2), np.array([scores]), gamma)
        oracle = sorted(range(n), key=lambda i: -scores[i])[: keep_count(n, gamma)]
        assert set(out.grid_indices[0, 1:]) == set(oracle)


class TestPAD:
    def setup_method(self):
        self.pad = PatchAbstractionDecoder(8, 2, 2, np.random.default_rng(0))

    def test_output_length_independent_of_memory(self):
        seeds = sequence(3, d=8)
        for n in (5, 17, 60):
            assert self.pad(seeds, sequence(n, d=8, seed=n)).slots == 4

    def test_zero_cross_value_ignores_memory(self):
        for block in self.pad.blocks:
            block.cross.v.weight.data[:] = 0.0
            block.cross.v.bias.data[:] = 0.0
        seeds = sequence(3, d=8)
        out_a = self.pad(seeds, sequence(6, d=8, seed=1)).states.data
        out_b = self.pad(seeds, sequence(9, d=8, seed=2)).states.data
        # recompute without the cross sublayer: only its output bias survives
        x = seeds.states
        for block in self.pad.blocks:
            h, _ = block.attn(block.ln1(x))
            x = x + h + block.cross.o.bias
            x = x + block.ffn(block.ln2(x))
        np.testing.assert_allclose(out_a, out_b, atol=1e-12)
        np.testing.assert_allclose(out_a, self.pad.ln_f(x).data, atol=1e-12)

    def test_sensitive_to_every_memory_token(self):
        seeds = sequence(2, d=8)
        memory = sequence(5, d=8, seed=3)
        base = self.pad(seeds, memory).states.data
        for slot in range(memory.slots):
            bumped = memory.states.data.copy()
            bumped[0, slot] += 0.1
            moved = self.pad(seeds, PatchSequence(T.as_tensor(bumped), memory.grid_indices)).states.data
            assert np.abs(moved - base).max() > 1e-8

    def test_empty_memory(self):
        empty = PatchSequence(T.as_tensor(np.zeros((1, 0, 8))), np.zeros((1, 0), dtype=np.int64))
        with pytest.raises(StateError):
            self.pad(sequence(2, d=8), empty)
