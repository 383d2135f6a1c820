import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.preprocessing import PolynomialFeatures

from bus_vlp.errors import DataError, FormatError
from bus_vlp.objectives import bbox_to_patch_labels
from bus_vlp.synthdata import (
    COLORS,
    KINDS,
    SPECIALS,
    VOCAB,
    Vocab,
    class_label_to_text,
    decode_shard,
    encode_shard,
    generate,
    read_shard,
    render_scene,
    shape_mask,
    write_shard,
)


class TestVocab:
    def test_specials_first_and_dense(self):
        assert VOCAB.words[: len(SPECIALS)] == list(SPECIALS)
        assert sorted(VOCAB.ids.values()) == list(range(len(VOCAB)))

    def test_round_trip(self):
        assert VOCAB.decode(VOCAB.encode("a red square left of a blue circle")) == "a red square left of a blue circle"

    def test_unknown_word(self):
        with pytest.raises(DataError, match="dog"):
            VOCAB.encode("a dog")


class TestClassLabel:
    def test_template(self):
        assert class_label_to_text("red square") == VOCAB.encode("this is a red square")

    def test_dog_with_extended_vocab(self):
        vocab = Vocab([*VOCAB.words, "dog"])
        assert vocab.decode(class_label_to_text("dog", vocab)) == "this is a dog"

    def test_empty_label(self):
        with pytest.raises(DataError):
            class_label_to_text("")


class TestGenerate:
    def test_deterministic(self):
        assert generate(11, "region") == generate(11, "region")
        assert generate(11, "paired") == generate(11, "paired")

    def test_scene_shapes_are_disjoint_and_distinct(self):
        for seed in range(200):
            shapes = render_scene(seed, 32)
            assert 1 <= len(shapes) <= 3
            assert len({s.color for s in shapes}) == len(shapes)
            masks = [shape_mask(s, 32) for s in shapes]
            assert sum(m.sum() for m in masks) == np.logical_or.reduce(masks).sum()

    def test_box_exactly_bounds_a_shape(self):
        for seed in range(200):
            sample = generate(seed, "region")
            x, y, w, h = sample.box
            color = np.array(COLORS[sample.label.split()[0]], dtype=np.uint8)
            hit = np.all(sample.image == color, axis=-1)
            rows, cols = np.nonzero(hit)
            assert (cols.min(), rows.min(), cols.max() - cols.min() + 1, rows.max() - rows.min() + 1) == (x, y, w, h)

    def test_labels_cover_every_touched_patch(self):
        # pixel-membership oracle: a patch is labelled iff a shape pixel lies in it
        for seed in range(200):
            sample = generate(seed, "region")
            color = np.array(COLORS[sample.label.split()[0]], dtype=np.uint8)
            hit = np.all(sample.image == color, axis=-1)
            touched = hit.reshape(4, 8, 4, 8).any(axis=(1, 3)).reshape(-1)
            labels = bbox_to_patch_labels(sample.box, 32, 8).astype(bool)
            assert np.all(labels[touched])

    def test_caption_color_matches_rgb(self):
        for seed in range(1000):
            sample = generate(seed, "paired")
            words = VOCAB.decode(sample.caption).split()
            color, kind = words[1], words[2]
            assert kind in KINDS
            shapes = [s for s in render_scene(seed, 32) if s.color == color and s.kind == kind]
            assert shapes
            x, y, w, h = shapes[0].box
            assert tuple(sample.image[y + h // 2, x + w // 2]) == COLORS[color]

    def test_captions_fit_text_length(self):
        assert max(len(generate(seed, "paired").caption) for seed in range(500)) <= 12

    def test_region_labels_are_learnable(self):
        # A linear probe cannot test "pixel equals the queried colour", so each pixel is
        # expanded into products of its channels with the query colour, then pooled per patch.
        poly = PolynomialFeatures(degree=6, interaction_only=True)
        feats, labels = [], []
        for seed in range(500):
            s = generate(seed, "region")
            pixels = s.pixels.reshape(4, 8, 4, 8, 3).transpose(0, 2, 1, 3, 4).reshape(16 * 64, 3)
            color = np.array(COLORS[s.label.split()[0]]) / 255.0
            per_pixel = poly.fit_transform(np.hstack([pixels, np.tile(color, (len(pixels), 1))]))
            feats.append(per_pixel.reshape(16, 64, -1).mean(axis=1))
            labels.append(bbox_to_patch_labels(s.box, 32, 8))
        x, y = np.vstack(feats), np.concatenate(labels)
        split = 16 * 400
        probe = LogisticRegression(max_iter=3000).fit(x[:split], y[:split])
        assert roc_auc_score(y[split:], probe.decision_function(x[split:])) > 0.95


class TestShard:
    def test_round_trip(self, tmp_path):
        samples = [generate(seed, "region" if seed % 2 else "paired") for seed in range(10)]
        assert read_shard(write_shard(tmp_path / "s.bin", samples)) == samples

    def test_empty(self, tmp_path):
        assert read_shard(write_shard(tmp_path / "e.bin", [])) == []

    def test_corrupt_header(self):
        buf = bytearray(encode_shard([generate(0)]))
        buf[1] ^= 0xFF
        with pytest.raises(FormatError):
            decode_shard(bytes(buf))

    def test_bad_version(self):
        buf = bytearray(encode_shard([generate(0)]))
        buf[4] = 9
        with pytest.raises(FormatError, match="version"):
            decode_shard(bytes(buf))

    def test_truncation_reports_offset(self):
        buf = encode_shard([generate(0)])
        with pytest.raises(FormatError, match="byte offset"):
            decode_shard(buf[:-3])
