import csv

import pytest

from bus_vlp.cli import MASK_COLUMNS, METRIC_COLUMNS, run
from bus_vlp.config import dump_config, load_config
from bus_vlp.synthdata import read_shard

TINY = [
    "--set", "model.d=16", "--set", "model.heads=2", "--set", "model.vit_layers=3",
    "--set", "model.text_layers=1", "--set", "model.fusion_layers=1", "--set", "model.pad_layers=1",
    "--set", "model.decoder_layers=1", "--set", "train.batch_d=2", "--set", "train.batch_o=2",
]


def read_rows(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


class TestTrain:
    def test_zero_steps_writes_header_only(self, tmp_path):
        assert run(["train", "--out", str(tmp_path), "--set", "train.steps=0"]) == 0
        assert read_rows(tmp_path / "metrics.csv") == [list(METRIC_COLUMNS)]
        assert not (tmp_path / "checkpoints").exists()

    def test_short_run(self, tmp_path):
        args = ["train", "--out", str(tmp_path), *TINY, "--set", "train.steps=3", "--set", "train.checkpoint_every=2"]
        assert run(args) == 0
        rows = read_rows(tmp_path / "metrics.csv")
        assert len(rows) == 4 and [r[0] for r in rows[1:]] == ["0", "1", "2"]
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["final.bin", "step-000002.bin"]

    def test_same_seed_is_reproducible(self, tmp_path):
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run(["train", "--out", str(out), *TINY, "--set", "train.steps=2", "--seed", "3"]) == 0
            # wall_ms is a timing, so it is the only column allowed to differ
            outputs.append(([r[:-1] for r in read_rows(out / "metrics.csv")], (out / "checkpoints" / "final.bin").read_bytes()))
        assert outputs[0] == outputs[1]

    def test_resume(self, tmp_path):
        first = tmp_path / "first"
        assert run(["train", "--out", str(first), *TINY, "--set", "train.steps=2"]) == 0
        second = tmp_path / "second"
        args = ["train", "--out", str(second), *TINY, "--set", "train.steps=3", "--resume", str(first / "checkpoints" / "final.bin")]
        assert run(args) == 0
        assert [r[0] for r in read_rows(second / "metrics.csv")[1:]] == ["2"]


class TestConfigErrors:
    def test_unknown_key_exit_2(self, tmp_path, capsys):
        assert run(["flops", "--out", str(tmp_path), "--set", "kpe.alfa=0.5"]) == 2
        assert "kpe.alfa" in capsys.readouterr().err

    def test_invalid_value_exit_2(self, tmp_path):
        assert run(["flops", "--out", str(tmp_path), "--set", "kpe.alpha=1.5"]) == 2

    def test_runtime_error_exit_1(self, tmp_path):
        assert run(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "missing.bin")]) == 1


class TestEffectiveConfig:
    def test_echo_reproduces_run(self, tmp_path):
        first = tmp_path / "first"
        assert run(["flops", "--out", str(first), "--set", "profile=paper", "--set", "kpe.alpha=0.6"]) == 0
        echo = first / "effective-config.txt"
        assert load_config(echo) == load_config(overrides=["profile=paper", "kpe.alpha=0.6"])
        second = tmp_path / "second"
        assert run(["flops", "--out", str(second), "--config", str(echo)]) == 0
        assert (second / "flops.txt").read_bytes() == (first / "flops.txt").read_bytes()
        assert (second / "effective-config.txt").read_text() == dump_config(load_config(echo))


class TestFlops:
    def test_base_profile_prints_ratio(self, tmp_path, capsys):
        assert run(["flops", "--out", str(tmp_path), "--set", "profile=paper"]) == 0
        assert "ratio=" in capsys.readouterr().out
        values = dict(line.split("=") for line in (tmp_path / "flops.txt").read_text().splitlines())
        assert 0 < float(values["ratio"]) < 1
        assert int(values["bus.total"]) == sum(int(v) for k, v in values.items() if k.startswith("bus.") and k != "bus.total")

    def test_sweep_csv(self, tmp_path):
        assert run(["flops", "--out", str(tmp_path), "--set", "profile=paper", "--sweep", "--resolutions", "384,512"]) == 0
        rows = read_rows(tmp_path / "flops.csv")
        assert len(rows) == 1 + 2 * 9

    def test_idempotent(self, tmp_path):
        for name in ("a", "b"):
            assert run(["flops", "--out", str(tmp_path / name), "--sweep"]) == 0
        for fname in ("flops.txt", "flops.csv", "effective-config.txt"):
            assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()


class TestSelect:
    def test_mask_file(self, tmp_path):
        assert run(["select", "--out", str(tmp_path), "--sample-seed", "4"]) == 0
        rows = read_rows(tmp_path / "masks" / "sample-4.csv")
        assert rows[0] == list(MASK_COLUMNS)
        body = rows[1:]
        assert [int(r[0]) for r in body] == list(range(16))
        kept = [int(r[4]) for r in body]
        seeds = [int(r[5]) for r in body]
        assert sum(kept) == 11 and sum(seeds) == 2
        assert all(k >= s for k, s in zip(kept, seeds))

    def test_idempotent(self, tmp_path):
        for name in ("a", "b"):
            assert run(["select", "--out", str(tmp_path / name), "--sample-seed", "1"]) == 0
        assert (tmp_path / "a" / "masks" / "sample-1.csv").read_bytes() == (tmp_path / "b" / "masks" / "sample-1.csv").read_bytes()


class TestGenData:
    @pytest.mark.parametrize("kind", ["paired", "region"])
    def test_shard(self, tmp_path, kind):
        assert run(["gen-data", "--out", str(tmp_path), "--kind", kind, "--count", "5"]) == 0
        samples = read_shard(tmp_path / "data" / f"{kind}.bin")
        assert len(samples) == 5 and all((s.box is not None) == (kind == "region") for s in samples)

    def test_seed_changes_data(self, tmp_path):
        for seed in ("1", "2"):
            assert run(["gen-data", "--out", str(tmp_path / seed), "--seed", seed, "--count", "3"]) == 0
        assert (tmp_path / "1" / "data" / "paired.bin").read_bytes() != (tmp_path / "2" / "data" / "paired.bin").read_bytes()


class TestEvalAndGradcheck:
    def test_eval_after_train(self, tmp_path):
        assert run(["train", "--out", str(tmp_path), *TINY, "--set", "train.steps=1"]) == 0
        args = ["eval", "--out", str(tmp_path), *TINY, "--set", "eval.samples=20", "--checkpoint", str(tmp_path / "checkpoints" / "final.bin")]
        assert run(args) == 0
        values = dict(line.split("=") for line in (tmp_path / "eval.txt").read_text().splitlines())
        assert 0.0 <= float(values["ptm_auc"]) <= 1.0 and int(values["samples"]) == 20

    def test_gradcheck_small_model(self, tmp_path, capsys):
        assert run(["gradcheck", "--out", str(tmp_path), *TINY, "--seed", "5"]) == 0
        assert "FAIL" not in (tmp_path / "gradcheck.txt").read_text()
