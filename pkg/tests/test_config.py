import pytest

from bus_vlp.config import KEYS, RunConfig, build_config, dump_config, keep_count, load_config, paper_config
from bus_vlp.errors import ConfigError


class TestLoad:
    def test_defaults(self):
        assert load_config() == RunConfig()

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# desk run\nkpe.alpha=0.5\nmodel.d = 32\n\ntrain.steps=7  # short\n")
        cfg = load_config(path, ["kpe.alpha=0.9"])
        assert (cfg.alpha, cfg.d, cfg.steps) == (0.9, 32, 7)

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="kpe.alpah"):
            load_config(overrides=["kpe.alpah=0.5"])

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 1"):
            load_config(overrides=["kpe.alpha"])

    def test_bad_value_type(self):
        with pytest.raises(ConfigError, match="model.d"):
            load_config(overrides=["model.d=wide"])

    def test_bool_spellings(self):
        assert load_config(overrides=["tpa.enabled=off"]).tpa_enabled is False
        assert load_config(overrides=["tpa.enabled=True"]).tpa_enabled is True
        with pytest.raises(ConfigError):
            load_config(overrides=["tpa.enabled=maybe"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.cfg")

    def test_unknown_profile(self):
        with pytest.raises(ConfigError, match="profile"):
            load_config(overrides=["profile=huge"])


class TestValidate:
    @pytest.mark.parametrize(
        "changes",
        [
            {"image_size": 30},
            {"d": 30},
            {"k": 0},
            {"k": 4},
            {"alpha": 0.0},
            {"gamma": 1.5},
            {"beta_max": 1.2},
            {"norm_kind": "zscore"},
            {"gamma": 0.01},
            {"pad_layers": 0},
        ],
    )
    def test_rejects(self, changes):
        with pytest.raises(ConfigError):
            RunConfig(**changes).validate()


class TestRoundTrip:
    def test_desk(self):
        cfg = load_config(overrides=["kpe.alpha=0.55", "optim.lr=0.0031", "kpe.fusion_token=false"])
        assert load_config(overrides=dump_config(cfg).splitlines()) == cfg

    def test_paper_profile(self):
        cfg = build_config({"profile": "paper", "tpa.gamma": "0.3"})
        assert cfg == paper_config(gamma=0.3)
        assert load_config(overrides=dump_config(cfg).splitlines()) == cfg

    def test_every_key_echoed(self):
        echoed = {line.split("=", 1)[0] for line in dump_config(RunConfig()).splitlines()}
        assert echoed == set(KEYS)


class TestCounts:
    def test_floor(self):
        assert keep_count(196, 0.7) == 137
        assert keep_count(137, 0.2) == 27
        assert keep_count(10, 0.7) == 7

    def test_desk_counts(self):
        cfg = RunConfig()
        assert (cfg.n_patches, cfg.kept_patches, cfg.seed_tokens) == (16, 11, 2)

    def test_kpe_disabled_keeps_all(self):
        assert RunConfig(kpe_enabled=False).kept_patches == 16
