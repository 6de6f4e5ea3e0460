"""Config parsing, schema validation, presets, and the config hash."""

import dataclasses

import pytest

from mubench.config import (
    BenchConfig,
    config_from_dict,
    config_hash,
    desk_config,
    load_config,
    parse_config_text,
)
from mubench.errors import ConfigError
from mubench.methods import UNLEARN_METHOD_IDS


class TestParser:
    def test_scalars_and_lists(self):
        doc = parse_config_text(
            'dataset = "mnist"\n'
            "epochs = 12\n"
            "lr = 0.05\n"
            "augment = true\n"
            "seeds = [0, 1, 2]\n"
            'methods = ["ft", "ga"]\n'
        )
        assert doc == {
            "dataset": "mnist",
            "epochs": 12,
            "lr": 0.05,
            "augment": True,
            "seeds": [0, 1, 2],
            "methods": ["ft", "ga"],
        }

    def test_comments_and_blank_lines(self):
        doc = parse_config_text("# header\n\nepochs = 3  # trailing\n")
        assert doc == {"epochs": 3}

    def test_hash_inside_string_kept(self):
        assert parse_config_text('out_dir = "runs/#7"\n') == {"out_dir": "runs/#7"}

    def test_empty_list(self):
        assert parse_config_text("methods = []\n") == {"methods": []}

    @pytest.mark.parametrize(
        "line",
        [
            "[section]",
            "novalue",
            "epochs = ",
            "epochs = [1, 2",
            'name = "unterminated',
            "bad-key = 1",
            "epochs = what",
        ],
    )
    def test_malformed_lines_rejected(self, line):
        with pytest.raises(ConfigError):
            parse_config_text(line + "\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("epochs = 1\nepochs = 2\n")

    def test_error_names_file_and_line(self):
        with pytest.raises(ConfigError, match=r"bench\.cfg:2"):
            parse_config_text("epochs = 1\nbroken\n", path="bench.cfg")


class TestSchema:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            config_from_dict({"epcohs": 3})

    def test_list_field_requires_list(self):
        with pytest.raises(ConfigError, match="must be a list"):
            config_from_dict({"seeds": 3})

    def test_scalar_field_rejects_list(self):
        with pytest.raises(ConfigError, match="single value"):
            config_from_dict({"epochs": [1, 2]})

    def test_overrides_apply_over_base(self):
        cfg = config_from_dict({"epochs": 7, "seeds": [4, 5]}, base=desk_config())
        assert cfg.epochs == 7
        assert cfg.seeds == (4, 5)
        assert cfg.n_samples == 4000

    @pytest.mark.parametrize(
        "field,value,message",
        [
            ("dataset", "imagenet", "unknown dataset"),
            ("arch", "resnet", "unknown arch"),
            ("rte_clock", "cpu", "rte_clock"),
            ("seeds", (), "non-empty"),
            ("seeds", (1, 1), "duplicate"),
            ("methods", ("ft", "nope"), "unknown methods"),
            ("epochs", 0, "epochs"),
            ("pool", 0, "pool"),
            ("lr", 0.0, "lr"),
            ("label_noise", 1.0, "label_noise"),
            ("label_noise", -0.1, "label_noise"),
            ("input_contrast", 0.0, "input_contrast"),
            ("out_dir", "", "out_dir"),
        ],
    )
    def test_validation_errors(self, field, value, message):
        cfg = dataclasses.replace(BenchConfig(), **{field: value})
        with pytest.raises(ConfigError, match=message):
            cfg.validate()

    def test_real_dataset_needs_existing_path(self):
        cfg = dataclasses.replace(BenchConfig(), dataset="mnist", data_path="")
        with pytest.raises(ConfigError, match="needs data_path"):
            cfg.validate()
        cfg = dataclasses.replace(cfg, data_path="/definitely/not/here")
        with pytest.raises(ConfigError, match="does not exist"):
            cfg.validate()

    def test_synthetic_default_validates(self):
        assert BenchConfig().validate() is not None


class TestDeskPreset:
    def test_pinned_recipe(self):
        cfg = desk_config()
        assert cfg.dataset == "synth_blobs"
        assert (cfg.n_samples, cfg.n_classes) == (4000, 10)
        assert cfg.arch == "small_cnn"
        assert (cfg.epochs, cfg.lr, cfg.batch_size) == (30, 0.05, 64)
        assert cfg.seeds == (0, 1, 2, 3, 4)
        assert (cfg.sweeps, cfg.trials) == (3, 10)
        assert cfg.rte_clock == "steps"

    def test_covers_all_unlearning_methods(self):
        assert desk_config().methods == tuple(UNLEARN_METHOD_IDS)
        assert len(desk_config().methods) == 18

    def test_overrides(self):
        cfg = desk_config(out_dir="elsewhere", trials=2)
        assert cfg.out_dir == "elsewhere"
        assert cfg.trials == 2


class TestLoadConfig:
    def test_file_layered_over_preset(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 2\ntrials = 5\n")
        cfg = load_config(str(path), desk=True)
        assert cfg.epochs == 2
        assert cfg.trials == 5
        assert cfg.n_samples == 4000

    def test_explicit_overrides_beat_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 2\n")
        assert load_config(str(path), epochs=9).epochs == 9

    def test_missing_file_is_config_error(self):
        with pytest.raises(ConfigError, match="cannot read config"):
            load_config("/no/such/file.cfg")

    def test_env_overrides_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MUB_OUT", str(tmp_path / "env_out"))
        assert load_config(desk=True).out_dir == str(tmp_path / "env_out")

    def test_validation_runs_on_load(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 0\n")
        with pytest.raises(ConfigError):
            load_config(str(path))


class TestConfigHash:
    def test_stable_for_equal_configs(self):
        assert config_hash(desk_config()) == config_hash(desk_config())

    def test_sensitive_to_any_field(self):
        base = config_hash(desk_config())
        assert config_hash(desk_config(trials=11)) != base
        assert config_hash(desk_config(label_noise=0.1)) != base

    def test_hex_sha256_shape(self):
        h = config_hash(BenchConfig())
        assert len(h) == 64
        assert set(h) <= set("0123456789abcdef")
