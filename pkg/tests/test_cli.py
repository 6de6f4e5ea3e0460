"""Command-line surface: argument handling, exit codes, phase wiring."""

import json

import pytest

from mubench.cli import _parse_seeds, build_parser, main
from mubench.errors import ConfigError
from mubench.pipeline import Workspace


def write_cfg(tmp_path, out_dir, methods='["ft"]', extra=""):
    path = tmp_path / "bench.cfg"
    path.write_text(
        'dataset = "synth_blobs"\n'
        "n_samples = 500\n"
        "epochs = 3\n"
        "seeds = [0, 1]\n"
        "sweeps = 1\n"
        "trials = 2\n"
        f"methods = {methods}\n"
        f'out_dir = "{out_dir}"\n' + extra
    )
    return str(path)


class TestParsing:
    def test_subcommand_required(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
        capsys.readouterr()

    def test_all_subcommands_registered(self):
        parser = build_parser()
        sub = next(a for a in parser._actions if hasattr(a, "choices") and a.choices)
        assert set(sub.choices) == {
            "prepare", "train-refs", "sweep", "unlearn", "evaluate", "attack-lira", "report",
        }

    def test_seed_list(self):
        assert _parse_seeds("0,1,2") == (0, 1, 2)
        assert _parse_seeds("7") == (7,)
        with pytest.raises(ConfigError):
            _parse_seeds("a,b")
        with pytest.raises(ConfigError):
            _parse_seeds(",")


class TestExitCodes:
    def test_missing_config_file_is_2(self, capsys):
        assert main(["prepare", "--config", "/no/such/file.cfg"]) == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_phase_order_error_is_2(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, tmp_path / "run")
        assert main(["evaluate", "--config", cfg]) == 2
        assert "prepare" in capsys.readouterr().err

    def test_unknown_method_is_2(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, tmp_path / "run")
        assert main(["prepare", "--config", cfg]) == 0
        assert main(["train-refs", "--config", cfg]) == 0
        assert main(["sweep", "--config", cfg, "--method", "zzz"]) == 2
        assert "zzz" in capsys.readouterr().err

    def test_attack_lira_needs_method(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, tmp_path / "run")
        assert main(["attack-lira", "--config", cfg]) == 2
        assert "--method" in capsys.readouterr().err

    def test_full_run_exits_zero(self, tmp_path):
        cfg = write_cfg(tmp_path, tmp_path / "run")
        for argv in (["prepare"], ["train-refs"], ["sweep"], ["unlearn"], ["evaluate"], ["report"]):
            assert main(argv + ["--config", cfg]) == 0, argv

    def test_failed_method_propagates_one(self, tmp_path):
        cfg = write_cfg(tmp_path, tmp_path / "runf", methods='["ct", "ft"]', extra='arch = "mlp"\n')
        assert main(["prepare", "--config", cfg]) == 0
        assert main(["train-refs", "--config", cfg]) == 0
        # ct cannot touch conv weights on an mlp; ft still succeeds
        assert main(["sweep", "--config", cfg]) == 1
        assert main(["unlearn", "--config", cfg]) == 1
        assert main(["evaluate", "--config", cfg]) == 1


class TestOverrides:
    def test_seeds_flag_overrides_config(self, tmp_path):
        cfg = write_cfg(tmp_path, tmp_path / "run")
        assert main(["prepare", "--config", cfg, "--seeds", "3"]) == 0
        assert main(["train-refs", "--config", cfg, "--seeds", "3"]) == 0
        ws = Workspace(str(tmp_path / "run"))
        assert ws.original_ckpt(3).exists()
        assert not ws.original_ckpt(0).exists()

    def test_env_out_dir(self, tmp_path, monkeypatch):
        cfg = write_cfg(tmp_path, tmp_path / "ignored")
        monkeypatch.setenv("MUB_OUT", str(tmp_path / "env_run"))
        assert main(["prepare", "--config", cfg]) == 0
        assert (tmp_path / "env_run" / "splits.txt").exists()

    def test_desk_preset_flag(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("MUB_OUT", str(tmp_path / "desk"))
        assert main(["prepare", "--desk"]) == 0
        man = json.loads((tmp_path / "desk" / "manifest.json").read_text())
        sizes = man["dataset"]["sizes"]
        assert sizes == {"retain": 2448, "forget": 272, "val": 480, "test": 800}

    def test_jobs_flag_accepted(self, tmp_path):
        cfg = write_cfg(tmp_path, tmp_path / "run")
        assert main(["prepare", "--config", cfg, "--jobs", "2"]) == 0
        assert main(["train-refs", "--config", cfg, "--jobs", "2"]) == 0
        assert main(["sweep", "--config", cfg, "--jobs", "2"]) == 0
        assert main(["unlearn", "--config", cfg, "--jobs", "2"]) == 0
