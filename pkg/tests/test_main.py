"""Tests for the command-line interface."""

import io

import pandas as pd
import pytest

from ceharq.config import ConfigError, load_sim_config
from ceharq.main import PRESETS_DIR, build_parser, main, resolve_sim_path
from ceharq.models.database import reset_engine


@pytest.fixture(autouse=True)
def fresh_engine():
    """Each CLI invocation opens the database named by its own config."""
    reset_engine()
    yield
    reset_engine()


@pytest.fixture
def app_yaml(temp_dir):
    """Application config that keeps every output inside temp_dir."""
    path = temp_dir / "config.yaml"
    path.write_text(
        "simulation:\n"
        "  workers: 1\n"
        f"  out_dir: {temp_dir / 'results'}\n"
        "  chunk_size: 8\n"
        "  progress: false\n"
        "database:\n"
        f"  path: {temp_dir / 'runs.db'}\n"
    )
    return path


@pytest.fixture
def small_sim(write_sim):
    return write_sim(
        "small.conf",
        label="cli",
        phy="uncoded",
        k=200,
        max_rounds=3,
        snr_list="2.0",
        trials=16,
        tau=0.05,
    )


class TestParser:
    def test_no_command(self, capsys):
        """No command prints help and fails."""
        assert main([]) == 1
        assert "simulate" in capsys.readouterr().out

    def test_global_overrides(self):
        """Seed, trials and workers are global flags."""
        args = build_parser().parse_args(
            ["--seed", "3", "--trials", "10", "--workers", "2", "simulate", "desk_conv"]
        )
        assert (args.seed, args.trials, args.workers) == (3, 10, 2)
        assert args.sim_config == "desk_conv"


class TestPresets:
    def test_resolve_preset_name(self):
        """Preset names resolve to shipped files."""
        assert resolve_sim_path("desk_conv") == PRESETS_DIR / "desk_conv.conf"
        assert resolve_sim_path("desk_conv.conf") == PRESETS_DIR / "desk_conv.conf"

    def test_unknown_preset(self):
        """Unknown names list the presets."""
        with pytest.raises(ConfigError, match="desk_conv"):
            resolve_sim_path("no_such_preset")

    @pytest.mark.parametrize("path", sorted(PRESETS_DIR.glob("*.conf")), ids=lambda p: p.stem)
    def test_presets_load(self, path):
        """Every shipped preset is a valid config."""
        sim = load_sim_config(path)
        assert sim.label


class TestBounds:
    def test_csv_to_stdout(self, capsys):
        """bounds prints one CSV row per grid point."""
        assert main(["bounds", "--snr", "0", "--tau", "0.5,0.1"]) == 0
        frame = pd.read_csv(io.StringIO(capsys.readouterr().out))
        assert len(frame) == 2
        assert frame.capacity.iloc[0] == pytest.approx(0.4857, abs=1e-3)
        assert frame.max_rate.iloc[0] == pytest.approx(0.4857, abs=1e-3)

    @pytest.mark.parametrize("flag,value", [("--tau", "0.7"), ("--distortion", "-0.1")])
    def test_out_of_range_is_config_error(self, capsys, flag, value):
        """Sparsity outside [0, 0.5] or negative distortion exits with status 2."""
        assert main(["bounds", f"{flag}={value}"]) == 2
        assert "Configuration error" in capsys.readouterr().err


class TestSimulate:
    def test_writes_results(self, app_yaml, small_sim, temp_dir):
        """simulate writes the summary and trial log under the label."""
        assert main(["-c", str(app_yaml), "simulate", str(small_sim)]) == 0
        out_dir = temp_dir / "results" / "cli"
        summary = pd.read_csv(out_dir / "summary.csv")
        assert list(summary.snr_db) == [2.0]
        assert len((out_dir / "trials.jsonl").read_text().splitlines()) == 16

    def test_overrides(self, app_yaml, small_sim, temp_dir):
        """--seed, --trials and --out-dir reach the run."""
        out = temp_dir / "elsewhere"
        argv = ["-c", str(app_yaml), "--seed", "99", "--trials", "8", "--out-dir", str(out)]
        assert main(argv + ["simulate", str(small_sim)]) == 0
        saved = load_sim_config(out / "cli" / "config.conf")
        assert saved.master_seed == 99
        assert saved.trials == 8

    def test_workers_do_not_change_trials(self, app_yaml, small_sim, temp_dir):
        """--workers 1 and --workers 2 produce identical trial logs."""
        logs = []
        for workers in ("1", "2"):
            out = temp_dir / f"w{workers}"
            argv = ["-c", str(app_yaml), "--workers", workers, "--out-dir", str(out)]
            assert main(argv + ["simulate", str(small_sim)]) == 0
            logs.append((out / "cli" / "trials.jsonl").read_text())
        assert logs[0] == logs[1]

    def test_missing_config(self, app_yaml, temp_dir, capsys):
        """A missing config exits with status 2."""
        assert main(["-c", str(app_yaml), "simulate", str(temp_dir / "absent.conf")]) == 2
        assert "Configuration error" in capsys.readouterr().err

    def test_unknown_key(self, app_yaml, write_sim, capsys):
        """Unknown keys exit with status 2 and list the valid ones."""
        path = write_sim("bad.conf", snr="0")
        assert main(["-c", str(app_yaml), "simulate", str(path)]) == 2
        assert "Valid keys" in capsys.readouterr().err

    def test_missing_threshold_table(self, app_yaml, write_sim, capsys):
        """A table source without a table exits with status 2."""
        path = write_sim("table.conf", threshold_source="table", trials=4)
        assert main(["-c", str(app_yaml), "simulate", str(path)]) == 2
        assert "threshold-search" in capsys.readouterr().err


class TestRegistry:
    def test_runs_lists_simulation(self, app_yaml, small_sim, capsys):
        """runs shows recorded experiments."""
        assert main(["-c", str(app_yaml), "simulate", str(small_sim)]) == 0
        capsys.readouterr()
        assert main(["-c", str(app_yaml), "runs", "-n", "5"]) == 0
        assert "cli" in capsys.readouterr().out

    def test_init(self, app_yaml, temp_dir, monkeypatch):
        """init creates the database and a user config."""
        monkeypatch.setenv("HOME", str(temp_dir / "home"))
        assert main(["-c", str(app_yaml), "init"]) == 0
        assert (temp_dir / "runs.db").exists()
        assert (temp_dir / "home" / ".ceharq" / "config.yaml").exists()


class TestThresholdSearch:
    def test_grid_table(self, app_yaml, small_sim, temp_dir, capsys):
        """threshold-search writes a loadable table and prints tau*."""
        output = temp_dir / "tau.csv"
        argv = ["-c", str(app_yaml), "--trials", "4", "threshold-search", str(small_sim)]
        assert main(argv + ["-o", str(output)]) == 0
        assert "tau* =" in capsys.readouterr().out
        assert output.exists()
