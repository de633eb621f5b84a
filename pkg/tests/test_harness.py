"""Tests for the experiment harness."""

import logging
import math

import pandas as pd
import pytest

from ceharq.config import ConfigError, ThresholdSource, build_sim_config
from ceharq.core.harness import (
    MissingThresholdTable,
    ablation,
    avg_rounds_experiment,
    build_phy,
    check_comparable,
    compare,
    load_trials,
    resolve_thresholds,
    run_experiment,
)
from ceharq.core.metrics import SUMMARY_COLUMNS
from ceharq.core.threshold import ThresholdEntry, ThresholdTable
from ceharq.models import ExperimentRun, RunStatus
from ceharq.models.database import get_session


def make_sim(**values):
    defaults = {
        "label": "test",
        "phy": "uncoded",
        "k": 200,
        "max_rounds": 3,
        "snr_list": [1.0, 3.0],
        "trials": 32,
        "master_seed": 5,
        "tau": 0.05,
    }
    return build_sim_config({**defaults, **values})


class TestRunExperiment:
    def test_outputs(self, test_config, temp_dir):
        """A run writes its summary, diagnostics, trial log and config."""
        out_dir = temp_dir / "run"
        result = run_experiment(make_sim(), test_config, out_dir=out_dir, workers=1)

        summary = pd.read_csv(out_dir / "summary.csv")
        assert list(summary.columns) == SUMMARY_COLUMNS
        assert list(summary.snr_db) == [1.0, 3.0]
        assert (summary.trials == 32).all()
        for name in ("diagnostics.csv", "config.conf", "ce_bound.csv"):
            assert (out_dir / name).exists()

        assert load_trials(out_dir / "trials.jsonl") == result.records
        assert result.out_dir == out_dir

    def test_clean_channel(self, test_config):
        """Infinite SNR: no errors, one round, SE = K/N."""
        sim = make_sim(phy="convolutional", snr_list=[math.inf], trials=16)
        result = run_experiment(sim, test_config, workers=1, write=False)
        summary = result.summaries[0]
        assert summary.bler == 0.0
        assert summary.avg_rounds == 1.0
        assert summary.spectral_efficiency == pytest.approx(200 / 412)

    def test_geometry_mismatch(self, test_config):
        """An explicit n must match the PHY."""
        with pytest.raises(ConfigError, match="n = 999"):
            build_phy(make_sim(n=999), test_config)

    def test_worker_count_irrelevant(self, test_config):
        """Trial records do not depend on the number of workers."""
        sim = make_sim(snr_list=[2.0])
        serial = run_experiment(sim, test_config, workers=1, write=False)
        parallel = run_experiment(sim, test_config, workers=2, write=False)
        assert serial.records == parallel.records

    def test_records_run(self, test_config):
        """Completed runs land in the registry with their points."""
        result = run_experiment(make_sim(label="registry"), test_config, workers=1)
        assert result.run_id is not None

        with get_session() as session:
            run = session.query(ExperimentRun).filter_by(id=result.run_id).one()
            assert run.label == "registry"
            assert run.master_seed == "5"
            assert run.status == RunStatus.COMPLETED
            assert run.finished_at is not None
            assert run.error_message is None
            assert run.out_dir == str(result.out_dir)
            assert len(run.points) == 2

    def test_failed_run_recorded(self, test_config):
        """A run that raises is stored as FAILED with the error text."""
        sim = make_sim(label="broken", threshold_source="table")
        with pytest.raises(MissingThresholdTable):
            run_experiment(sim, test_config, workers=1)

        with get_session() as session:
            run = session.query(ExperimentRun).filter_by(label="broken").one()
            assert run.status == RunStatus.FAILED
            assert "MissingThresholdTable" in run.error_message
            assert run.finished_at is not None
            assert run.points == []

    def test_no_registry_without_write(self, test_config):
        """Dry runs leave the registry untouched."""
        result = run_experiment(make_sim(label="dry"), test_config, workers=1, write=False)
        assert result.run_id is None

    def test_aic_ac_substitution_logged(self, test_config, caplog):
        """Dense AIC-AC errors fall back to the message with a warning."""
        sim = make_sim(protocol="aic_ac", snr_list=[-20.0], trials=8, max_rounds=2)
        with caplog.at_level(logging.WARNING, logger="ceharq.core.harness"):
            run_experiment(sim, test_config, workers=1, write=False)
        assert "AIC-AC rounds sent the message" in caplog.text


class TestThresholds:
    def test_fixed(self, test_config):
        """A fixed source uses tau for every SNR."""
        sim = make_sim(tau=0.03)
        plans, table = resolve_thresholds(sim, test_config, build_phy(sim, test_config), None)
        assert table is None
        assert {plan.tau for plan in plans.values()} == {0.03}

    def test_baselines_ignore_tau(self, test_config):
        """HARQ never compresses."""
        sim = make_sim(protocol="harq", tau=0.03)
        plans, _ = resolve_thresholds(sim, test_config, build_phy(sim, test_config), None)
        assert {plan.tau for plan in plans.values()} == {0.0}

    def test_missing_table(self, test_config):
        """A table source without a file says how to make one."""
        sim = make_sim(threshold_source="table")
        with pytest.raises(MissingThresholdTable, match="threshold-search"):
            run_experiment(sim, test_config, write=False)

    def test_missing_pe_table(self, test_config, temp_dir):
        """An analytic source needs a P_e table."""
        sim = make_sim(threshold_source="analytic", pe_table=str(temp_dir / "absent.csv"))
        with pytest.raises(MissingThresholdTable, match="pe-table"):
            run_experiment(sim, test_config, write=False)

    def test_table_source(self, test_config, temp_dir):
        """Thresholds are interpolated from a table file and copied to the outputs."""
        path = temp_dir / "tau.csv"
        ThresholdTable([ThresholdEntry(1.0, 0.02), ThresholdEntry(3.0, 0.06)]).to_csv(path)
        sim = make_sim(threshold_source="table", threshold_table=str(path), snr_list=[2.0])
        out_dir = temp_dir / "table_run"
        result = run_experiment(sim, test_config, out_dir=out_dir, workers=1)
        assert result.thresholds[2.0].tau == pytest.approx(0.04)
        assert (out_dir / "thresholds.csv").exists()
        assert "tau_star" in pd.read_csv(out_dir / "diagnostics.csv").columns

    def test_per_round_table(self, test_config, temp_dir):
        """Per-round mode hands one threshold per round to the sessions."""
        path = temp_dir / "rounds.csv"
        ThresholdTable([
            ThresholdEntry(2.0, 0.02, round_index=2),
            ThresholdEntry(2.0, 0.04, round_index=3),
        ]).to_csv(path)
        sim = make_sim(
            threshold_source="table",
            threshold_table=str(path),
            threshold_mode="per_round",
            snr_list=[2.0],
        )
        plans, _ = resolve_thresholds(sim, test_config, build_phy(sim, test_config), None)
        assert plans[2.0].round_thresholds == (0.0, 0.02, 0.04)


class TestCompare:
    def test_tau_zero_equals_harq(self, test_config, temp_dir):
        """CE-HARQ with tau* = 0 pairs with HARQ at zero difference."""
        sims = [
            make_sim(label="harq", protocol="harq", phy="convolutional", snr_list=[-4.0]),
            make_sim(label="ce0", phy="convolutional", tau=0.0, snr_list=[-4.0]),
        ]
        comparison = compare(sims, test_config, out_dir=temp_dir / "cmp", workers=1)
        row = comparison.frame.iloc[0]
        assert row["delta_bler_ce0"] == 0.0
        assert row["delta_rounds_ce0"] == 0.0
        assert row["bler_harq"] == row["bler_ce0"]
        assert (temp_dir / "cmp" / "comparison.csv").exists()
        assert (temp_dir / "cmp" / "ce0" / "summary.csv").exists()

    @pytest.mark.parametrize(
        "override", [{"trials": 16}, {"master_seed": 6}, {"snr_list": [1.0]}, {"k": 100}]
    )
    def test_incomparable(self, test_config, override):
        """Paired runs need the same trials, seed, grid and geometry."""
        with pytest.raises(ConfigError):
            check_comparable([make_sim(label="a"), make_sim(label="b", **override)], test_config)

    def test_duplicate_labels(self, test_config):
        """Labels name the output columns and must differ."""
        with pytest.raises(ConfigError, match="distinct"):
            check_comparable([make_sim(), make_sim()], test_config)

    def test_ablation(self, test_config, temp_dir):
        """The tuned threshold is compared with always compressing."""
        result = ablation(make_sim(snr_list=[2.0]), test_config, out_dir=temp_dir / "abl")
        assert [r.sim.label for r in result.results] == ["tau_star", "tau_one"]
        assert result.results[1].sim.threshold_source == ThresholdSource.FIXED
        assert result.results[1].thresholds[2.0].tau == 1.0
        assert "delta_bler_tau_one" in result.frame.columns

    def test_ablation_needs_ce_harq(self, test_config):
        """Only CE-HARQ has a threshold to ablate."""
        with pytest.raises(ConfigError):
            ablation(make_sim(protocol="harq"), test_config, write=False)


class TestLatency:
    def test_latency_frame(self, test_config, temp_dir):
        """Latency runs use the rounds cap and write latency.csv."""
        sim = make_sim(rounds_cap=6, target_bler=0.05, snr_list=[2.0])
        out_dir = temp_dir / "lat"
        result, latency = avg_rounds_experiment(sim, test_config, out_dir=out_dir, workers=1)
        assert result.sim.rounds == 6
        row = latency.iloc[0]
        assert row["profile_avg_rounds"] == pytest.approx(row["avg_rounds"])
        assert 0.0 <= row["cap_failure_rate"] <= 1.0
        assert (out_dir / "latency.csv").exists()
