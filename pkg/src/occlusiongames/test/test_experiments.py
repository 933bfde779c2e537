import json

import numpy as np
import pytest

from occlusiongames.context import RunManifest
from occlusiongames.experiments import (
    CROSSING_ROAD_STUDY,
    ESTIMATION_SWEEP,
    PLANNING_SWEEP,
    SAMPLERS,
    ExperimentConfig,
    Sample,
    aggregate,
    estimation_sample,
    run_experiment,
    run_sample,
    sample_stage,
    write_outcome,
)
from occlusiongames.formats import read_ndjson, read_table
from occlusiongames.game import Trajectory
from occlusiongames.scenarios import ScenarioConfig


def test_samples():
    config = ExperimentConfig(
        PLANNING_SWEEP,
        seeds=3,
        base_seed=10,
        agent_counts=(4, 6),
        branching_times=(2.0,),
    )
    samples = SAMPLERS[PLANNING_SWEEP][0](config)
    assert [s.index for s in samples] == list(range(6))
    assert [s.seed for s in samples[:3]] == [10, 11, 12]
    assert samples[3].parameters == {"agents": 6, "branching_time": 2.0}

    config = ExperimentConfig(ESTIMATION_SWEEP, seeds=2, sigmas=(0.0, 0.01))
    assert len(SAMPLERS[ESTIMATION_SWEEP][0](config)) == 4


def test_default_sigmas():
    config = ExperimentConfig(ESTIMATION_SWEEP)
    assert len(config.sigmas) == 11
    assert config.sigmas[-1] == pytest.approx(0.07)
    assert config.scenario_config.kind == "three-agent"


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig("survey")
    with pytest.raises(ValueError):
        ExperimentConfig(ESTIMATION_SWEEP, seeds=0)
    with pytest.raises(ValueError):
        ExperimentConfig(ESTIMATION_SWEEP, failure_threshold=1.5)


def test_failed_samples_are_recorded(monkeypatch):
    def broken(config, sample):
        raise RuntimeError("no luck")

    monkeypatch.setitem(
        SAMPLERS, CROSSING_ROAD_STUDY, (SAMPLERS[CROSSING_ROAD_STUDY][0], broken)
    )
    record = run_sample(ExperimentConfig(CROSSING_ROAD_STUDY), Sample(3, 7))
    assert record["status"] == "failed"
    assert record["sample"] == 3
    assert record["stage"] == "sample"
    assert record["error"] == "RuntimeError"
    assert record["message"] == "no luck"


def test_any_error_is_recorded_with_its_stage(monkeypatch):
    def broken(config, sample):
        with sample_stage("truth"):
            raise KeyError("agent 9")

    monkeypatch.setitem(
        SAMPLERS, ESTIMATION_SWEEP, (SAMPLERS[ESTIMATION_SWEEP][0], broken)
    )
    config = ExperimentConfig(
        ESTIMATION_SWEEP, seeds=2, sigmas=(0.0,), num_resamples=50
    )
    outcome = run_experiment(config, workers=1, progress=False)
    assert outcome.failures == 2
    assert not outcome.acceptable
    for record in outcome.records:
        assert record["stage"] == "truth"
        assert record["error"] == "KeyError"
        assert record["sigma"] == 0.0


def _crossing_record(index, d_min, status="ok"):
    if status != "ok":
        return {
            "sample": index,
            "seed": index,
            "status": status,
            "stage": "simulation",
            "error": "SimulationStopped",
            "message": "x",
        }
    values = {
        "d_min": d_min,
        "d_min_occluded": d_min + 1,
        "ade_visible": 0.1,
        "ade_occluded": 0.5,
        "ego_speed_before_reveal": 1.0,
        "fallbacks": 0,
        "iterations": 3.0,
    }
    return {
        "sample": index,
        "seed": index,
        "status": "ok",
        "methods": {"aware": values, "ignorant": dict(values, d_min=d_min / 2)},
    }


def test_aggregate():
    config = ExperimentConfig(
        CROSSING_ROAD_STUDY, num_resamples=200, failure_threshold=0.2
    )
    records = [_crossing_record(i, float(i + 1)) for i in range(4)]
    outcome = aggregate(config, records + [_crossing_record(4, 0.0, "failed")])

    assert outcome.failures == 1
    assert outcome.failure_rate == pytest.approx(0.2)
    assert outcome.acceptable
    assert outcome.key_names == ("method",)
    aware = outcome.groups[("aware",)]
    assert aware["d_min"].median == pytest.approx(2.5)
    assert aware["d_min"].count == 4
    assert outcome.groups[("ignorant",)]["d_min"].median == pytest.approx(1.25)

    outcome = aggregate(config, records[:2] + [_crossing_record(9, 0.0, "failed")])
    assert not outcome.acceptable


def test_write_outcome(tmp_path):
    config = ExperimentConfig(CROSSING_ROAD_STUDY, num_resamples=100)
    outcome = aggregate(config, [_crossing_record(i, float(i + 1)) for i in range(3)])
    manifest = RunManifest("experiment")
    write_outcome(outcome, tmp_path, manifest)

    metadata, rows = read_table(tmp_path / "summary.csv")
    assert metadata["schema"] == "occlusiongames.summary/1"
    assert {row["method"] for row in rows} == {"aware", "ignorant"}
    assert str(tmp_path / "report.json") in manifest.outputs


def test_estimation_sample():
    config = ExperimentConfig(
        ESTIMATION_SWEEP,
        scenario=ScenarioConfig(kind="three-agent", horizon=6),
    )
    record = estimation_sample(config, Sample(0, 1, {"sigma": 0.0, "level": 0}))
    assert record["status"] in ("ok", "failed")
    if record["status"] == "ok":
        assert record["occluded"] == [2]
        assert record["ignorant"]["ade_occluded"] is None
        assert record["aware"]["ade_occluded"] is not None
        assert 0 <= record["aware"]["mean_dissimilarity"] <= 2
        assert np.isfinite(record["aware"]["ade_visible"])


def _estimation_record(index):
    report = {
        "dissimilarity": {"0": 0.1, "1": 0.1, "2": 0.4},
        "mean_dissimilarity": 0.2,
        "ade_visible": 0.1 * (index + 1),
        "ade_occluded": 0.5,
    }
    return {
        "sample": index,
        "seed": index,
        "sigma": 0.0,
        "level": 0,
        "status": "ok",
        "occluded": [2],
        "aware": report,
        "ignorant": dict(report, ade_occluded=None),
    }


def test_write_outcome_json_with_snapshots(tmp_path):
    config = ExperimentConfig(ESTIMATION_SWEEP, sigmas=(0.0,), num_resamples=100)
    records = [_estimation_record(i) for i in range(3)]
    trajectory = Trajectory(np.zeros((3, 4)), np.zeros((2, 2)))
    records[0]["trajectories"] = {
        "truth": {0: trajectory},
        "aware/0.5": {0: trajectory},
    }
    manifest = RunManifest("experiment")
    write_outcome(aggregate(config, records), tmp_path, manifest, "json")

    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["schema"] == "occlusiongames.summary/1"
    assert {row["method"] for row in summary["rows"]} == {"aware", "ignorant"}
    assert not (tmp_path / "summary.csv").exists()

    metadata, rows = read_table(tmp_path / "trajectories-0-aware-0.5.csv")
    assert metadata["method"] == "aware/0.5"
    assert len(rows) == 3
    assert (tmp_path / "trajectories-0-truth.csv").is_file()
    assert str(tmp_path / "summary.json") in manifest.outputs

    _, *samples = read_ndjson(tmp_path / "samples.ndjson")
    assert all("trajectories" not in sample for sample in samples)
