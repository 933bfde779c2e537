import json

import pytest
from click.testing import CliRunner

from occlusiongames.__main__ import EXIT_ERROR, EXIT_OK, EXIT_QUALITY, cli
from occlusiongames.config import world_document, write_config
from occlusiongames.experiments import CROSSING_ROAD_STUDY, SAMPLERS
from occlusiongames.formats import read_ndjson, write_observations
from occlusiongames.game import VisibilityModel, VisibilitySchedule
from occlusiongames.inverse import simulate_observations
from occlusiongames.nash import solve_olne
from occlusiongames.pipeline import World

from .games import crossing_game, occluded_world, three_agent_game


@pytest.fixture
def run(tmp_path):
    runner = CliRunner()

    def run(*args):
        return runner.invoke(
            cli, ["--quiet", "--output-dir", str(tmp_path / "out"), *args]
        )

    return run


def _game_config(tmp_path, world=None, **sections):
    world = world or occluded_world()
    return write_config(tmp_path / "game.yaml", world_document(world, **sections))


def test_version(run):
    result = run("version")
    assert result.exit_code == EXIT_OK
    assert result.output.strip()


def test_validate(run, tmp_path):
    result = run("validate", "--config", str(_game_config(tmp_path)))
    assert result.exit_code == EXIT_OK
    assert "valid SolveConfig" in result.output

    broken = tmp_path / "broken.yaml"
    broken.write_text("version: 1\nkind: game\n")
    assert run("validate", "--config", str(broken)).exit_code == EXIT_ERROR


def test_solve(run, tmp_path):
    path = _game_config(tmp_path)
    result = run("solve", "--config", str(path), "--format", "csv")
    assert result.exit_code == EXIT_OK, result.output

    out = tmp_path / "out"
    data = json.loads((out / "game.result.json").read_text())
    assert data["converged"]
    assert (out / "game.trajectories.csv").is_file()
    manifest = json.loads((out / "game.solve.manifest.json").read_text())
    assert manifest["command"] == "solve"
    assert str(out / "game.result.json") in manifest["outputs"]


def test_solve_contingency(run, tmp_path):
    path = _game_config(
        tmp_path,
        contingency={"ego": 0, "occluded": [2], "belief": 0.7, "branching_step": 2},
    )
    result = run("solve", "--config", str(path), "--format", "csv")
    assert result.exit_code == EXIT_OK, result.output
    out = tmp_path / "out"
    data = json.loads((out / "game.result.json").read_text())
    assert data["schema"] == "occlusiongames.contingency-plan/1"
    assert (out / "game.theta1.trajectories.csv").is_file()
    assert (out / "game.theta2.trajectories.csv").is_file()


def test_solve_not_converged(run, tmp_path):
    world = World(
        three_agent_game(proximity=5.0),
        VisibilitySchedule.static(VisibilityModel.full([0, 1, 2])),
    )
    path = _game_config(
        tmp_path, world, solver={"max_iterations": 1, "kkt_tolerance": 1e-12}
    )
    assert run("solve", "--config", str(path)).exit_code == EXIT_QUALITY


def _estimate_config(tmp_path):
    game = crossing_game()
    document = {
        "version": 1,
        "kind": "estimate",
        "template": world_document(occluded_world())["world"]["game"],
        "estimator": {"max_outer": 10},
    }
    document["template"]["agents"] = document["template"]["agents"][:2]
    return game, write_config(tmp_path / "estimate.yaml", document)


def test_estimate(run, tmp_path):
    game, config = _estimate_config(tmp_path)
    truth = solve_olne(game)
    observations = simulate_observations(
        game, truth, VisibilityModel.full(game.agent_ids), 0.0, seed=2
    )
    path = write_observations(tmp_path / "obs.csv", observations)

    result = run("estimate", "--config", str(config), "--observations", str(path))
    assert result.exit_code in (EXIT_OK, EXIT_QUALITY), result.output
    data = json.loads((tmp_path / "out" / "obs.estimate.json").read_text())
    assert data["agent_ids"] == [0, 1]


def test_estimate_missing_observations(run, tmp_path):
    _, config = _estimate_config(tmp_path)
    result = run(
        "estimate",
        "--config",
        str(config),
        "--observations",
        str(tmp_path / "missing.csv"),
    )
    assert result.exit_code == EXIT_ERROR


def test_wrong_document_kind(run, tmp_path):
    _, config = _estimate_config(tmp_path)
    assert run("solve", "--config", str(config)).exit_code == EXIT_ERROR


def test_pipeline(run, tmp_path):
    document = world_document(occluded_world())
    document.update(
        kind="pipeline",
        mode="aware",
        pipeline={"window": 2, "steps": 3, "horizon": 4, "branching_time": 0.6},
    )
    path = write_config(tmp_path / "sim.yaml", document)

    result = run("pipeline", "--config", str(path), "--ignorant")
    assert result.exit_code == EXIT_OK, result.output
    header, *steps = read_ndjson(tmp_path / "out" / "sim.ignorant.trace.ndjson")
    assert header["kind"] == "ignorant"
    assert header["completed"]
    assert len(steps) == 3
    manifest = json.loads(
        (tmp_path / "out" / "sim.ignorant.pipeline.manifest.json").read_text()
    )
    assert len(manifest["timings"]["steps"]) == 3


def test_experiment(run, tmp_path):
    document = {
        "version": 1,
        "kind": "experiment",
        "experiment": {
            "kind": "estimation-sweep",
            "seeds": 2,
            "sigmas": [0.0],
            "num_resamples": 100,
            "failure_threshold": 1.0,
        },
        "scenario": {"kind": "three-agent", "horizon": 6},
        "estimator": {"max_outer": 5},
    }
    path = write_config(tmp_path / "sweep.yaml", document)
    result = run("experiment", "--config", str(path), "--workers", "1")
    assert result.exit_code == EXIT_OK, result.output

    out = tmp_path / "out" / "sweep"
    header, *samples = read_ndjson(out / "samples.ndjson")
    assert header["kind"] == "estimation-sweep"
    assert [sample["sample"] for sample in samples] == [0, 1]
    report = json.loads((out / "report.json").read_text())
    assert report["samples"] == 2
    assert (out / "summary.csv").is_file()
    assert (out / "experiment.manifest.json").is_file()


def test_experiment_failures_exit_with_quality_code(run, tmp_path, monkeypatch):
    def broken(config, sample):
        raise ValueError("diverged")

    monkeypatch.setitem(
        SAMPLERS, CROSSING_ROAD_STUDY, (SAMPLERS[CROSSING_ROAD_STUDY][0], broken)
    )
    document = {
        "version": 1,
        "kind": "experiment",
        "experiment": {
            "kind": "crossing-road",
            "seeds": 3,
            "num_resamples": 100,
            "failure_threshold": 0.5,
        },
    }
    path = write_config(tmp_path / "road.yaml", document)
    result = run(
        "experiment", "--config", str(path), "--workers", "1", "--format", "json"
    )
    assert result.exit_code == EXIT_QUALITY, result.output

    out = tmp_path / "out" / "road"
    _, *samples = read_ndjson(out / "samples.ndjson")
    assert [sample["status"] for sample in samples] == ["failed"] * 3
    assert samples[0]["message"] == "diverged"
    assert (out / "summary.json").is_file()
    assert (out / "experiment.manifest.json").is_file()
