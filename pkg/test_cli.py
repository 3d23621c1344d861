import json
from pathlib import Path

import pandas as pd
import pytest
from pydantic import ValidationError

import cli
from certificates import PRINTED_RDY_PARAMETERS
from cli import (
    EXIT_INVALID,
    EXIT_OK,
    EXIT_REFUSED,
    ExperimentConfig,
    LambdaGrid,
    main,
    parse_n_range,
    parse_tree,
)


def _read(path):
    return pd.read_csv(path, comment="#")


# -- parsing ----------------------------------------------------------------------

def test_parse_n_range():
    assert parse_n_range("2..10") == list(range(2, 11))
    assert parse_n_range("2,3,5") == [2, 3, 5]
    assert parse_n_range("4") == [4]


def test_parse_tree_shorthands():
    assert parse_tree("homogeneous:2") == {"family": "homogeneous", "n": 2}
    assert parse_tree("homogeneous:2:6")["depth_limit"] == 6
    assert parse_tree("star:64") == {"family": "star", "n": 64}
    assert parse_tree('{"family": "star", "n": 5}') == {"family": "star", "n": 5}


def test_lambda_grid_parsing():
    grid = LambdaGrid.parse("linear:0.3:1.0:8")
    assert grid.points()[0] == 0.3 and grid.points()[-1] == 1.0 and len(grid.points()) == 8
    assert LambdaGrid.parse("values:0.4,0.8").points() == [0.4, 0.8]
    assert LambdaGrid.parse("log:0.1:10:3").points() == pytest.approx([0.1, 1.0, 10.0])
    with pytest.raises(ValidationError):
        LambdaGrid(spacing="linear", start=0.1)


# -- documents ----------------------------------------------------------------------

def test_config_hash_ignores_outputs_and_jobs():
    base = {"command": "bounds", "params": {"n": [2, 3]}}
    one = ExperimentConfig.model_validate(base)
    two = ExperimentConfig.model_validate({**base, "jobs": 4, "outputs": {"csv": "x.csv"}})
    assert one.config_hash() == two.config_hash()
    assert one.config_hash() != ExperimentConfig.model_validate({**base, "seed": 1}).config_hash()


def test_document_rejects_unknown_fields():
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"command": "bounds", "colour": "red"})
    with pytest.raises(ValidationError, match="tree is required"):
        ExperimentConfig.model_validate({"command": "estimate", "experiment": "survival", "runs": 1, "seed": 1})


def test_schema_file_lists_every_field():
    with open(Path(__file__).parent / "experiment_config.schema.json", encoding="utf-8") as fp:
        schema = json.load(fp)
    assert set(schema["properties"]) == set(ExperimentConfig.model_fields)
    assert schema["required"] == ["command"]
    assert schema["additionalProperties"] is False


# -- commands -----------------------------------------------------------------------

def test_bounds_table(results_dir, capsys):
    out = results_dir / "bounds.csv"
    assert main(["bounds", "--n", "2..10", "--out", str(out)]) == EXIT_OK
    frame = _read(out)
    assert len(frame) == 9
    assert list(frame["n"]) == list(range(2, 11))
    assert "✅" in capsys.readouterr().out


def test_bounds_artifacts_are_deterministic(results_dir):
    first, second = results_dir / "a.csv", results_dir / "b.csv"
    assert main(["bounds", "--n", "2..6", "--out", str(first)]) == EXIT_OK
    assert main(["bounds", "--n", "2..6", "--out", str(second)]) == EXIT_OK
    assert first.read_bytes() == second.read_bytes()
    assert first.read_text(encoding="utf-8").startswith("# config_sha256=")


def test_default_artifact_paths_use_the_config_hash(results_dir):
    assert main(["bounds", "--n", "2"]) == EXIT_OK
    config = ExperimentConfig.model_validate({"command": "bounds", "params": {"n": [2]}})
    stem = f"bounds-{config.config_hash()[:12]}"
    assert (results_dir / f"{stem}.csv").exists()
    manifest = json.loads((results_dir / f"{stem}.json").read_text(encoding="utf-8"))
    assert manifest["config_sha256"] == config.config_hash()
    assert manifest["rows"] == 1


def test_certify_printed_triple(results_dir, capsys):
    p = PRINTED_RDY_PARAMETERS[2]
    argv = ["certify", "--scheme", "rdy", "--n", "2", "--lambda", str(p["lam"]),
            "--r", str(p["r"]), "--d", str(p["d"]), "--Y", str(p["Y"])]
    assert main(argv) == EXIT_OK
    assert "feasible within 1e-04 (2/4 strict)" in capsys.readouterr().out


def test_certify_recipe_is_strict(results_dir, capsys):
    assert main(["certify", "--scheme", "rdy", "--n", "3", "--lambda", "0.42", "--recipe"]) == EXIT_OK
    assert "feasible, 4/4 strict" in capsys.readouterr().out


def test_certify_infeasible_fails(results_dir, capsys):
    assert main(["certify", "--scheme", "exponential", "--n", "4", "--lambda", "0.3"]) == cli.EXIT_FAILED
    assert "❌" in capsys.readouterr().out


def test_invalid_config_exits_two(results_dir, capsys):
    argv = ["estimate", "--experiment", "survival", "--tree", "homogeneous:2",
            "--lambda", "0.5", "--horizon", "5", "--runs", "0", "--seed", "1"]
    assert main(argv) == EXIT_INVALID
    out = capsys.readouterr().out
    assert "invalid config" in out and "runs" in out


def test_missing_experiment_parameter_exits_two(results_dir, capsys):
    argv = ["estimate", "--experiment", "reach", "--tree", "homogeneous:2",
            "--lambda", "0.5", "--runs", "5", "--seed", "1"]
    assert main(argv) == EXIT_INVALID
    assert "params.distances" in capsys.readouterr().out


def test_star_theorem_refuses_small_star(results_dir, capsys):
    assert main(["star", "--experiment", "theorem", "--n", "64", "--a", "4"]) == EXIT_REFUSED
    assert "refused" in capsys.readouterr().out


def test_star_table(results_dir):
    out = results_dir / "star.csv"
    assert main(["star", "--experiment", "table", "--n", "16", "--a", "4", "--out", str(out)]) == EXIT_OK
    assert len(_read(out)) == 34


def test_simulate_writes_event_log(results_dir):
    out, log = results_dir / "sim.csv", results_dir / "sim.jsonl"
    argv = ["simulate", "--tree", "homogeneous:2", "--lambda", "0.8", "--horizon", "3",
            "--seed", "2", "--out", str(out), "--jsonl", str(log)]
    assert main(argv) == EXIT_OK
    frame = _read(out)
    lines = log.read_text(encoding="utf-8").splitlines()
    assert len(lines) == len(frame) + 2
    assert set(frame["event"]) <= {"infect", "recover"}


def test_estimate_survival_columns(results_dir):
    out = results_dir / "survival.csv"
    argv = ["estimate", "--experiment", "survival", "--tree", "homogeneous:2", "--lambda", "0.0",
            "--horizon", "5", "--runs", "50", "--seed", "3", "--out", str(out)]
    assert main(argv) == EXIT_OK
    frame = _read(out)
    for column in ("lam", "estimate", "ci_low", "ci_high", "runs", "successes", "censored", "seed", "died"):
        assert column in frame.columns
    assert frame.loc[0, "estimate"] == 0.0


def test_sweep_over_a_grid(results_dir):
    out = results_dir / "sweep.csv"
    argv = ["sweep", "--experiment", "survival", "--tree", "homogeneous:2", "--lam-grid", "values:0.0,0.5",
            "--horizon", "2", "--runs", "20", "--seed", "4", "--out", str(out)]
    assert main(argv) == EXIT_OK
    assert list(_read(out)["lam"]) == [0.0, 0.5]


def test_run_from_a_json_document(results_dir, tmp_path):
    out = results_dir / "doc.csv"
    document = {
        "command": "estimate",
        "experiment": "reach",
        "tree": {"family": "homogeneous", "n": 2},
        "lam": 0.3,
        "runs": 40,
        "seed": 5,
        "params": {"distances": [0, 2, 4]},
        "outputs": {"csv": str(out)},
    }
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    assert main(["run", "--config", str(path)]) == EXIT_OK
    frame = _read(out)
    assert list(frame["distance"]) == [0, 2, 4]
    assert frame.loc[0, "estimate"] == 1.0


def test_run_missing_document_exits_two(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_INVALID
    assert "cannot read config" in capsys.readouterr().out
