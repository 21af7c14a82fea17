from __future__ import annotations

import json

import pytest

from smp_kit.cli import (
    EXIT_CHECKS_FAILED,
    EXIT_ERROR,
    EXIT_OK,
    SCHEMA_VERSION,
    RunConfig,
    execute,
    main,
    parse_config,
    results_payload,
)
from smp_kit.errors import ConfigurationError
from smp_kit.examples import build_example

SMALL = {"steps": 20, "paths": 500}


def config(**overrides) -> dict:
    base = {"command": "simulate", "problem": "concave_41", "numerics": dict(SMALL)}
    base.update(overrides)
    return base


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config({"command": "simulate", "problem": "concave_41"})
        assert cfg.numerics.steps == 200 and cfg.numerics.paths == 10_000
        assert cfg.seed == 42 and cfg.formats == ("json",) and cfg.numerics.tol_stat == "auto"

    def test_round_trip(self):
        cfg = parse_config(config(control={"kind": "constant", "value": [0.5]}, formats=["csv", "json"], seed=7))
        again = parse_config(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    @pytest.mark.parametrize(
        "data, key",
        [
            (config(numerics={"steps": 0}), "steps"),
            (config(numerics={"paths": "many"}), "paths"),
            (config(numerics={"tol_stat": "loose"}), "tol_stat"),
            (config(numerics={"grid": 3}), "grid"),
            (config(seed=-1), "seed"),
            (config(threads=0), "threads"),
            (config(formats=["xml"]), "formats"),
            (config(command="optimize"), "command"),
            (config(colour="red"), "colour"),
            ({"problem": "concave_41"}, "command"),
        ],
    )
    def test_errors_name_key(self, data, key):
        with pytest.raises(ConfigurationError, match=key):
            parse_config(data)

    def test_example_parameters_checked(self):
        with pytest.raises(ConfigurationError):
            parse_config(config(problem="nonconcave_44", example_params={"q12": 0.1}))

    def test_problem_file_is_inlined(self, tmp_path):
        problem = build_example("concave_41").problem.to_dict()
        (tmp_path / "p.json").write_text(json.dumps(problem))
        (tmp_path / "c.json").write_text(json.dumps(config(problem="p.json", control={"kind": "constant", "value": [1.0]})))
        cfg = parse_config(str(tmp_path / "c.json"))
        assert cfg.problem == problem

    def test_inline_json_text(self):
        assert parse_config(json.dumps(config())).command == "simulate"


class TestExecute:
    def test_envelope(self):
        env, code = execute(parse_config(config()))
        assert code == EXIT_OK
        assert env["schema_version"] == SCHEMA_VERSION
        assert env["config"]["numerics"]["steps"] == 20
        assert {"started", "elapsed_seconds"} <= set(env["timing"])

    def test_check_smp_negative_control(self):
        cfg = parse_config(config(command="check-smp", control={"kind": "constant", "value": [0.5]}))
        env, code = execute(cfg)
        assert code == EXIT_CHECKS_FAILED
        assert env["results"]["necessary"]["max_violation"] == pytest.approx(0.5, abs=1e-9)
        assert min(env["results"]["violation_by_node"]) == pytest.approx(0.5, abs=1e-9)

    def test_user_problem_needs_control(self):
        problem = build_example("concave_41").problem.to_dict()
        env, code = execute(parse_config(config(problem=problem)))
        assert code == EXIT_ERROR and "control" in env["error"]["message"]

    def test_blowup_writes_marker(self, tmp_path):
        problem = build_example("concave_41").problem.to_dict()
        problem["drift"] = {"x": [[2000.0]]}
        problem["x0"] = [1.0]
        cfg = parse_config(config(problem=problem, control={"kind": "constant", "value": [1.0]}, output=str(tmp_path)))
        env, code = execute(cfg)
        assert code == EXIT_ERROR
        assert env["error"]["type"] == "BlowUpError" and env["error"]["path"] == 0
        assert (tmp_path / "FAILED").exists() and (tmp_path / "report.json").exists()

    def test_inadmissible_control(self):
        env, code = execute(parse_config(config(control={"kind": "constant", "value": [2.0]})))
        assert code == EXIT_ERROR and env["error"]["type"] == "AdmissibilityError"

    def test_projection_flag(self):
        env, code = execute(parse_config(config(control={"kind": "constant", "value": [2.0]}, project=True)))
        assert code == EXIT_OK

    def test_csv_outputs(self, tmp_path):
        cfg = parse_config(config(command="solve-adjoint", output=str(tmp_path), formats=["json", "csv"]))
        _, code = execute(cfg)
        assert code == EXIT_OK
        assert {"report.json", "adjoint.csv", "ansatz.csv"} <= {p.name for p in tmp_path.iterdir()}

    def test_sorted_json(self, tmp_path):
        execute(parse_config(config(output=str(tmp_path))))
        text = (tmp_path / "report.json").read_text()
        data = json.loads(text)
        assert list(data) == sorted(data)

    @pytest.mark.parametrize("command", ["simulate", "solve-adjoint", "check-smp", "validate"])
    def test_thread_invariance(self, command):
        base = config(command=command, problem="nonsmooth_42", numerics={"steps": 10, "paths": 3000})
        one, _ = execute(parse_config({**base, "threads": 1}))
        many, _ = execute(parse_config({**base, "threads": 8}))
        assert results_payload(one) == results_payload(many)


class TestMain:
    def test_run_example_exit_code(self, tmp_path, capsys):
        code = main(["run-example", "concave_41", "--paths", "1000", "--steps", "20", "--output", str(tmp_path)])
        assert code == EXIT_OK
        assert "PASS" in capsys.readouterr().out

    def test_config_flag_overrides(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(config(command="check-smp", control={"kind": "constant", "value": [0.5]})))
        code = main(["check-smp", "--config", str(path), "--seed", "3", "--steps", "5"])
        out = json.loads(capsys.readouterr().out)
        assert code == EXIT_CHECKS_FAILED
        assert out["config"]["seed"] == 3 and out["config"]["numerics"]["steps"] == 5

    def test_validate(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(config()))
        assert main(["validate", str(path)]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["results"]["config"] == "valid"

    def test_bad_flag_value(self, tmp_path, capsys):
        code = main(["simulate", "concave_41", "--steps", "0", "--output", str(tmp_path)])
        assert code == EXIT_ERROR
        assert "steps" in capsys.readouterr().err
        assert (tmp_path / "FAILED").exists()

    def test_missing_config(self, capsys):
        assert main(["simulate", "--config", "/nonexistent/c.json"]) == EXIT_ERROR

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        assert main(["validate", str(path)]) == EXIT_ERROR


def test_run_config_is_frozen():
    cfg = parse_config(config())
    with pytest.raises(AttributeError):
        cfg.seed = 1  # type: ignore[misc]
    assert isinstance(cfg, RunConfig)
