"""Command-line interface: ``smp-kit <command> [target] [options]``.

Commands
--------
simulate        forward paths and cost estimate
solve-adjoint   adjoint processes (closed-form ansatz and/or regression)
check-smp       stationarity and sufficiency checks for one control
run-example ID  full report for one of the worked examples
validate CFG    schema check plus assumption spot checks

Exit codes: 0 when every check passes, 1 when a check fails, 2 on
configuration, I/O or numerical errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .adjoint import (
    AnsatzSolution,
    adjoint_bsde_spec,
    martingale_residuals,
    solve_bsde_backward,
)
from .chain import write_paths_csv
from .dynamics import ControlSpec, simulate_forward, estimate_cost, sup_moment, validate_assumptions, write_bundle_csv
from .errors import ConfigurationError, SmpKitError
from .examples import EXAMPLE_IDS, build_example, run_example
from .problems import AffineQuadraticProblem
from .smp import LABELS, check_necessary, check_sufficient, summary_table

SCHEMA_VERSION = "smp-kit/1"
COMMANDS = ("simulate", "solve-adjoint", "check-smp", "run-example", "validate")
FORMATS = ("json", "csv")
EXIT_OK, EXIT_CHECKS_FAILED, EXIT_ERROR = 0, 1, 2
FAMILY_LEVEL = 1e-3  # false-alarm rate of the martingale-residual test over all steps
MARTINGALE_FLOOR = 1e-6


@dataclass(frozen=True)
class Numerics:
    steps: int = 200
    paths: int = 10_000
    ode_step: float = 1e-3
    picard_iters: int = 50
    tol_stat: float | str = "auto"
    tol_ode: float = 1e-8
    probes: int = 200


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; ``to_dict`` output parses back to an equal object."""

    command: str
    problem: str | dict
    control: str | dict | None = None
    example_params: dict = field(default_factory=dict)
    numerics: Numerics = field(default_factory=Numerics)
    seed: int = 42
    output: str | None = None
    formats: tuple[str, ...] = ("json",)
    threads: int = 1
    csv_max_paths: int = 100
    project: bool = False

    def to_dict(self) -> dict:
        out = asdict(self)
        out["formats"] = list(self.formats)
        return out


_TOP_KEYS = {f for f in RunConfig.__dataclass_fields__}
_NUMERIC_KEYS = {f for f in Numerics.__dataclass_fields__}


def _expect(value, types, key: str, what: str):
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigurationError(f"config key {key!r} must be {what}, got bool")
    if not isinstance(value, types):
        raise ConfigurationError(f"config key {key!r} must be {what}, got {type(value).__name__}")
    return value


def _positive_int(value, key: str) -> int:
    _expect(value, int, key, "a positive integer")
    if value < 1:
        raise ConfigurationError(f"config key {key!r} must be a positive integer (>= 1), got {value}")
    return int(value)


def _positive_float(value, key: str) -> float:
    _expect(value, (int, float), key, "a positive number")
    if not (value > 0 and math.isfinite(value)):
        raise ConfigurationError(f"config key {key!r} must be a positive number, got {value}")
    return float(value)


def _parse_numerics(data: Any) -> Numerics:
    _expect(data, dict, "numerics", "an object")
    unknown = set(data) - _NUMERIC_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config key(s) numerics.{sorted(unknown)}; expected {sorted(_NUMERIC_KEYS)}")
    base = Numerics()
    tol = data.get("tol_stat", base.tol_stat)
    if isinstance(tol, str):
        if tol != "auto":
            raise ConfigurationError("config key 'tol_stat' must be a positive number or 'auto'")
    else:
        tol = _positive_float(tol, "tol_stat")
    return Numerics(
        steps=_positive_int(data.get("steps", base.steps), "steps"),
        paths=_positive_int(data.get("paths", base.paths), "paths"),
        ode_step=_positive_float(data.get("ode_step", base.ode_step), "ode_step"),
        picard_iters=_positive_int(data.get("picard_iters", base.picard_iters), "picard_iters"),
        tol_stat=tol,
        tol_ode=_positive_float(data.get("tol_ode", base.tol_ode), "tol_ode"),
        probes=_positive_int(data.get("probes", base.probes), "probes"),
    )


def parse_config(source: str | os.PathLike | Mapping, base_dir: str | os.PathLike | None = None) -> RunConfig:
    """Build a RunConfig from a mapping, a JSON file path or inline JSON text.

    A problem given as a file path is read here and stored inline, so the
    config echo replays without the file.
    """
    if isinstance(source, Mapping):
        data = dict(source)
    else:
        text = str(source)
        if text.lstrip().startswith("{"):
            data = json.loads(text)
        else:
            path = Path(text)
            with open(path, encoding="utf-8") as fh:  # OSError propagates as an I/O error
                data = json.load(fh)
            base_dir = base_dir or path.parent
    _expect(data, dict, "<root>", "an object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config key(s) {sorted(unknown)}; expected a subset of {sorted(_TOP_KEYS)}")
    for key in ("command", "problem"):
        if key not in data:
            raise ConfigurationError(f"config is missing required key {key!r}")
    command = _expect(data["command"], str, "command", "a string")
    if command not in COMMANDS:
        raise ConfigurationError(f"config key 'command' must be one of {list(COMMANDS)}, got {command!r}")

    problem = data["problem"]
    if isinstance(problem, str):
        if problem not in EXAMPLE_IDS:
            path = Path(problem)
            if not path.is_absolute() and base_dir is not None:
                path = Path(base_dir) / path
            with open(path, encoding="utf-8") as fh:
                problem = json.load(fh)
    if isinstance(problem, dict):
        AffineQuadraticProblem.from_dict(problem)  # schema check
    elif not isinstance(problem, str):
        raise ConfigurationError("config key 'problem' must be an example id, a file path or an object")

    control = data.get("control")
    if control is not None:
        _expect(control, (str, dict), "control", "a candidate name or an object")
        if isinstance(control, dict):
            _parse_control(control)

    params = _expect(data.get("example_params", {}), dict, "example_params", "an object")
    if params and not isinstance(problem, str):
        raise ConfigurationError("config key 'example_params' applies to built-in examples only")

    seed = _expect(data.get("seed", 42), int, "seed", "a 64-bit unsigned integer")
    if not 0 <= seed < 2**64:
        raise ConfigurationError(f"config key 'seed' must lie in [0, 2^64), got {seed}")
    output = data.get("output")
    if output is not None:
        _expect(output, str, "output", "a directory path string")
    formats = data.get("formats", ["json"])
    if isinstance(formats, str):
        formats = [f.strip() for f in formats.split(",") if f.strip()]
    _expect(formats, (list, tuple), "formats", "a list drawn from ['json', 'csv']")
    if not formats or any(f not in FORMATS for f in formats):
        raise ConfigurationError(f"config key 'formats' must be a non-empty subset of {list(FORMATS)}, got {formats}")
    formats = tuple(f for f in FORMATS if f in formats)
    project = _expect(data.get("project", False), bool, "project", "a boolean")

    cfg = RunConfig(
        command=command,
        problem=problem,
        control=control,
        example_params=dict(params),
        numerics=_parse_numerics(data.get("numerics", {})),
        seed=int(seed),
        output=output,
        formats=formats,
        threads=_positive_int(data.get("threads", 1), "threads"),
        csv_max_paths=_positive_int(data.get("csv_max_paths", 100), "csv_max_paths"),
        project=project,
    )
    if isinstance(problem, str):
        _load_example(cfg)  # rejects bad parameters early
    return cfg


def _parse_control(data: dict) -> ControlSpec:
    allowed = {"kind", "value", "name"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigurationError(f"unknown control key(s) {sorted(unknown)}; expected {sorted(allowed)}")
    kind = data.get("kind")
    if kind not in ("constant", "open_loop_grid"):
        raise ConfigurationError("control 'kind' must be 'constant' or 'open_loop_grid' (feedback rules are library-only)")
    if "value" not in data:
        raise ConfigurationError("control needs a 'value'")
    try:
        value = np.asarray(data["value"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"control 'value' must be numeric: {exc}") from exc
    name = str(data.get("name", f"{kind}:{json.dumps(data['value'])}"))
    if kind == "constant":
        return ControlSpec.constant(value, name)
    if value.ndim != 2:
        raise ConfigurationError("open_loop_grid 'value' must be an N x k nested list")
    return ControlSpec.open_loop(value, name)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _load_example(cfg: RunConfig):
    return build_example(cfg.problem, ode_step=cfg.numerics.ode_step, **cfg.example_params)


@dataclass
class _Resolved:
    spec: Any
    case: Any
    control: ControlSpec
    control_name: str
    ansatz: AnsatzSolution | None


def _resolve(cfg: RunConfig) -> _Resolved:
    case = None
    if isinstance(cfg.problem, str):
        case = _load_example(cfg)
        spec = case.spec
    else:
        spec = AffineQuadraticProblem.from_dict(cfg.problem).to_spec()
    ansatz = None
    if cfg.control is None:
        if case is None:
            raise ConfigurationError("config key 'control' is required for user-defined problems")
        name = case.optimal
        control = case.candidates[name]
        ansatz = case.adjoint_for(name)
    elif isinstance(cfg.control, str):
        if case is None or cfg.control not in case.candidates:
            names = [] if case is None else list(case.candidates)
            raise ConfigurationError(f"unknown control {cfg.control!r}; candidates are {names}")
        name = cfg.control
        control = case.candidates[name]
        ansatz = case.adjoint_for(name)
    else:
        control = _parse_control(cfg.control)
        name = control.name
        if case is not None and case.ansatz_any_control:
            ansatz = case.ansatz
    if cfg.project:
        control = replace(control, project=True)
    return _Resolved(spec, case, control, name, ansatz)


def _simulate(cfg: RunConfig, res: _Resolved):
    n = cfg.numerics
    return simulate_forward(res.spec, res.control, n.steps, n.paths, cfg.seed, cfg.threads)


def _cmd_simulate(cfg: RunConfig, out: "_Output") -> tuple[dict, list]:
    res = _resolve(cfg)
    bundle = _simulate(cfg, res)
    cost, se = estimate_cost(res.spec, bundle)
    xT = bundle.states[:, -1]
    occupancy = np.bincount(bundle.regimes[:, -1], minlength=res.spec.d) / bundle.P
    results = {
        "control": res.control_name,
        "cost": {"mean": cost, "std_error": se},
        "terminal_state": {"mean": xT.mean(axis=0).tolist(), "std": xT.std(axis=0).tolist()},
        "state_mean_by_node": bundle.states.mean(axis=0).tolist(),
        "sup_second_moment": sup_moment(bundle, 1),
        "terminal_regime_occupancy": occupancy.tolist(),
        "mean_jumps": float(np.mean([p.n_jumps for p in bundle.regime_paths])),
    }
    if "csv" in cfg.formats:
        out.csv("paths.csv", lambda fh: write_bundle_csv(bundle, fh, cfg.csv_max_paths))
        out.csv("regimes.csv", lambda fh: write_paths_csv(bundle.regime_paths[: cfg.csv_max_paths], fh))
    return results, []


def _cmd_solve_adjoint(cfg: RunConfig, out: "_Output") -> tuple[dict, list]:
    res = _resolve(cfg)
    bundle = _simulate(cfg, res)
    bsde = adjoint_bsde_spec(res.spec)
    sol = solve_bsde_backward(bsde, bundle, picard_iters=cfg.numerics.picard_iters)
    checks = []
    h_x = res.spec.h_x(bundle.states[:, -1], bundle.regimes[:, -1])
    term_err = float(np.max(np.abs(sol.p[:, -1] + h_x)))
    checks.append({"name": "terminal_identity", "passed": term_err <= 1e-12 * (1 + float(np.max(np.abs(h_x)))),
                   "value": term_err})
    means, ses = martingale_residuals(bsde, sol, bundle)
    z_crit = float(norm.ppf(1 - FAMILY_LEVEL / (2 * means.size)))
    zscores = np.abs(means) / np.maximum(ses, 1e-300)
    # the absolute floor covers the ridge bias when the fit is exact and SE ~ 0
    floor = MARTINGALE_FLOOR * (1 + float(np.max(np.abs(sol.p))))
    mart_ok = bool(np.all(np.abs(means) <= z_crit * ses + floor))
    checks.append({"name": "martingale_residual", "passed": mart_ok, "max_abs_mean": float(np.max(np.abs(means))),
                   "critical_z": z_crit, "floor": floor})
    results: dict[str, Any] = {
        "control": res.control_name,
        "regression": {
            "Y0_mean": sol.p[:, 0].mean(axis=0).tolist(),
            "Z_mean_by_node": sol.q.mean(axis=0).reshape(bundle.N, -1).tolist(),
            "Z_std_by_node": sol.q.std(axis=0).reshape(bundle.N, -1).tolist(),
            "terminal_identity_error": term_err,
            "martingale_residual_max_abs": float(np.max(np.abs(means))),
            "martingale_residual_max_z": float(np.max(np.where(ses > 0, zscores, 0.0))),
        },
    }
    if res.ansatz is not None:
        ana = res.ansatz.to_adjoint(res.spec, bundle)
        gap = float(np.sqrt(np.mean((ana.p - sol.p) ** 2)))
        se = float(np.mean(sol.p_se)) if sol.p_se is not None else 0.0
        limit = 3 * (se + 0.05)
        checks.append({"name": "ansatz_regression_agreement", "passed": gap <= limit, "l2_gap": gap, "limit": limit})
        results["ansatz"] = {
            "phi_0": res.ansatz.phi.values[0].tolist(),
            "psi_0": None if res.ansatz.psi is None else res.ansatz.psi.values[0].tolist(),
            "ode_residual": res.ansatz.max_residual,
            "l2_gap_to_regression": gap,
        }
        if "csv" in cfg.formats:
            out.csv("ansatz.csv", res.ansatz.write_csv)
    if "csv" in cfg.formats:
        out.csv("adjoint.csv", lambda fh: sol.write_csv(bundle, fh, cfg.csv_max_paths))
    return results, checks


def _cmd_check_smp(cfg: RunConfig, out: "_Output") -> tuple[dict, list]:
    res = _resolve(cfg)
    bundle = _simulate(cfg, res)
    if res.ansatz is not None:
        adjoint = res.ansatz.to_adjoint(res.spec, bundle)
        method = "ansatz"
    else:
        adjoint = solve_bsde_backward(adjoint_bsde_spec(res.spec), bundle, picard_iters=cfg.numerics.picard_iters)
        method = "regression"
    nec = check_necessary(res.spec, res.control, adjoint, bundle, tol=cfg.numerics.tol_stat)
    suff = check_sufficient(res.spec, adjoint, bundle, probes=max(cfg.numerics.probes, 100), seed=cfg.seed)
    results = {
        "control": res.control_name,
        "adjoint": method,
        "necessary": nec.to_dict(),
        "violation_by_node": nec.violation.max(axis=0).tolist(),
        "pass_fraction_by_node": nec.passed.mean(axis=0).tolist(),
        "sufficiency": suff.to_dict(),
    }
    checks = [{"name": "necessary_condition", "passed": nec.all_passed, "max_violation": nec.max_violation}]
    if "csv" in cfg.formats:
        def write(fh):
            import csv

            w = csv.writer(fh)
            w.writerow(["path_id", "step", "t", "passed", "violation", "label"])
            for k in range(min(bundle.P, cfg.csv_max_paths)):
                for j in range(bundle.N):
                    w.writerow([k, j, repr(float(bundle.grid[j])), int(nec.passed[k, j]),
                                repr(float(nec.violation[k, j])), LABELS[nec.labels[k, j]]])

        out.csv("stationarity.csv", write)
    out.summary = summary_table(nec)
    return results, checks


def _cmd_run_example(cfg: RunConfig, out: "_Output") -> tuple[dict, list]:
    if not isinstance(cfg.problem, str):
        raise ConfigurationError("run-example needs a built-in example id as 'problem'")
    case = _load_example(cfg)
    n = cfg.numerics
    report = run_example(case, n.steps, n.paths, cfg.seed, cfg.threads, probes=max(n.probes, 100))
    if "csv" in cfg.formats:
        out.csv("ansatz.csv", case.ansatz.write_csv)
    out.summary = "\n".join(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}" for c in report["checks"])
    return report, report["checks"]


def _cmd_validate(cfg: RunConfig, out: "_Output") -> tuple[dict, list]:
    res = _resolve(cfg) if cfg.control is not None or isinstance(cfg.problem, str) else None
    spec = res.spec if res is not None else AffineQuadraticProblem.from_dict(cfg.problem).to_spec()
    report = validate_assumptions(spec, seed=cfg.seed)
    results = {"config": "valid", "problem": spec.name, "assumptions": report.to_dict()}
    checks = [{"name": f"assumption[{k}]", "passed": v["passed"]} for k, v in report.checks.items()]
    return results, checks


_HANDLERS = {
    "simulate": _cmd_simulate,
    "solve-adjoint": _cmd_solve_adjoint,
    "check-smp": _cmd_check_smp,
    "run-example": _cmd_run_example,
    "validate": _cmd_validate,
}


class _Output:
    def __init__(self, directory: str | None):
        self.directory = Path(directory) if directory else None
        self.summary = ""
        self.written: list[str] = []

    def csv(self, name: str, writer) -> None:
        if self.directory is None:
            return
        self.directory.mkdir(parents=True, exist_ok=True)
        with open(self.directory / name, "w", newline="", encoding="utf-8") as fh:
            writer(fh)
        self.written.append(name)


def to_jsonable(obj):
    """Plain JSON types; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2)


def execute(cfg: RunConfig) -> tuple[dict, int]:
    """Run a configuration.  Returns the report envelope and the exit code."""
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    clock = time.perf_counter()
    out = _Output(cfg.output)
    envelope: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict()}
    try:
        results, checks = _HANDLERS[cfg.command](cfg, out)
        failed = [c["name"] for c in checks if not c["passed"]]
        code = EXIT_CHECKS_FAILED if failed else EXIT_OK
        envelope.update(status="checks_failed" if failed else "ok", failed_checks=failed, results=results)
    except (SmpKitError, OSError, ValueError) as exc:
        code = EXIT_ERROR
        detail = {"type": type(exc).__name__, "message": str(exc)}
        for attr in ("path", "step"):
            if hasattr(exc, attr):
                detail[attr] = getattr(exc, attr)
        envelope.update(status="error", error=detail, results=None)
        out.summary = f"error: {detail['type']}: {detail['message']}"
    envelope["exit_code"] = code
    envelope["timing"] = {"started": started, "elapsed_seconds": round(time.perf_counter() - clock, 3)}
    envelope["artifacts"] = out.written
    if out.directory is not None:
        out.directory.mkdir(parents=True, exist_ok=True)
        if "json" in cfg.formats or code == EXIT_ERROR:
            (out.directory / "report.json").write_text(dumps(envelope) + "\n", encoding="utf-8")
        marker = out.directory / "FAILED"
        if code == EXIT_ERROR:
            marker.write_text(envelope["error"]["message"] + "\n", encoding="utf-8")
        elif marker.exists():
            marker.unlink()
    envelope["summary"] = out.summary
    return envelope, code


def results_payload(envelope: dict) -> str:
    """Canonical JSON of the results section (the replay-deterministic part)."""
    return json.dumps(to_jsonable(envelope.get("results")), sort_keys=True)


# ---------------------------------------------------------------------------
# argv handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smp-kit", description="Weak stochastic maximum principle toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("target", nargs="?", help="example id (run-example, or any command) or config path (validate)")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--paths", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--output", help="directory for report.json and CSV files")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--format", dest="formats", help="comma-separated subset of json,csv")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    data: dict[str, Any] = {}
    base_dir = None
    config_path = args.config
    if args.command == "validate":
        if args.target is None and config_path is None:
            raise ConfigurationError("validate needs a config path")
        config_path = config_path or args.target
    if config_path is not None:
        with open(config_path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a JSON object")
        base_dir = Path(config_path).parent
    data["command"] = args.command
    if args.target is not None and args.command != "validate":
        data["problem"] = args.target
    if "problem" not in data:
        raise ConfigurationError(f"{args.command} needs an example id or a config with a 'problem'")
    numerics = dict(data.get("numerics", {}))
    if args.paths is not None:
        numerics["paths"] = args.paths
    if args.steps is not None:
        numerics["steps"] = args.steps
    data["numerics"] = numerics
    for key in ("seed", "output", "threads", "formats"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    return parse_config(data, base_dir=base_dir)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (SmpKitError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.output:
            out = Path(args.output)
            out.mkdir(parents=True, exist_ok=True)
            (out / "FAILED").write_text(f"{exc}\n", encoding="utf-8")
        return EXIT_ERROR
    envelope, code = execute(cfg)
    summary = envelope.pop("summary")
    if cfg.output is None:
        print(dumps(envelope))
    else:
        if summary:
            print(summary)
        print(f"status: {envelope['status']} (exit {code}); report in {cfg.output}")
    if code == EXIT_ERROR and summary:
        print(summary, file=sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
