"""Batch command-line front end.

Subcommands cover the full pipeline: forward simulation, adjoint solves, the
linear-quadratic oracle comparisons, duality/increment/ratio validation,
superdifferential probes, verification certificates, and control
optimization.  Every run writes its artifacts (CSV data, JSON reports,
binary kernel blocks) plus a manifest recording the scenario hash, stage
seeds, and content digests, sufficient for bit-exact replay.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import adjoint as adj
from . import analysis as ana
from . import lq_oracle as lq
from . import model as mdl
from . import simulate as sim
from .function_space import laplacian_array, spectral_basis
from .model import check_assumptions
from .scenario import STAGES, Scenario, ScenarioError, write_builtin_scenarios
from .simulate import dump_trajectory_csv

logger = logging.getLogger(__name__)


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True)
                    + "\n")


def write_kernel_blocks(prefix: Path, blocks: dict[int, np.ndarray],
                        grid, times, eta=None) -> list[Path]:
    """Dense kernel snapshots: row-major float64 blocks plus a JSON header."""
    indices = sorted(blocks)
    bin_path = prefix.with_suffix(".bin")
    with open(bin_path, "wb") as fh:
        for i in indices:
            fh.write(np.ascontiguousarray(blocks[i], dtype=np.float64).tobytes())
    header = {
        "n": grid.n, "h": grid.h, "eta": eta, "dtype": "float64",
        "order": "row-major", "indices": indices,
        "times": [float(times[i]) for i in indices],
        "block_shape": list(blocks[indices[0]].shape),
    }
    json_path = prefix.with_suffix(".json")
    write_json(json_path, header)
    return [bin_path, json_path]


class RunContext:
    """Shared per-run state: scenario, output directory, manifest assembly."""

    def __init__(self, scenario: Scenario, out_dir: Path, command: str):
        self.scenario = scenario
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.started = time.time()
        self.artifacts: list[Path] = []

    def record(self, *paths: Path) -> None:
        self.artifacts.extend(paths)

    def path(self, name: str) -> Path:
        return self.out / name

    def finish(self, status: str = "ok") -> Path:
        manifest = {
            "command": self.command,
            "code_version": __version__,
            "scenario": self.scenario.to_dict(),
            "scenario_hash": self.scenario.digest(),
            "stage_seeds": {name: [self.scenario.seed, idx]
                            for name, idx in STAGES.items()},
            "status": status,
            "wall_time": {"started": self.started, "ended": time.time()},
            "artifacts": {p.name: _sha256(p) for p in self.artifacts},
        }
        path = self.path(f"{self.command}_manifest.json")
        write_json(path, manifest)
        return path


def _lq_reference(scenario: Scenario):
    if scenario.model_name != "lq":
        raise ScenarioError(
            f"subcommand needs the linear-quadratic model, scenario uses "
            f"{scenario.model_name!r}")
    params = scenario.model_params
    grid = scenario.build_grid()
    model = scenario.build_model()
    spec = lq.lq_spec_from_model(
        model, grid, a=float(params.get("a", 0.0)),
        beta=params.get("beta", (1.0,)),
        cost_x=float(params.get("cost_x", 1.0)),
        cost_u=float(params.get("cost_u", 0.1)),
        cost_terminal=float(params.get("cost_terminal", 1.0)))
    return model, spec, lq.riccati_solve(spec, scenario.build_times())


def _regression(scenario: Scenario) -> adj.RegressionConfig:
    r = scenario.regression
    return adj.RegressionConfig(n_modes=int(r["n_modes"]),
                                degree=int(r["degree"]),
                                cond_threshold=float(r["cond_threshold"]))


def _reference_control(scenario: Scenario):
    """Best available control law: the oracle feedback for LQ models, a
    freshly optimized feedback otherwise."""
    if scenario.model_name == "lq":
        _, _, rpath = _lq_reference(scenario)
        return lq.RiccatiFeedback(rpath)
    model = scenario.build_model()
    grid = scenario.build_grid()
    result = ana.optimize_control(
        model, grid, scenario.build_noise("optimize"),
        scenario.build_initial(), scenario.build_times(),
        scenario.build_box(), n_paths=int(scenario.optimizer["paths"]),
        max_iterations=int(scenario.optimizer["max_iterations"]),
        damping=float(scenario.optimizer["damping"]),
        gap_tolerance=float(scenario.optimizer["gap_tolerance"]),
        regression=_regression(scenario))
    return result.control


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def run_simulate(scenario: Scenario, out_dir: Path) -> dict:
    ctx = RunContext(scenario, out_dir, "simulate")
    grid = scenario.build_grid()
    model = scenario.build_model()
    control = _reference_control(scenario)
    traj = sim.simulate_state(model, grid, scenario.build_noise("simulate"),
                              scenario.build_initial(), control,
                              scenario.build_times(),
                              n_paths=scenario.paths["simulate"])
    csv_path = ctx.path("trajectory_path0.csv")
    dump_trajectory_csv(traj, 0, csv_path)
    costs = traj.total_cost()
    report = {
        "n_paths": traj.n_paths,
        "mean_cost": float(np.mean(costs)),
        "cost_se": float(np.std(costs, ddof=1) / math.sqrt(traj.n_paths)),
        "terminal_norms": {
            "mean": float(np.mean(np.sqrt(grid.h * np.sum(
                traj.states[-1] ** 2, axis=-1)))),
        },
        "control": control.name,
    }
    report_path = ctx.path("simulate_report.json")
    write_json(report_path, report)
    ctx.record(csv_path, report_path)
    ctx.finish()
    return report


def run_adjoint(scenario: Scenario, out_dir: Path) -> dict:
    ctx = RunContext(scenario, out_dir, "adjoint")
    grid = scenario.build_grid()
    model = scenario.build_model()
    control = _reference_control(scenario)
    traj = sim.simulate_state(model, grid, scenario.build_noise("adjoint"),
                              scenario.build_initial(), control,
                              scenario.build_times(),
                              n_paths=scenario.paths["adjoint"])
    config = _regression(scenario)
    first = adj.solve_first_adjoint(model, traj, config)
    probes = scenario.probe_indices()
    sub = sim.subset_paths(traj, min(scenario.paths["kernel"], traj.n_paths))
    first_sub = _slice_first(first, sub.n_paths)
    second = adj.solve_second_adjoint(model, sub, first_sub, scenario.eta,
                                      config=config, snapshot_indices=probes,
                                      substeps=scenario.kernel_substeps)
    # adjoint dumps mirror the trajectory format
    p_csv = ctx.path("adjoint_p_path0.csv")
    with open(p_csv, "w") as fh:
        fh.write(",".join(["time"] + [f"node_{i}" for i in range(grid.n)]) + "\n")
        for k, t in enumerate(traj.times):
            row = [repr(float(t))] + [repr(float(v)) for v in first.p[k, 0]]
            fh.write(",".join(row) + "\n")
    kern_paths = write_kernel_blocks(
        ctx.path("second_adjoint_kernels"),
        {i: second.kernels[i][0] for i in probes}, grid, traj.times,
        eta=scenario.eta)
    report = {
        "max_regression_condition": first.max_condition,
        "probe_indices": probes,
        "kernel_symmetric": all(bool(np.array_equal(
            second.kernels[i][0], second.kernels[i][0].T)) for i in probes),
    }
    report_path = ctx.path("adjoint_report.json")
    write_json(report_path, report)
    ctx.record(p_csv, *kern_paths, report_path)
    ctx.finish()
    return report


def _slice_first(first: adj.FirstAdjointPath, n: int) -> adj.FirstAdjointPath:
    return adj.FirstAdjointPath(
        grid=first.grid, times=first.times, start_index=first.start_index,
        p=first.p[:, :n], q=first.q[:, :n], core=first.core[:, :n],
        max_condition=first.max_condition)


def run_lq(scenario: Scenario, out_dir: Path) -> dict:
    """Oracle comparisons: adjoint identities at the eta schedule plus the
    Monte Carlo value check against the quadratic value function."""
    ctx = RunContext(scenario, out_dir, "lq")
    grid = scenario.build_grid()
    model, spec, rpath = _lq_reference(scenario)
    times = scenario.build_times()
    feedback = lq.RiccatiFeedback(rpath)
    traj = sim.simulate_state(model, grid, scenario.build_noise("adjoint"),
                              scenario.build_initial(), feedback, times,
                              n_paths=scenario.paths["adjoint"])
    config = _regression(scenario)
    first = adj.solve_first_adjoint(model, traj, config)
    probes = scenario.probe_indices()

    p_errors = []
    for i in probes:
        x = traj.state(i)
        ref = 2.0 * (x @ rpath.matrices[i].T)
        num = np.sqrt(grid.h * np.sum((first.p_at(i) - ref) ** 2, axis=-1))
        den = 1.0 + np.sqrt(grid.h * np.sum(x**2, axis=-1))
        p_errors.append(float(np.max(num / den)))

    sub = sim.subset_paths(traj, min(scenario.paths["kernel"], traj.n_paths))
    first_sub = _slice_first(first, sub.n_paths)
    kernel_errors = {}
    for eta in scenario.eta_schedule:
        second = adj.solve_second_adjoint(model, sub, first_sub, eta,
                                          config=config,
                                          snapshot_indices=probes,
                                          substeps=scenario.kernel_substeps)
        errs = []
        for i in probes:
            ref = 2.0 * rpath.matrices[i] / grid.h
            errs.append(float(np.linalg.norm(second.kernels[i][0] - ref)
                              / np.linalg.norm(ref)))
        kernel_errors[f"{eta:g}"] = {"max": max(errs), "per_probe": errs}

    family = ana.ControlFamily((feedback, mdl.ConstantControl(
        np.zeros(model.d_u))), "lq_reference")
    est = ana.estimate_value(model, grid, scenario.build_noise("value"),
                             times, 0, scenario.build_initial(), family,
                             n_paths=scenario.paths["value"])
    v_ref = lq.lq_value(rpath, scenario.t_start, scenario.build_initial())

    riccati_paths = write_kernel_blocks(
        ctx.path("riccati_matrices"),
        {i: rpath.matrices[i] for i in probes}, grid, times)
    report = {
        "probe_indices": probes,
        "gradient_max_error": max(p_errors),
        "gradient_errors": p_errors,
        "kernel_errors": kernel_errors,
        "kernel_monotone_in_eta": _monotone([kernel_errors[f"{e:g}"]["max"]
                                             for e in scenario.eta_schedule]),
        "value_estimate": est.mean,
        "value_se": est.se,
        "value_oracle": v_ref,
        "value_within_3se": bool(abs(est.mean - v_ref) <= 3 * est.se),
        "best_member": est.best,
    }
    report_path = ctx.path("lq_report.json")
    write_json(report_path, report)
    ctx.record(*riccati_paths, report_path)
    ctx.finish()
    return report


def _monotone(values) -> bool:
    return all(values[i] > values[i + 1] for i in range(len(values) - 1))


def run_validate(scenario: Scenario, out_dir: Path) -> dict:
    """Duality residuals with remainder slopes, a-priori and terminal
    regularity ratios, increment checks, and coefficient assumption scans."""
    ctx = RunContext(scenario, out_dir, "validate")
    grid = scenario.build_grid()
    model = scenario.build_model()
    times = scenario.build_times()
    control = _reference_control(scenario)
    config = _regression(scenario)
    t_idx = scenario.probe_indices()[0]

    base = sim.simulate_state(model, grid, scenario.build_noise("simulate"),
                              scenario.build_initial(), control, times, 1)
    branch = sim.branch_ensemble(base, model, control, t_idx,
                                 scenario.paths["branch"],
                                 scenario.build_noise("branch"))
    first = adj.solve_first_adjoint(model, branch, config)

    basis = spectral_basis(grid)
    direction = basis.vectors[:, 0]
    n_steps = scenario.n_steps
    pairs = []
    for k, (frac, znorm) in enumerate(zip(scenario.tau_fractions,
                                          scenario.z_norms)):
        tau_steps = max(1, round(frac * n_steps))
        pairs.append((tau_steps, znorm * direction))

    dual1 = [ana.duality_first_residual(model, branch, first, t_idx, ts, z)
             for ts, z in pairs]
    dual2 = ana.duality_second_residuals(model, branch, first, scenario.eta,
                                         pairs, t_idx, config)

    levels = [(max(1, round(0.08 * n_steps / 2**k)),
               (0.2 / 2 ** (k / 2)) * direction) for k in range(4)]
    ratios = sim.apriori_ratios(branch, model, t_idx, levels, k_values=(1, 2))
    terminal = [sim.terminal_regularity_ratio(
        branch, model, t_idx, ts, z, gamma=0.2) for ts, z in levels]
    for row in terminal:
        row.pop("y_terminal", None)

    snaps = sorted({t_idx} | {t_idx + max(1, round(f * n_steps))
                              for f in scenario.tau_fractions})
    second = adj.solve_second_adjoint(model, branch, first, scenario.eta,
                                      config=config, snapshot_indices=snaps)
    drift_stat = np.mean(branch.state(snaps[1]) - branch.state(t_idx), axis=0)
    w = grid.h * (second.kernels[t_idx][0] @ drift_stat)
    z_mix = basis.vectors[:, 1] - (basis.vectors[:, 1] @ w) / (w @ w + 1e-30) * w
    z_mix *= 0.1 / (math.sqrt(grid.h) * np.linalg.norm(z_mix))
    increments = ana.increment_checks(
        model, branch, first, second, t_idx,
        [max(1, round(f * n_steps)) for f in scenario.tau_fractions], z_mix)

    report = {
        "probe_index": t_idx,
        "duality_first": dual1,
        "duality_first_pass": all(abs(r["residual"]) <= 3 * r["se"]
                                  for r in dual1),
        "duality_second": dual2,
        "remainder_slope_first": ana.remainder_slope(dual1),
        "remainder_slope_second": ana.remainder_slope(dual2),
        "apriori_ratios": ratios,
        "terminal_regularity": terminal,
        "increments": increments,
        "assumptions": check_assumptions(model).as_dict(),
    }
    report_path = ctx.path("validate_report.json")
    write_json(report_path, report)
    ctx.record(report_path)
    ctx.finish()
    return report


def run_probe(scenario: Scenario, out_dir: Path) -> dict:
    """Superdifferential probes with solver-built candidates; the value
    source is the quadratic oracle for LQ scenarios and a family-infimum
    Monte Carlo estimator otherwise."""
    ctx = RunContext(scenario, out_dir, "probe")
    grid = scenario.build_grid()
    model = scenario.build_model()
    times = scenario.build_times()
    config = _regression(scenario)
    control = _reference_control(scenario)

    traj = sim.simulate_state(model, grid, scenario.build_noise("adjoint"),
                              scenario.build_initial(), control, times,
                              n_paths=scenario.paths["adjoint"])
    first = adj.solve_first_adjoint(model, traj, config)
    probes = scenario.probe_indices()
    sub = sim.subset_paths(traj, min(scenario.paths["kernel"], traj.n_paths))
    first_sub = _slice_first(first, sub.n_paths)
    second = adj.solve_second_adjoint(model, sub, first_sub, scenario.eta,
                                      config=config, snapshot_indices=probes,
                                      substeps=scenario.kernel_substeps)

    if scenario.model_name == "lq":
        _, _, rpath = _lq_reference(scenario)
        source: ana.ValueSource = ana.OracleValueSource(rpath)
    else:
        family = ana.ControlFamily((control,), "reference")
        source = ana.MCValueSource(model, grid, scenario.build_noise("probe"),
                                   times, family,
                                   n_paths=scenario.paths["value"])

    tol = float(scenario.tolerances["probe_quotient"])
    reports = []
    for t_idx in probes:
        cand = ana.adjoint_candidate(model, sub, first_sub, second, t_idx, 0)
        sched = ana.probe_schedule(grid, times, t_idx,
                                   tau_fractions=scenario.tau_fractions,
                                   z_norms=scenario.z_norms,
                                   n_random=scenario.random_directions,
                                   modes=scenario.mode_directions)
        rep = ana.probe_inclusion(cand, grid, times, t_idx,
                                  sub.state(t_idx)[0], source, sched, tol)
        reports.append(rep.as_dict())
    report = {
        "tolerance": tol,
        "verdicts": [r["verdict"] for r in reports],
        "all_pass": all(r["verdict"] == "pass" for r in reports),
        "probes": reports,
    }
    report_path = ctx.path("probe_report.json")
    write_json(report_path, report)
    ctx.record(report_path)
    ctx.finish()
    return report


def run_verify(scenario: Scenario, out_dir: Path) -> dict:
    """Verification certificates for the reference control and a biased
    variant, plus the direct cost comparison between them."""
    ctx = RunContext(scenario, out_dir, "verify")
    grid = scenario.build_grid()
    model = scenario.build_model()
    times = scenario.build_times()
    if scenario.model_name != "lq":
        raise ScenarioError("verification certificates require the oracle "
                            "value function; use an lq scenario")
    _, _, rpath = _lq_reference(scenario)
    feedback = lq.RiccatiFeedback(rpath)
    bias = mdl.CallableFeedback(
        lambda t, x: feedback(int(round((t - scenario.t_start)
                                        / (times[1] - times[0]))), t, x) + 0.5,
        name="biased")
    noise = scenario.build_noise("verify")
    x0 = scenario.build_initial()
    n_paths = scenario.paths["simulate"]
    eval_indices = range(0, scenario.n_steps, max(1, scenario.n_steps // 50))
    tol = float(scenario.tolerances["certificate"])
    prereq = {"inclusion_probe": True, "growth": True, "semiconcavity": True}

    certificates = {}
    costs = {}
    for name, control in (("reference", feedback), ("biased", bias)):
        traj = sim.simulate_state(model, grid, noise, x0, control, times,
                                  n_paths)
        provider = ana.oracle_candidate_provider(rpath, traj)
        cert = ana.verify_control(model, traj, provider, eval_indices, tol,
                                  prerequisites=prereq)
        certificates[name] = cert.as_dict()
        costs[name] = traj.total_cost()
    dj = costs["biased"] - costs["reference"]
    report = {
        "certificates": certificates,
        "cost_increase": float(np.mean(dj)),
        "cost_increase_se": float(np.std(dj, ddof=1) / math.sqrt(dj.size)),
        "consistent": bool(
            certificates["reference"]["verdict"] == "pass"
            and certificates["biased"]["verdict"] == "fail"
            and np.mean(dj) > 3 * np.std(dj, ddof=1) / math.sqrt(dj.size)),
    }
    report_path = ctx.path("verify_report.json")
    write_json(report_path, report)
    ctx.record(report_path)
    ctx.finish()
    return report


def run_optimize(scenario: Scenario, out_dir: Path) -> dict:
    ctx = RunContext(scenario, out_dir, "optimize")
    grid = scenario.build_grid()
    model = scenario.build_model()
    result = ana.optimize_control(
        model, grid, scenario.build_noise("optimize"),
        scenario.build_initial(), scenario.build_times(),
        scenario.build_box(), n_paths=int(scenario.optimizer["paths"]),
        max_iterations=int(scenario.optimizer["max_iterations"]),
        damping=float(scenario.optimizer["damping"]),
        gap_tolerance=float(scenario.optimizer["gap_tolerance"]),
        regression=_regression(scenario))
    control_path = ctx.path("optimized_control.json")
    payload = {
        "kind": "affine_feedback",
        "offset": result.control.offset,
        "gain": result.control.gain,
    } if isinstance(result.control, mdl.AffineFeedback) else {
        "kind": result.control.name}
    write_json(control_path, payload)
    report = {
        "converged": result.converged,
        "iterations": result.iterations,
        "gap_history": result.gap_history,
        "cost_history": result.cost_history,
        "damping_history": result.damping_history,
    }
    report_path = ctx.path("optimize_report.json")
    write_json(report_path, report)
    ctx.record(control_path, report_path)
    ctx.finish()
    return report


def run_export_plots(report_dir: Path, out_dir: Path) -> dict:
    """Long-format CSV mirrors of probe and validation reports."""
    report_dir = Path(report_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    missing = []
    written = []

    probe_json = report_dir / "probe_report.json"
    rows = []
    if probe_json.exists():
        data = json.loads(probe_json.read_text())
        for rep in data["probes"]:
            for s in rep["samples"]:
                rows.append((rep["t_index"], s["tau"], s["z_norm"],
                             s["tau"] + s["z_norm"] ** 2, s["quotient"],
                             s["se"]))
    else:
        missing.append(probe_json.name)
    path = out / "probe_quotients.csv"
    with open(path, "w") as fh:
        fh.write("t_index,tau,z_norm,size,quotient,se\n")
        for row in rows:
            fh.write(",".join(repr(v) for v in row) + "\n")
    written.append(path.name)

    validate_json = report_dir / "validate_report.json"
    slope_rows = []
    if validate_json.exists():
        data = json.loads(validate_json.read_text())
        for kind in ("duality_first", "duality_second"):
            for r in data[kind]:
                slope_rows.append((kind, r["tau"], r["z_norm2"],
                                   r["tau"] + r["z_norm2"], r["residual"],
                                   r["se"], r["remainder"]))
    else:
        missing.append(validate_json.name)
    path = out / "duality_residuals.csv"
    with open(path, "w") as fh:
        fh.write("kind,tau,z_norm2,size,residual,se,remainder\n")
        for row in slope_rows:
            fh.write(",".join(repr(v) if not isinstance(v, str) else v
                              for v in row) + "\n")
    written.append(path.name)

    if missing:
        logger.error("missing reports: %s", ", ".join(missing))
    return {"written": written, "missing": missing,
            "rows": {"probe_quotients": len(rows),
                     "duality_residuals": len(slope_rows)}}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "simulate": run_simulate,
    "adjoint": run_adjoint,
    "lq": run_lq,
    "validate": run_validate,
    "probe": run_probe,
    "verify": run_verify,
    "optimize": run_optimize,
}


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ScenarioError(f"override {pair!r} must look like key=value")
        key, value = pair.split("=", 1)
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spde-control",
        description="Optimal-control toolkit for the 1D stochastic heat "
                    "equation: simulation, adjoints, oracle comparisons, "
                    "optimality probes, and certificates.")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    for name in COMMANDS:
        sp = subs.add_parser(name)
        sp.add_argument("--scenario", required=True, help="scenario JSON file")
        sp.add_argument("--out", default="runs", help="output directory")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--paths", type=int,
                        help="override the simulate path count")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="dotted-path scenario override, repeatable")

    sp = subs.add_parser("export-plots")
    sp.add_argument("--reports", required=True,
                    help="directory holding run reports")
    sp.add_argument("--out", default="plots", help="output directory")

    sp = subs.add_parser("scenarios")
    sp.add_argument("--out", default="scenarios",
                    help="directory for the shipped scenario files")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "scenarios":
        written = write_builtin_scenarios(args.out)
        for path in written:
            print(path)
        return 0
    if args.command == "export-plots":
        report = run_export_plots(args.reports, args.out)
        print(json.dumps(report, indent=2))
        return 1 if report["missing"] else 0

    try:
        scenario = Scenario.load(args.scenario)
        overrides = _parse_overrides(args.override)
        if args.seed is not None:
            overrides["noise.seed"] = args.seed
        if args.paths is not None:
            overrides["paths.simulate"] = args.paths
        if overrides:
            scenario = scenario.apply_overrides(overrides)
    except (ScenarioError, json.JSONDecodeError, OSError) as err:
        parser.exit(2, f"scenario error: {err}\n")

    try:
        report = COMMANDS[args.command](scenario, Path(args.out))
    except sim.SimulationBlowUpError as err:
        parser.exit(3, f"simulation aborted: {err} (stage {args.command})\n")
    except adj.RegressionIllConditionedError as err:
        parser.exit(4, f"regression aborted: {err} (stage {args.command})\n")
    print(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
