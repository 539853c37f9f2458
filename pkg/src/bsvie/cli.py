"""Command-line front end.

Every command writes into one output directory and finishes with a
``manifest.json`` listing the resolved arguments and every output file with
its sha256.  ``bsvie rerun <manifest>`` replays a run from that record.

Exit codes: 0 success, 1 divergence or failed check, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path


from . import __version__, evaluation, networks, rng, trainer
from .autodiff import DimensionError
from .problems import get_problem, load_problem_file
from .rollout import make_fields
from .sde import TimeGrid, sample_paths

# reference values printed next to reproduced ones
REFERENCE_ORDERS = {"example1a": {"loss": 1.0, "Y": 1.0, "Z": 1.0}, "example1b": {"loss": 1.0, "Y": 0.5, "Z": 0.5}}
REFERENCE_TABLE1 = {1: (7.7e-5, 8.2e-5), 5: (9.6e-5, 2.9e-5), 20: (1.8e-4, 7.9e-6)}
TARGETS = ("fig4", "fig5", "table1", "example2", "example3", "stability")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsvie", description="Neural solver for FSDE-BSVIE systems.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--problem", help="problem id (example1a, example1b, example2, example3) or problem file")
        p.add_argument("--profile", choices=sorted(trainer.PROFILES), default="desk")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--grid-n", type=_int_list, help="time steps N (comma list where a study needs several)")
        p.add_argument("--out", help="output directory (default: runs/<command>-seed<seed>-<timestamp>)")
        p.add_argument("--config", help="key = value training config file")
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("train", help="train Y/Z networks")
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint against the closed form")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint file from 'train'")
    p.add_argument("--paths", type=int, default=2**12, help="evaluation paths M")
    p.add_argument("--closed-form-bypass", action="store_true", help="evaluate the closed forms instead of networks")

    p = sub.add_parser("reproduce", help="run a figure/table study")
    p.add_argument("target", choices=TARGETS)
    common(p)
    p.add_argument("--dims", type=_int_list, default=[1, 5, 20])
    p.add_argument("--seeds", type=int, default=1, help="seeds per setting (table1)")
    p.add_argument("--mode", choices=("plugin", "trained"), help="fig5: closed-form plug-in or trained networks")
    p.add_argument("--pairs", type=int, default=20, help="stability: random network pairs")
    p.add_argument("--paths", type=int, help="evaluation paths M")

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory for the replay")
    return parser


# -- helpers -----------------------------------------------------------------

def _resolve_problem(args):
    if not args.problem:
        return None
    if Path(args.problem).is_file():
        return load_problem_file(args.problem)
    try:
        return get_problem(args.problem)
    except KeyError as exc:
        raise UsageError(f"--problem: {exc.args[0]}") from None


def _train_config(args, problem_name: str | None, **extra) -> trainer.TrainConfig:
    overrides = dict(seed=args.seed, threads=args.threads, **extra)
    if problem_name:
        overrides["problem"] = problem_name
    if getattr(args, "grid_n", None):
        overrides["N"] = args.grid_n[0]
    try:
        if args.config:
            return trainer.load_config(args.config, **overrides)
        return trainer.profile_config(args.profile, **overrides)
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from None


def _out_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
        name = args.command if args.command != "reproduce" else f"reproduce-{args.target}"
        out = Path("runs") / f"{name}-seed{args.seed}-{stamp}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, args, started: str, outputs: list[str], status: str) -> None:
    record = {
        "command": args.command,
        "args": {k: v for k, v in vars(args).items() if k != "out"},
        "config_path": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "output_dir": str(out),
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "status": status,
        "outputs": {name: _sha256(out / name) for name in sorted(outputs)},
    }
    (out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _log(message: str) -> None:
    print(message, flush=True)


def _write_timings(out: Path, timings: dict, outputs: list[str]) -> None:
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs.append("timings.json")


# -- commands ----------------------------------------------------------------

def cmd_train(args, out: Path, outputs: list[str]) -> None:
    problem = _resolve_problem(args)
    config = _train_config(args, problem.name if problem else None)
    problem = problem or config.build_problem()
    params, report = trainer.train(config, problem, log=_log)
    networks.save_checkpoint(params, out / "checkpoint.txt")
    report.write_trace_csv(out / "trace.csv")
    trainer.write_config(config, out / "config.txt")
    outputs += ["checkpoint.txt", "trace.csv", "config.txt"]
    _write_timings(out, {"train_seconds": report.train_seconds, "epoch_seconds": report.epoch_seconds}, outputs)
    summary = (f"problem={problem.name} N={config.N} M_train={config.M_train} epochs={config.K_epoch}\n"
               f"validation loss: initial={report.val_losses[0]:.6e} final={report.val_losses[-1]:.6e}\n")
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    outputs.append("summary.txt")
    print(summary, end="")


def cmd_eval(args, out: Path, outputs: list[str]) -> None:
    problem = _resolve_problem(args)
    params = None
    if not args.closed_form_bypass:
        params = networks.load_checkpoint(args.checkpoint)
        if (params.d, params.ell) != (problem.d, problem.ell):
            raise DimensionError(f"checkpoint has (d, ell)=({params.d}, {params.ell}); "
                                 f"{problem.name} expects ({problem.d}, {problem.ell})")
    N = args.grid_n[0] if args.grid_n else int(params.meta.get("N", 20)) if params else 20
    report = evaluation.compute_errors(problem, TimeGrid(problem.T, N), args.paths, args.seed, params,
                                       closed_form=args.closed_form_bypass)
    evaluation.write_errors_csv([report], out / "errors.csv")
    outputs.append("errors.csv")
    print(f"{problem.name} N={N} M={args.paths}: Err^Y={report.err_y:.6e} "
          f"Err^Z={report.err_z:.6e} Err^T={report.err_t:.6e}")


def _reproduce_fig4(args, out, outputs, timings):
    """Z_{t,s} sections of Example 1B: one path and the sample mean, network vs reference."""
    problem = get_problem("example1b")
    config = _train_config(args, problem.name)
    started = time.perf_counter()
    params, _ = trainer.train(config, problem, log=_log)
    timings["train_seconds"] = time.perf_counter() - started
    grid = TimeGrid(problem.T, config.N)
    M = args.paths or 2**12
    batch = sample_paths(problem, grid, M, args.seed, stream=rng.EVALUATION)
    X_ref = evaluation.reference_paths(problem, batch)
    fields = make_fields(problem, params)
    times = grid.times
    rows = []
    for n in sorted({0, grid.N // 4, grid.N // 2, 3 * grid.N // 4}):
        s = times[None, n:, None]
        approx = fields.z(times[n], s, batch.X[:, n:n + 1], batch.X[:, n:])[..., 0]
        ref = problem.closed_z(times[n], s, X_ref[:, n:n + 1], X_ref[:, n:])[..., 0]
        for j, s_val in enumerate(times[n:]):
            rows += [(s_val, approx[0, j], f"t={times[n]:g}/path0/approx"),
                     (s_val, ref[0, j], f"t={times[n]:g}/path0/reference"),
                     (s_val, approx[:, j].mean(), f"t={times[n]:g}/mean/approx"),
                     (s_val, ref[:, j].mean(), f"t={times[n]:g}/mean/reference")]
    evaluation._write(out / "fig4.csv", ["x", "y", "series"], rows)
    outputs.append("fig4.csv")
    report = evaluation.compute_errors(problem, grid, M, args.seed, params)
    evaluation.write_errors_csv([report], out / "errors.csv")
    outputs.append("errors.csv")
    print(f"example1b N={grid.N}: Err^Y={report.err_y:.3e} Err^Z={report.err_z:.3e} "
          f"(full-scale reference d=5: 9.6e-05 / 2.9e-05)")


def _reproduce_fig5(args, out, outputs, timings):
    mode = args.mode or ("trained" if args.profile == "paper" else "plugin")
    M = args.paths or 2**12
    lines = [f"mode={mode} M={M}"]
    for name, default_N in (("example1a", [10, 20, 30, 40, 50]), ("example1b", [10, 20, 30, 40])):
        problem = get_problem(name)
        N_list = args.grid_n or default_N
        config = _train_config(args, name) if mode == "trained" else None
        study = evaluation.convergence_study(problem, N_list, mode, config, M=M, seed=args.seed, log=_log)
        timings[f"{name}_train_seconds"] = study.train_seconds
        evaluation.write_convergence_csv(study, out / f"fig5_{name}.csv")
        outputs.append(f"fig5_{name}.csv")
        for N, message in study.failures.items():
            lines.append(f"{name} N={N}: FAILED ({message})")
        for metric, fit in study.fits.items():
            expected = REFERENCE_ORDERS[name].get(metric)
            ref = f"   reference order {expected:g}" if expected is not None else ""
            lines.append(f"{name} {metric:6s} slope={fit.slope:+.3f} r2={fit.r2:.3f}{ref}")
        if study.failures:
            raise CheckFailed("\n".join(lines))
    _finish_summary(out, outputs, lines)


def _reproduce_table1(args, out, outputs, timings):
    config = _train_config(args, "example1b")
    seeds = [args.seed + i for i in range(args.seeds)]
    rows = evaluation.dimension_study(args.dims, config, seeds, M=args.paths or 2**12, log=_log)
    evaluation.write_dimension_csv(rows, out / "table1.csv")
    outputs.append("table1.csv")
    medians = evaluation.median_by_dimension(rows)
    timings["rows"] = [{"d": r.d, "seed": r.seed, "train_seconds": r.train_seconds,
                        "total_seconds": r.total_seconds} for r in rows]
    lines = ["d  Err(Y)      Err(Z)      train_s   reference Err(Y) / Err(Z)"]
    for d, med in medians.items():
        pub = REFERENCE_TABLE1.get(d)
        ref = f"{pub[0]:.1e} / {pub[1]:.1e}" if pub else "-"
        lines.append(f"{d:<3d}{med['err_y']:.3e}   {med['err_z']:.3e}   {med['train_seconds']:7.1f}   {ref}")
    _finish_summary(out, outputs, lines)


def _reproduce_trained_example(args, out, outputs, timings, name):
    problem = get_problem(name)
    config = _train_config(args, name)
    params, report = trainer.train(config, problem, log=_log)
    timings["train_seconds"] = report.train_seconds
    networks.save_checkpoint(params, out / "checkpoint.txt")
    report.write_trace_csv(out / "trace.csv")
    outputs += ["checkpoint.txt", "trace.csv"]
    grid = TimeGrid(problem.T, config.N)
    M = args.paths or 2**12
    errors = evaluation.compute_errors(problem, grid, M, args.seed, params)
    evaluation.write_errors_csv([errors], out / "errors.csv")
    outputs.append("errors.csv")
    curves = y_mean_curves(problem, grid, params, M, args.seed)
    evaluation._write(out / f"{name}_y.csv", ["x", "y", "series"], curves)
    outputs.append(f"{name}_y.csv")
    drop = 1.0 - report.val_losses[-1] / report.val_losses[0]
    lines = [f"{name} N={grid.N}: validation loss {report.val_losses[0]:.4e} -> {report.val_losses[-1]:.4e} "
             f"({100 * drop:.1f}% reduction)",
             f"Err^Y={errors.err_y:.4e} Err^Z={errors.err_z:.4e} Err^T={errors.err_t:.4e}"]
    _finish_summary(out, outputs, lines)


def y_mean_curves(problem, grid: TimeGrid, params, M: int, seed: int) -> list[tuple]:
    """Sample mean of Y_t along the grid, network vs reference, on fresh paths."""
    fields = make_fields(problem, params)
    batch = sample_paths(problem, grid, M, seed, stream=rng.EVALUATION,
                         fields=fields if problem.coupled else None)
    X_ref = evaluation.reference_paths(problem, batch)
    t = grid.times[None, :, None]
    approx = fields.y(t, batch.X)[..., 0].mean(axis=0)
    ref = problem.closed_y(t, X_ref)[..., 0].mean(axis=0)
    return ([(s, v, "mean/approx") for s, v in zip(grid.times, approx)]
            + [(s, v, "mean/reference") for s, v in zip(grid.times, ref)])


def _reproduce_stability(args, out, outputs, timings):
    problem = _resolve_problem(args) or get_problem("example1a")
    K1 = problem.lipschitz_yz
    N = args.grid_n[0] if args.grid_n else max(10, math.floor(problem.T * (8 * K1**2 + 1)) + 1)
    grid = TimeGrid(problem.T, N)
    M = args.paths or 2**13
    rows, violations = [], 0
    for pair in range(args.pairs):
        pa = networks.init(args.seed + 2 * pair, problem.d, problem.ell)
        pb = networks.init(args.seed + 2 * pair + 1, problem.d, problem.ell)
        report = evaluation.stability_check(problem, grid, pa, pb, M, seed=args.seed + pair)
        violations += report.violations
        rows += [(pair, *row[:-1], int(row[-1])) for row in report.rows]
        _log(f"pair {pair}: {report.violations} violations")
    evaluation._write(out / "stability.csv", ["pair", "k", "n", "lhsY", "rhsY", "lhsZ", "rhsZ", "violated"], rows)
    outputs.append("stability.csv")
    lines = [f"{problem.name} N={N} h={grid.h:g} K1={K1:.4f} C_Y={report.c_y:.4f} C_Z={report.c_z:.4f}",
             f"pairs={args.pairs} M={M} violations={violations}"]
    _finish_summary(out, outputs, lines)
    if violations:
        raise CheckFailed(f"{violations} stability violations")


def _finish_summary(out: Path, outputs: list[str], lines: list[str]) -> None:
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text, encoding="utf-8")
    outputs.append("summary.txt")
    print(text, end="")


def cmd_reproduce(args, out: Path, outputs: list[str]) -> None:
    timings: dict = {}
    try:
        if args.target == "fig4":
            _reproduce_fig4(args, out, outputs, timings)
        elif args.target == "fig5":
            _reproduce_fig5(args, out, outputs, timings)
        elif args.target == "table1":
            _reproduce_table1(args, out, outputs, timings)
        elif args.target in ("example2", "example3"):
            _reproduce_trained_example(args, out, outputs, timings, args.target)
        else:
            _reproduce_stability(args, out, outputs, timings)
    finally:
        _write_timings(out, timings, outputs)


def _check_usage(args) -> None:
    """Reject incomplete invocations before any output directory is created."""
    _resolve_problem(args)
    if args.command == "train" and not args.problem and not args.config:
        raise UsageError("missing required field 'problem' (pass --problem or set it in --config)")
    if args.command == "eval":
        if not args.problem:
            raise UsageError("missing required field 'problem' (pass --problem)")
        if not args.checkpoint and not args.closed_form_bypass:
            raise UsageError("missing required field 'checkpoint' (or pass --closed-form-bypass)")
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")


def _run(args) -> int:
    _check_usage(args)
    out = _out_dir(args)
    started = datetime.now(timezone.utc).isoformat()
    outputs: list[str] = []
    status = "ok"
    try:
        {"train": cmd_train, "eval": cmd_eval, "reproduce": cmd_reproduce}[args.command](args, out, outputs)
        code = 0
    except (trainer.TrainingDiverged, CheckFailed, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, trainer.TrainingDiverged):
            trainer.write_trace_csv(exc.trace, out / "diverged_trace.csv")
            outputs.append("diverged_trace.csv")
        status, code = "failed", 1
    _write_manifest(out, args, started, [o for o in outputs if (out / o).exists()], status)
    print(f"outputs in {out}")
    return code


def cmd_rerun(args) -> int:
    record = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    replay = argparse.Namespace(**record["args"])
    replay.out = args.out
    return _run(replay)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "rerun":
            return cmd_rerun(args)
        return _run(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bsvie: error: {exc}", file=sys.stderr)
        return 2
    except (DimensionError, networks.CheckpointError, OSError) as exc:
        print(f"bsvie: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
