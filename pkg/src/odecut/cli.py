"""Command-line entry point: ``odecut <subcommand> ...``.

Exit codes: 0 ok, 1 verification failure, 2 usage or config error,
3 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from . import config as cfgmod
from .checkpoint import CheckpointError
from .data import DataError, DatasetLayout, make_fixtures
from .evalbench import bench_generator
from .models import Generator, SamplingError
from .odeint import Method, OdeError, SolverConfig, integrate_fixed, odeint
from .trainer import TrainingError, fit, infer, latest_checkpoint, load_generator, read_metrics
from .verify import SUITES, Check, decay_problem

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("odecut")


class UsageError(Exception):
    pass


def section(title: str) -> str:
    return f"==== {title} ===="


def _print_block(title: str, body: str) -> None:
    print(section(title))
    print(body.rstrip("\n"))
    print(section("end"))


# --------------------------------------------------------------------------
# settings from preset / file / --set / flags

FLAG_KEYS = {
    "seed": "train.seed",
    "size": "data.image_size",
    "steps": "train.steps_per_epoch",
    "epochs": "train.epochs",
    "solver": "solver.method",
    "rtol": "solver.rtol",
    "atol": "solver.atol",
    "step": "solver.fixed_step",
    "bottleneck": "model.bottleneck_kind",
    "lambda_perc": "loss.perc",
}


def _parse_sets(pairs: Sequence[str]) -> Dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def settings_from_args(args) -> cfgmod.Settings:
    layers: List[Dict[str, str]] = []
    preset = getattr(args, "preset", None)
    if preset:
        layers.append(cfgmod.PRESETS[preset])
    if getattr(args, "config", None):
        layers.append(cfgmod.read_file(args.config))
    layers.append(_parse_sets(getattr(args, "set", None) or []))
    flags = {}
    for attr, key in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            flags[key] = str(v)
    layers.append(flags)
    return cfgmod.Settings.build(*layers)


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--solver", choices=[m.value for m in Method], help="ODE solver (solver.method)")
    p.add_argument("--rtol", type=float, help="Dopri5 relative tolerance (solver.rtol)")
    p.add_argument("--atol", type=float, help="Dopri5 absolute tolerance (solver.atol)")
    p.add_argument("--step", type=float, help="fixed step for euler/rk4 (solver.fixed_step)")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file with [train]/[model]/[loss]/[data]/[solver]/[bench] sections")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="base preset applied before --config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    settings = settings_from_args(args)
    cfg = settings.train_config()
    name = args.name or time.strftime("%Y%m%d-%H%M%S")
    run_dir = Path(args.out) / name
    if args.fixtures:
        fx = settings.fixtures()
        layout = make_fixtures(run_dir / "fixtures", n=fx.fixture_n, seed=fx.fixture_seed,
                               size=fx.fixture_size or cfg.image_size)
    elif args.data:
        layout = DatasetLayout.under(args.data, image_size=cfg.image_size)
    else:
        raise UsageError("train needs --data DIR or --fixtures")
    run_dir.mkdir(parents=True, exist_ok=True)
    settings.write_echo(run_dir / "config.echo")
    resume = latest_checkpoint(run_dir) if args.resume else None
    result = fit(cfg, layout, run_dir, resume=resume)
    last = result.reports[-1] if result.reports else None
    lines = [f"run_dir: {run_dir}", f"checkpoint: {result.checkpoint}", f"steps: {len(result.reports)}"]
    if last is not None:
        lines += [f"{k}: {v!r}" for k, v in last.values.items()]
    _print_block("train", "\n".join(lines))
    return EXIT_OK


def _override_solver(args, base: SolverConfig) -> Optional[SolverConfig]:
    changes = {}
    if args.solver:
        changes["method"] = Method(args.solver)
    if args.rtol is not None:
        changes["rtol"] = args.rtol
    if args.atol is not None:
        changes["atol"] = args.atol
    if args.step is not None:
        changes["fixed_step"] = args.step
    return base.with_overrides(**changes) if changes else None


def cmd_infer(args) -> int:
    ckpt = latest_checkpoint(args.checkpoint)
    base = load_generator(ckpt).cfg.solver
    override = _override_solver(args, base)
    src = Path(args.input)
    inputs = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not inputs:
        raise UsageError(f"no .png inputs under {src}")
    written = infer(ckpt, inputs, args.out, override)
    _print_block("infer", "\n".join([f"checkpoint: {ckpt}", f"images: {len(written)}", f"out: {args.out}"]))
    return EXIT_OK


def _run_checks(title: str, checks: List[Check]) -> int:
    _print_block(title, "\n".join(c.line() for c in checks))
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} passed")
    return EXIT_OK if not failed else EXIT_VERIFY


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    code = EXIT_OK
    for name in names:
        code = max(code, _run_checks(f"verify {name}", SUITES[name]()))
    return code


def cmd_gradcheck(args) -> int:
    checks = SUITES["gradcheck"](include_generator=not args.ops_only)
    return _run_checks("gradcheck", checks)


def cmd_bench(args) -> int:
    settings = settings_from_args(args)
    bench = settings.bench()
    if args.checkpoint:
        ckpt = latest_checkpoint(args.checkpoint)
        g = load_generator(ckpt)
        override = _override_solver(args, g.cfg.solver)
        if override is not None:
            g.set_solver(override)
        label = str(ckpt)
    else:
        gen_cfg = settings.train_config().generator
        torch.manual_seed(settings.values["train.seed"])
        g = Generator(gen_cfg)
        label = f"fresh {gen_cfg.bottleneck_kind.value} generator"
    report = bench_generator(g, image_size=bench.image_size, n_warm=bench.n_warm, n_runs=bench.runs,
                             seed=settings.values["train.seed"])
    _print_block("bench " + label, report.table())
    _print_block("bench csv", report.csv())
    if args.out:
        from .plotting import plot_bench
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(report.csv())
        (out / "bench.txt").write_text(report.table() + "\n")
        fig = plot_bench(report.run_times, f"{label} @ {bench.image_size}px", out / "bench.png")
        print(f"figure: {fig}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    layout = make_fixtures(args.out, n=args.n, seed=args.seed, size=args.size)
    dirs = (layout.pseudo_src_dir, layout.pseudo_tgt_dir, layout.unpaired_src_dir, layout.unpaired_tgt_dir)
    _print_block("fixtures", "\n".join(f"{d}: {len(list(d.glob('*.png')))}" for d in dirs))
    return EXIT_OK


def cmd_odedemo(args) -> int:
    exact = math.exp(-1.0)
    curves: Dict[str, List[tuple]] = {}
    lines = ["method,setting,evals,abs_error"]
    for method in (Method.EULER, Method.RK4):
        for dt in (0.2, 0.1, 0.05, 0.025, 0.0125):
            sol = integrate_fixed(decay_problem(), SolverConfig(method=method, fixed_step=dt))
            err = abs(float(sol.h1) - exact)
            curves.setdefault(method.value, []).append((sol.n_evals, err))
            lines.append(f"{method.value},dt={dt},{sol.n_evals},{err:.3e}")
    for rtol in (1e-3, 1e-5, 1e-7, 1e-9):
        sol = odeint(decay_problem(), SolverConfig(method=Method.DOPRI5, rtol=rtol, atol=rtol * 1e-3))
        err = abs(float(sol.h1) - exact)
        curves.setdefault("dopri5", []).append((sol.n_evals, err))
        lines.append(f"dopri5,rtol={rtol:g},{sol.n_evals},{err:.3e}")
    _print_block("odedemo dy/dt=-y on [0,1]", "\n".join(lines))
    if args.out:
        from .plotting import plot_convergence
        print(f"figure: {plot_convergence(curves, Path(args.out) / 'odedemo.png')}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import plot_losses
    run = Path(args.run)
    rows = read_metrics(run / "metrics.csv")
    if not rows:
        raise UsageError(f"{run / 'metrics.csv'} has no rows")
    out = Path(args.out) if args.out else run / "report"
    fig = plot_losses(rows, out / "losses.png")
    first, last = rows[0], rows[-1]
    lines = ["key,first,last"] + [f"{k},{first[k]:.6g},{last[k]:.6g}" for k in first if k not in ("step", "epoch")]
    _print_block(f"report {run}", f"steps: {len(rows)}\n" + "\n".join(lines))
    print(f"figure: {fig}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    keys = cfgmod.help_text()
    p = argparse.ArgumentParser(prog="odecut", description=__doc__, epilog=keys, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on a dataset or generated fixtures", epilog=keys, formatter_class=fmt)
    _add_config_flags(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--size", type=int, help="training crop size (data.image_size)")
    t.add_argument("--steps", type=int, help="steps per epoch (train.steps_per_epoch)")
    t.add_argument("--epochs", type=int)
    _add_solver_flags(t)
    t.add_argument("--bottleneck", choices=["ode", "resnet"])
    t.add_argument("--lambda-perc", type=float, help="perceptual weight (loss.perc)")
    t.add_argument("--fixtures", action="store_true", help="generate fixtures into the run dir and train on them")
    t.add_argument("--data", type=Path, help="root holding pseudo_src/pseudo_tgt/unpaired_src/unpaired_tgt")
    t.add_argument("--out", type=Path, default=Path("out"))
    t.add_argument("--name", help="run directory name (default: timestamp)")
    t.add_argument("--resume", action="store_true", help="continue from the run's latest checkpoint")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="translate PNGs with a trained generator")
    i.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file or run directory")
    i.add_argument("--input", type=Path, required=True, help="PNG file or directory")
    i.add_argument("--out", type=Path, required=True)
    _add_solver_flags(i)
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("verify", help="run a verification suite")
    v.add_argument("suite", choices=list(SUITES) + ["all"])
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--ops-only", action="store_true", help="skip the full-generator cases")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time, memory, parameters and FLOPs of a generator", epilog=keys,
                       formatter_class=fmt)
    _add_config_flags(b)
    b.add_argument("--checkpoint", type=Path, help="checkpoint or run dir (default: fresh canonical model)")
    b.add_argument("--size", dest="bench_size", type=int, help="image size (bench.image_size)")
    b.add_argument("--runs", type=int, choices=[5, 50], help="timed runs (bench.runs)")
    b.add_argument("--bottleneck", choices=["ode", "resnet"])
    b.add_argument("--seed", type=int)
    _add_solver_flags(b)
    b.add_argument("--out", type=Path, help="directory for bench.csv, bench.txt and bench.png")
    b.set_defaults(func=cmd_bench)

    f = sub.add_parser("fixtures", help="write a small deterministic dataset")
    f.add_argument("--out", type=Path, required=True)
    f.add_argument("--n", type=int, default=16, help="number of pseudo pairs")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--size", type=int, default=32, help="image height; width is size + size//4")
    f.set_defaults(func=cmd_fixtures)

    o = sub.add_parser("odedemo", help="solver accuracy on dy/dt=-y")
    o.add_argument("--out", type=Path, help="directory for odedemo.png")
    o.set_defaults(func=cmd_odedemo)

    r = sub.add_parser("report", help="plot a run's metrics.csv")
    r.add_argument("--run", type=Path, required=True)
    r.add_argument("--out", type=Path, help="figure directory (default: <run>/report)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "bench":
        # bench flags that map onto config keys but are not shared with train
        if args.bench_size is not None:
            args.set = (args.set or []) + [f"bench.image_size={args.bench_size}"]
        if args.runs is not None:
            args.set = (args.set or []) + [f"bench.runs={args.runs}"]
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigKeyError, cfgmod.ConfigValueError) as exc:
        print(f"odecut: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TrainingError, OdeError, CheckpointError, SamplingError, FileNotFoundError,
            ValueError) as exc:
        print(f"odecut: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
