"""Command-line front end: ``fluidsteer run | validate | selftest``.

Exit codes: 0 success, 1 invalid input, 2 solver or synthesis failure,
3 aborted run (the partial report is still written).
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .scenario import ScenarioError, parse_scenario, with_overrides
from .sim import TrackingReport, build_from_scenario, run_tracking

log = logging.getLogger("fluidsteer")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_ABORTED = 0, 1, 2, 3


def bundled_scenario(name: str) -> Path:
    """Path of a scenario file shipped with the package (``name`` without suffix)."""
    path = resources.files("fluidsteer") / "scenarios" / f"{name}.toml"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled scenario named {name!r}")
    return Path(str(path))


def _resolve(spec: str) -> Path:
    path = Path(spec)
    if path.exists():
        return path
    try:
        return bundled_scenario(spec)
    except FileNotFoundError:
        return path


def _load(args) -> object:
    cfg = parse_scenario(_resolve(args.scenario))
    return with_overrides(cfg, getattr(args, "dt", None), getattr(args, "mode", None))


def _print_errors(exc: ScenarioError) -> None:
    for e in exc.errors:
        print(f"error: {e}", file=sys.stderr)


def write_plots(report: TrackingReport, out: Path, pd: bool) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    t = report.array("t")
    fig, ax = plt.subplots(figsize=(6, 4))
    err = report.array("err_pos")
    if pd:
        ax.semilogy(t, np.maximum(err, 1e-300))
    else:
        ax.plot(t, err)
    ax.set_xlabel("t")
    ax.set_ylabel("pose error")
    fig.tight_layout()
    path = out / "error.svg"
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    written.append(path)

    if report.poses:
        actual = np.array([p[0] for p in report.poses])
        target = np.array([p[1] for p in report.poses])
        fig, ax = plt.subplots(figsize=(5, 5))
        for k in range(report.n_bodies):
            ax.plot(target[:, 3 * k], target[:, 3 * k + 1], "k--", lw=1)
            ax.plot(actual[:, 3 * k], actual[:, 3 * k + 1], lw=1.5, label=f"body {k + 1}")
        ax.set_aspect("equal")
        ax.legend()
        fig.tight_layout()
        path = out / "trajectories.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


def cmd_run(args) -> int:
    try:
        cfg = _load(args)
    except ScenarioError as exc:
        _print_errors(exc)
        return EXIT_INVALID
    out = Path(args.out or cfg.output.dir)
    try:
        report = run_tracking(cfg)
    except ScenarioError as exc:
        _print_errors(exc)
        return EXIT_INVALID
    except ValueError as exc:
        # an inadmissible target or initial pose is an input problem
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (np.linalg.LinAlgError, ArithmeticError, RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER

    out.mkdir(parents=True, exist_ok=True)
    report.write(out / cfg.output.report)
    if args.control_dump or cfg.output.control_dump:
        (out / "controls.csv").write_text(report.controls_csv())
    if args.dump_forces or cfg.output.dump_forces:
        (out / "forces.csv").write_text(report.forces_csv())
    if args.plots or cfg.output.plots:
        write_plots(report, out, cfg.mode.kind == "pd")

    summary = report.summary()
    print(f"{cfg.name}: {summary['steps']} rows, max pose error {summary['max_err_pos']:.3e}, "
          f"max control residual {summary['max_ctrl_residual']:.3e}")
    if report.aborted:
        print(f"aborted at {report.aborted}", file=sys.stderr)
        return EXIT_SOLVER if report.abort_kind == "synthesis" else EXIT_ABORTED
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        cfg = _load(args)
        model, sim, state = build_from_scenario(cfg)
        if sim.target.horizon > 0:
            sim.target.check(model.domain, model.shapes, cfg.numerics.delta)
    except ScenarioError as exc:
        _print_errors(exc)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"{cfg.name}: ok ({cfg.n_bodies} bodies, {len(cfg.target.times)} waypoints, hash {cfg.digest()})")
    return EXIT_OK


def cmd_selftest(args) -> int:
    try:
        import pytest
    except ImportError:
        print("selftest needs pytest installed", file=sys.stderr)
        return EXIT_INVALID
    tests = Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        print(f"no test suite found at {tests}", file=sys.stderr)
        return EXIT_INVALID
    code = pytest.main([str(tests), "-q", "-m", "not slow", "-p", "no:cacheprovider"])
    return EXIT_OK if code == 0 else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluidsteer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread count (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="integrate a scenario and write its report")
    run.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    run.add_argument("--out", default=None)
    run.add_argument("--dt", type=float, default=None)
    run.add_argument("--mode", choices=("exact", "pd"), default=None)
    run.add_argument("--dump-forces", action="store_true")
    run.add_argument("--control-dump", action="store_true")
    run.add_argument("--plots", action="store_true")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a scenario without writing anything")
    val.add_argument("--scenario", required=True)
    val.set_defaults(func=cmd_validate)

    st = sub.add_parser("selftest", help="run the fast test suites")
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(args.threads):
            return args.func(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
