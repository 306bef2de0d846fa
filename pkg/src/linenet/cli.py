"""Command-line entry point: ``linenet <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 solver did not converge,
4 infeasible request (zero throughput, undefined delay, state space too
large).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import approx, delay, exact, planner
from .config import ConfigError, NetworkConfig, check_config, load
from .simulate import DEFAULT_SEED, SimSettings, replicate, simulate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3
EXIT_INFEASIBLE = 4


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _range(text: str) -> list[int]:
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b, got {text!r}") from None
    return list(range(lo, hi + 1))


def _add_config_flags(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    g = p.add_argument_group("network")
    g.add_argument("--config", metavar="FILE", help="JSON network description")
    g.add_argument("--hops", type=int)
    if sweep:
        g.add_argument("--eps-uniform", type=_floats, metavar="E[,E...]", help="uniform erasure(s), one series each")
        g.add_argument("--buffers-uniform", type=int, metavar="M")
    else:
        g.add_argument("--eps", type=_floats, metavar="E1,E2,...")
        g.add_argument("--eps-uniform", type=float, metavar="E")
        g.add_argument("--buffers", type=_ints, metavar="M1,M2,...")
        g.add_argument("--buffers-uniform", type=int, metavar="M")
        g.add_argument("--packet-size", type=int, metavar="BYTES")


def _add_output_flags(p: argparse.ArgumentParser, formats=("json", "csv", "table"), default="table") -> None:
    p.add_argument("--format", choices=formats, default=default)
    p.add_argument("--output", "-o", default="-", metavar="PATH", help="output file, '-' for stdout")


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("simulation")
    g.add_argument("--epochs", type=int, default=1_000_000)
    g.add_argument("--warmup", type=int, default=None)
    g.add_argument("--seed", type=int, default=DEFAULT_SEED)
    g.add_argument("--replications", type=int, default=1)


def config_from_args(args) -> NetworkConfig:
    inline = any(getattr(args, k, None) is not None for k in ("hops", "eps", "eps_uniform", "buffers", "buffers_uniform"))
    if args.config and inline:
        raise UsageError("give either --config or inline network flags, not both")
    if args.config:
        return load(args.config)
    if args.hops is None:
        raise UsageError("missing --hops (or --config)")
    h = args.hops
    if (args.eps is None) == (args.eps_uniform is None):
        raise UsageError("give exactly one of --eps / --eps-uniform")
    if (args.buffers is None) == (args.buffers_uniform is None):
        raise UsageError("give exactly one of --buffers / --buffers-uniform")
    eps = args.eps if args.eps is not None else [args.eps_uniform] * h
    bufs = args.buffers if args.buffers is not None else [args.buffers_uniform] * (h - 1)
    return check_config({"hops": h, "erasures": eps, "buffers": bufs, "packet_size_bytes": args.packet_size})


def _sim_settings(args) -> SimSettings:
    try:
        return SimSettings(args.epochs, args.warmup, args.seed, args.replications)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _table(rows: list[dict], columns: Sequence[str]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return "" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def _csv(rows: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
    return buf.getvalue()


def _render(args, payload: dict, rows: list[dict], columns: Sequence[str], header: str = "") -> str:
    if args.format == "json":
        return json.dumps(payload, indent=2) + "\n"
    if args.format == "csv":
        return _csv(rows, columns)
    return (header + "\n" if header else "") + _table(rows, columns)


@contextmanager
def _open_output(path: str):
    if path == "-":
        yield sys.stdout
    else:
        with open(path, "w") as fh:
            yield fh


def _emit(args, text: str) -> None:
    with _open_output(args.output) as fh:
        fh.write(text)


# commands ------------------------------------------------------------------


def cmd_config(args) -> int:
    _emit(args, config_from_args(args).to_json(indent=2) + "\n")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = config_from_args(args)
    sol = approx.solve(cfg, args.tol, args.max_iter)
    approx.capacity(sol)
    rows = [
        {"link": i + 1, "r": float(sol.arrival_rates[i]), "pb": float(sol.blocking_probs[i])}
        for i in range(cfg.hops)
    ]
    payload = {"config": cfg.to_dict(), **sol.to_dict()}
    header = f"capacity {sol.capacity:.10g} packets/epoch ({sol.iterations} iterations, residual {sol.residual:.2e})"
    _emit(args, _render(args, payload, rows, ["link", "r", "pb"], header))
    return EXIT_OK


def cmd_exact(args) -> int:
    cfg = config_from_args(args)
    P = exact.build_transition_matrix(cfg, args.max_states)
    if args.dump_matrix:
        with open(args.dump_matrix, "w") as fh:
            exact.write_coo(P, fh)
    pi = exact.stationary(P)
    res = exact.ExactChainResult(pi, exact.exact_throughput(cfg, pi), exact.marginals(cfg, pi))
    rows = [
        {"node": k + 1, "mean_occupancy": float(np.arange(len(m)) @ m), "p_empty": float(m[0]), "p_full": float(m[-1])}
        for k, m in enumerate(res.marginals)
    ]
    payload = {"config": cfg.to_dict(), "states": len(pi), **res.to_dict()}
    header = f"throughput {res.throughput:.10g} packets/epoch over {len(pi)} states"
    _emit(args, _render(args, payload, rows, ["node", "mean_occupancy", "p_empty", "p_full"], header))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = config_from_args(args)
    settings = _sim_settings(args)
    report = replicate(cfg, settings) if settings.replications > 1 else simulate(cfg, settings)
    if args.histogram_csv:
        with open(args.histogram_csv, "w") as fh:
            fh.write(report.histogram_csv())
    rows = [{"delay_epochs": d, "count": c} for d, c in sorted(report.delay_histogram.items())]
    payload = {"config": cfg.to_dict(), **report.to_dict()}
    header = (
        f"throughput {report.throughput:.6f} +/- {report.stderr_throughput:.2e} packets/epoch, "
        f"{report.delivered} delivered"
    )
    _emit(args, _render(args, payload, rows, ["delay_epochs", "count"], header))
    return EXIT_OK


def cmd_delay(args) -> int:
    cfg = config_from_args(args)
    sol = approx.solve(cfg, args.tol, args.max_iter)
    pmf = delay.total_delay(cfg, sol, args.tail_budget, args.occupancy_mode)
    rows = [{"delay_epochs": int(t), "probability": float(p)} for t, p in zip(pmf.support, pmf.masses)]
    if args.format == "csv":
        _emit(args, pmf.to_csv())
        return EXIT_OK
    payload = {"config": cfg.to_dict(), **pmf.to_dict()}
    s = pmf.summary()
    header = (
        f"mean {s['mean']:.6g}  variance {s['variance']:.6g}  "
        f"p50 {s['p50']}  p90 {s['p90']}  p99 {s['p99']}  tail {s['tail_mass']:.1e}"
    )
    _emit(args, _render(args, payload, rows, ["delay_epochs", "probability"], header))
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.range:
        raise UsageError("empty --range")
    if args.eps_uniform is None:
        raise UsageError("sweep needs --eps-uniform")
    if args.vary == "hops":
        if args.buffers_uniform is None:
            raise UsageError("--vary hops needs --buffers-uniform")
        if args.range[0] < 2:
            raise UsageError("hop range must start at 2 or more")
    else:
        if args.hops is None:
            raise UsageError("--vary buffer needs --hops")
        if args.range[0] < 1:
            raise UsageError("buffer range must start at 1 or more")
    settings = _sim_settings(args) if args.simulate else None
    rows = []
    for eps in sorted(args.eps_uniform):
        for x in args.range:
            h, m = (x, args.buffers_uniform) if args.vary == "hops" else (args.hops, x)
            cfg = NetworkConfig.uniform(h, eps, m)
            row = {"eps": eps, "hops": h, "buffer": m, "capacity": approx.solve(cfg, args.tol, args.max_iter).capacity}
            if settings is not None:
                rep = replicate(cfg, settings) if settings.replications > 1 else simulate(cfg, settings)
                row["sim_throughput"] = rep.throughput
                row["sim_stderr"] = rep.stderr_throughput
            rows.append(row)
    columns = ["eps", "hops", "buffer", "capacity"] + (["sim_throughput", "sim_stderr"] if settings else [])
    _emit(args, _render(args, {"rows": rows}, rows, columns))
    return EXIT_OK


def cmd_classify(args) -> int:
    cfg = config_from_args(args)
    est = planner.BufferPlanner(args.delta, args.tol).fit(cfg)
    rows = [c.to_dict() for c in est.classes_]
    payload = {"config": cfg.to_dict(), "nodes": rows}
    _emit(args, _render(args, payload, rows, ["node", "type", "in_rate", "out_rate", "mean_fill"]))
    return EXIT_OK


def cmd_allocate(args) -> int:
    cfg = config_from_args(args)
    if args.budget < 0:
        raise UsageError("--budget must be non-negative")
    plan = planner.allocate(cfg, args.budget, args.delta, args.tol)
    payload = {"config": cfg.to_dict(), **plan.to_dict()}
    header = f"buffers {list(plan.buffers)}  capacity {plan.capacity:.6g}  mean delay {plan.mean_delay:.6g}"
    if args.simulate_verify:
        rep = simulate(cfg.replace(buffers=list(plan.buffers)), _sim_settings(args))
        payload["simulated_throughput"] = rep.throughput
        payload["simulated_stderr"] = rep.stderr_throughput
        header += f"  simulated {rep.throughput:.6g} +/- {rep.stderr_throughput:.1e}"
    _emit(args, _render(args, payload, plan.trajectory, ["step", "node", "capacity", "mean_delay"], header))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linenet", description="Finite-buffer erasure line networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func: Callable, help: str, **kw) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(func=func)
        _add_config_flags(p, sweep=kw.get("sweep", False))
        return p

    def solver_flags(p):
        p.add_argument("--tol", type=float, default=approx.DEFAULT_TOL)
        p.add_argument("--max-iter", type=int, default=approx.DEFAULT_MAX_ITER)

    p = add("config", cmd_config, "print the normalised network JSON")
    p.add_argument("--output", "-o", default="-")

    p = add("solve", cmd_solve, "approximate capacity via the fixed point")
    solver_flags(p)
    _add_output_flags(p)

    p = add("exact", cmd_exact, "exact joint-chain throughput (small networks)")
    p.add_argument("--max-states", type=int, default=exact.DEFAULT_MAX_STATES)
    p.add_argument("--dump-matrix", metavar="FILE", help="write the transition matrix as 'row col prob' lines")
    _add_output_flags(p)

    p = add("simulate", cmd_simulate, "seeded Monte Carlo simulation")
    _add_sim_flags(p)
    p.add_argument("--histogram-csv", metavar="FILE")
    _add_output_flags(p)

    p = add("delay", cmd_delay, "analytic end-to-end delay distribution")
    solver_flags(p)
    p.add_argument("--tail-budget", type=float, default=delay.DEFAULT_TAIL_BUDGET)
    p.add_argument("--occupancy-mode", choices=delay.OCCUPANCY_MODES, default="arrival")
    _add_output_flags(p)

    p = add("sweep", cmd_sweep, "capacity versus hop count or buffer size", sweep=True)
    p.add_argument("--vary", choices=("hops", "buffer"), required=True)
    p.add_argument("--range", type=_range, required=True, metavar="A:B", help="inclusive integer range")
    p.add_argument("--simulate", action="store_true", help="add simulated throughput columns")
    solver_flags(p)
    _add_sim_flags(p)
    _add_output_flags(p, default="csv")

    p = add("classify", cmd_classify, "congestion type of each relay")
    p.add_argument("--delta", type=float, default=planner.DEFAULT_DELTA)
    p.add_argument("--tol", type=float, default=approx.DEFAULT_TOL)
    _add_output_flags(p)

    p = add("allocate", cmd_allocate, "greedy buffer allocation under a budget")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--delta", type=float, default=planner.DEFAULT_DELTA)
    p.add_argument("--tol", type=float, default=approx.DEFAULT_TOL)
    p.add_argument("--simulate-verify", action="store_true")
    _add_sim_flags(p)
    _add_output_flags(p)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"linenet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (approx.ConvergenceError, approx.FlowConservationError) as exc:
        print(f"linenet {args.command}: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (delay.DelayUndefined, exact.StateSpaceTooLarge) as exc:
        print(f"linenet {args.command}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
