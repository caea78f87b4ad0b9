"""Command-line front end.

::

    redhes <pf|hessian|verify|bench|track> --case PATH [--batch N] [--threads T]
           [--tol X] [--out PATH] [--format csv|json] [--seed S] [--config FILE] [--plot]

Exit codes: 0 success, 1 numerical failure, 2 usage or parse error.
Option values come from flags first, then the JSON ``--config`` file, then
built-in defaults.  ``REDHES_THREADS`` sets the default thread count.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .grid import MatpowerSyntaxError, NetworkError, load_case
from .powerflow import LoadVector, PowerFlowProblem, record_tape
from .reduction import (DEFAULT_MEMORY_BUDGET, STAGES, NewtonError, full_reduced_hessian,
                        make_workspace, newton_solve, reduced_gradient)
from .sparse_linalg import SingularMatrixError, default_threads

log = logging.getLogger("redhes")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2
COMMANDS = ("pf", "hessian", "verify", "bench", "track")

BENCH_COLUMNS = ("case", "N", "threads", "batches", "ms_spmul", "ms_solve", "ms_projection",
                 "ms_muladd", "ms_total", "time_ratio", "max_diff")
PF_COLUMNS = ("bus", "type", "vm", "va")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    case: str
    batch: int = 16
    threads: int = 1
    tol: float = 1e-8
    out: str | None = None
    format: str = "csv"
    seed: int = 0
    plot: bool = False
    memory_budget_mb: float = DEFAULT_MEMORY_BUDGET / 2**20
    # verify
    fd: bool = True
    # bench
    batches: list | None = None
    repeat: int = 3
    # track
    periods: int = 60
    scenario: str = "sinusoidal"
    amplitude: float = 0.05
    sigma: float = 0.005
    oracle: bool = False

    def validate(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if self.batch < 1:
            raise UsageError("--batch must be at least 1")
        if self.threads < 1:
            raise UsageError("--threads must be at least 1")
        if not self.tol > 0:
            raise UsageError("--tol must be positive")
        if self.format not in ("csv", "json"):
            raise UsageError("--format must be csv or json")
        if self.periods < 1:
            raise UsageError("--periods must be at least 1")
        if self.repeat < 1:
            raise UsageError("--repeat must be at least 1")
        if self.scenario not in ("sinusoidal", "random-walk"):
            raise UsageError("--scenario must be sinusoidal or random-walk")
        if self.batches is not None and any(int(n) < 1 for n in self.batches):
            raise UsageError("--batches entries must be at least 1")
        if self.plot and not self.out:
            raise UsageError("--plot needs --out (figures are written next to it)")

    @property
    def memory_budget(self) -> int:
        return int(self.memory_budget_mb * 2**20)


# --------------------------------------------------------------------------
# argument handling

def _batch_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="redhes",
        description="Reduced-space derivatives of the AC power-flow equations.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("command", choices=COMMANDS)
    # defaults are None so that config-file values can fill the gaps
    ap.add_argument("--case", help="MATPOWER case file or shipped case name")
    ap.add_argument("--batch", type=int, help="batch size N (default 16)")
    ap.add_argument("--threads", type=int,
                    help="worker threads (default $REDHES_THREADS or 1)")
    ap.add_argument("--tol", type=float, help="Newton tolerance, inf-norm (default 1e-8)")
    ap.add_argument("--out", help="output file")
    ap.add_argument("--format", choices=("csv", "json"), help="output format (default csv)")
    ap.add_argument("--seed", type=int, help="random seed (default 0)")
    ap.add_argument("--config", help="JSON file with option defaults")
    ap.add_argument("--plot", action="store_true", default=None,
                    help="also render PNG figures next to --out")
    ap.add_argument("--memory-budget-mb", type=float, dest="memory_budget_mb",
                    help="cap on batch buffers in MiB")
    ap.add_argument("--no-fd", action="store_false", dest="fd", default=None,
                    help="verify: skip the finite-difference oracles")
    ap.add_argument("--batches", type=_batch_list,
                    help="bench: comma-separated batch sizes (default powers of two)")
    ap.add_argument("--repeat", type=int, help="bench: timing repetitions, best kept")
    ap.add_argument("--periods", type=int, help="track: number of periods T (default 60)")
    ap.add_argument("--scenario", choices=("sinusoidal", "random-walk"),
                    help="track: load profile")
    ap.add_argument("--amplitude", type=float, help="track: load amplitude (default 0.05)")
    ap.add_argument("--sigma", type=float, help="track: random-walk step (default 0.005)")
    ap.add_argument("--oracle", action="store_true", default=None,
                    help="track: compare with the exact optimum each period")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def make_config(args: argparse.Namespace) -> RunConfig:
    """Merge flags over the config file over defaults."""
    values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        known = {f.name for f in fields(RunConfig)} - {"command"}
        unknown = set(loaded) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(loaded)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    values["command"] = args.command
    if "threads" not in values:
        try:
            values["threads"] = default_threads()
        except ValueError:
            raise UsageError("REDHES_THREADS must be an integer") from None
    if not values.get("case"):
        raise UsageError("--case is required")
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# output

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_table(rows: list[dict], columns, cfg: RunConfig, stream=None, extra: dict | None = None):
    """Rows as CSV, or as JSON ``{"rows": [...], **extra}``."""
    own = stream is None and cfg.out
    fh = open(cfg.out, "w", newline="") if own else (stream or sys.stdout)
    try:
        if cfg.format == "json":
            doc = dict(extra or {})
            doc["rows"] = [{k: _json_safe(r[k]) for k in columns} for r in rows]
            json.dump(doc, fh, indent=1)
            fh.write("\n")
        else:
            w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n",
                               extrasaction="ignore")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r[k]) for k in columns})
    finally:
        if own:
            fh.close()


def _json_safe(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, (np.integer, np.bool_)):
        return v.item()
    return v


def _sidecar(out: str, suffix: str, ext: str) -> Path:
    p = Path(out)
    return p.with_name(f"{p.stem}_{suffix}.{ext}")


def _problem(cfg: RunConfig, loads: LoadVector | None = None) -> PowerFlowProblem:
    return PowerFlowProblem(load_case(cfg.case), loads)


# --------------------------------------------------------------------------
# commands

def cmd_pf(cfg: RunConfig) -> int:
    prob = _problem(cfg)
    net = prob.network
    t0 = time.perf_counter()
    res = newton_solve(prob, prob.initial_parameters(), tol=cfg.tol)
    dt = time.perf_counter() - t0
    print(f"{net.name}: converged in {res.iterations} iterations, "
          f"|g|_inf = {res.residual_norm:.3e}, {1e3 * dt:.1f} ms")
    print(f"  cost = {float(prob.objective(res.x, prob.initial_parameters())):.6f} $/h")
    if cfg.out:
        tape = record_tape(net, res.x, prob.initial_parameters())
        rows = [{"bus": b.id, "type": b.bus_type.name, "vm": float(tape.vm[i]),
                 "va": float(tape.theta[i])} for i, b in enumerate(net.buses)]
        write_table(rows, PF_COLUMNS, cfg, extra={
            "case": net.name, "iterations": res.iterations,
            "residual_norm": res.residual_norm, "history": res.history})
    return EXIT_OK


def _workspace(cfg: RunConfig, prob: PowerFlowProblem):
    p = prob.initial_parameters()
    proj = newton_solve(prob, p, tol=cfg.tol)
    ws = make_workspace(prob, proj, p, threads=cfg.threads,
                        memory_budget=cfg.memory_budget)
    reduced_gradient(ws)
    return ws


def cmd_hessian(cfg: RunConfig) -> int:
    prob = _problem(cfg)
    ws = _workspace(cfg, prob)
    t0 = time.perf_counter()
    H = full_reduced_hessian(ws, cfg.batch)
    total = time.perf_counter() - t0
    n = prob.n_p
    print(f"{prob.network.name}: reduced Hessian {n} x {n}, N = {cfg.batch}, "
          f"{ws.batches} batches, {cfg.threads} thread(s), {1e3 * total:.1f} ms")
    for s in STAGES:
        print(f"  {s:<22s} {1e3 * ws.timings[s]:10.2f} ms")
    timing_rows = [{"stage": s, "ms": 1e3 * ws.timings[s]} for s in STAGES]
    timing_rows.append({"stage": "total", "ms": 1e3 * total})
    if cfg.out:
        if cfg.format == "json":
            with open(cfg.out, "w") as fh:
                json.dump({"case": prob.network.name, "N": cfg.batch, "threads": cfg.threads,
                           "batches": ws.batches, "shape": [n, n],
                           "timings_ms": {r["stage"]: r["ms"] for r in timing_rows},
                           "gradient": ws.gradient.tolist(), "hessian": H.tolist()}, fh)
        else:
            np.savetxt(cfg.out, H, delimiter=",", fmt="%.17g")
            side = _sidecar(cfg.out, "timings", "csv")
            with open(side, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["stage", "ms"], lineterminator="\n")
                w.writeheader()
                w.writerows({"stage": r["stage"], "ms": repr(r["ms"])} for r in timing_rows)
        if cfg.plot:
            from .plotting import figure_path, plot_hessian, plot_stage_breakdown
            plot_hessian(H, figure_path(cfg.out, "hessian"))
            plot_stage_breakdown(ws.timings, figure_path(cfg.out, "stages"),
                                 f"{prob.network.name}, N = {cfg.batch}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    from .verify import run_checks
    prob = _problem(cfg)
    batch_sizes = tuple(sorted({1, 4, 32, cfg.batch}))
    threads = tuple(sorted({1, cfg.threads}))
    results = run_checks(prob, batch_sizes=batch_sizes, threads=threads, seed=cfg.seed,
                         tol=cfg.tol, fd=cfg.fd)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{prob.network.name}: {'all checks passed' if ok else 'FAILED'}")
    if cfg.out:
        write_table([r.as_dict() for r in results], ("name", "value", "tol", "passed", "detail"),
                    cfg, extra={"case": prob.network.name, "passed": ok})
    return EXIT_OK if ok else EXIT_NUMERICAL


def bench_sizes(n_p: int, budget_cols: int | None = None) -> list[int]:
    """Powers of two up to ``min(n_p, budget_cols)``."""
    cap = min(n_p, budget_cols or n_p)
    sizes, n = [], 1
    while n <= cap:
        sizes.append(n)
        n *= 2
    return sizes


def _timed_hessian(prob, ws0, n: int, threads: int, repeat: int, budget: int):
    best = None
    for _ in range(repeat):
        ws = make_workspace(prob, ws0.projection, ws0.p, threads=threads, memory_budget=budget)
        ws.lam = ws0.lam
        t0 = time.perf_counter()
        H = full_reduced_hessian(ws, n)
        total = time.perf_counter() - t0
        if best is None or total < best[0]:
            best = (total, dict(ws.timings), H, ws.batches)
    return best


def cmd_bench(cfg: RunConfig) -> int:
    prob = _problem(cfg)
    ws = _workspace(cfg, prob)
    n_p = prob.n_p
    per_col = max(1, ws.batch_bytes(1))
    sizes = cfg.batches or bench_sizes(n_p, cfg.memory_budget // per_col)
    # warm the compiled kernels before timing
    full_reduced_hessian(make_workspace(prob, ws.projection, ws.p), n_p)
    baseline = _timed_hessian(prob, ws, 1, 1, cfg.repeat, cfg.memory_budget)
    base_t, H_ref = baseline[0], baseline[2]
    rows = []
    configs = [(1, 1)] + [(n, cfg.threads) for n in sizes if (n, cfg.threads) != (1, 1)]
    for n, t in configs:
        if (n, t) == (1, 1):
            total, tim, H, nb = baseline
        else:
            total, tim, H, nb = _timed_hessian(prob, ws, n, t, cfg.repeat, cfg.memory_budget)
        rows.append({"case": prob.network.name, "N": n, "threads": t, "batches": nb,
                     "ms_spmul": 1e3 * tim["SpMul"], "ms_solve": 1e3 * tim["BatchSparseSolve"],
                     "ms_projection": 1e3 * tim["BatchTensorProjection"],
                     "ms_muladd": 1e3 * tim["SpMulAdd"], "ms_total": 1e3 * total,
                     "time_ratio": total / base_t,
                     "max_diff": float(np.abs(H - H_ref).max())})
        print(f"  N = {n:5d}  threads = {t}  batches = {nb:4d}  "
              f"{1e3 * total:9.1f} ms  ratio {total / base_t:.3f}")
    worst = max(r["max_diff"] for r in rows)
    write_table(rows, BENCH_COLUMNS, cfg, extra={"case": prob.network.name, "n_p": n_p})
    if cfg.plot:
        from .plotting import figure_path, plot_bench
        plot_bench(rows, figure_path(cfg.out, "scaling"))
    if worst > 1e-12:
        print(f"batch invariance violated: max |H_N - H_1| = {worst:.3e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_track(cfg: RunConfig) -> int:
    from .tracking import CSV_COLUMNS, LoadScenario, run_tracking
    net = load_case(cfg.case)
    base = LoadVector.from_network(net)
    if cfg.scenario == "sinusoidal":
        scen = LoadScenario.sinusoidal(base, cfg.periods, cfg.amplitude)
    else:
        scen = LoadScenario.random_walk(base, cfg.periods, cfg.sigma, cfg.amplitude, cfg.seed)
    p0 = PowerFlowProblem(net).initial_parameters()
    trace = run_tracking(net, scen, p0, cfg.batch, threads=cfg.threads, oracle=cfg.oracle,
                         tol=cfg.tol)
    failed = sum(r.failed for r in trace.records)
    g = trace.column("grad_norm")
    print(f"{net.name}: {len(trace)} periods, {failed} failed, "
          f"final |grad F| = {g[-1]:.3e}, mean step time "
          f"{np.nanmean(trace.column('ms_step1') + trace.column('ms_step2')):.1f} ms")
    if cfg.oracle:
        print(f"  median |p - p*| = {trace.median_deviation():.3e}, "
              f"max = {np.nanmax(trace.column('max_dev')):.3e}")
    if cfg.out:
        write_table(trace.rows(), CSV_COLUMNS, cfg,
                    extra={"case": net.name, "scenario": scen.rule, "amplitude": scen.amplitude})
        if cfg.plot:
            from .plotting import figure_path, plot_tracking
            plot_tracking(trace, figure_path(cfg.out, "tracking"), net.name)
    return EXIT_NUMERICAL if failed else EXIT_OK


HANDLERS = {"pf": cmd_pf, "hessian": cmd_hessian, "verify": cmd_verify,
            "bench": cmd_bench, "track": cmd_track}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
        return HANDLERS[cfg.command](cfg)
    except UsageError as exc:
        print(f"redhes: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MatpowerSyntaxError, NetworkError, FileNotFoundError) as exc:
        print(f"redhes: cannot load case: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NewtonError, SingularMatrixError, MemoryError, ArithmeticError) as exc:
        print(f"redhes: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
