"""``gridslack`` command line.

Exit codes:
    0   success (power flow converged / TPIA found zero slack)
    1   input could not be read, parsed or validated
    2   power flow did not converge
    3   TPIA solved with nonzero slack (infeasible network)
    4   TPIA solver failure
    64  usage error
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from . import casegen
from .model import Formulation, TpiaDefaults, ValidationError, VoltageBounds, to_per_unit, validate
from .netlist import (
    ParseError,
    load_feeder,
    parse_feeder,
    save_feeder,
    serialize_feeder,
    write_powerflow,
    write_results,
)
from .pdip import PdipOptions, solve
from .powerflow import NonConvergence, homotopy_solve, solve_powerflow
from .tpia import apply_compensation, build_problem, capacitive_ratings, default_enabled

EXIT_OK, EXIT_INPUT, EXIT_NONCONV, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_USAGE = 0, 1, 2, 3, 4, 64

# flag -> (formulation, reactive_only)
FORMULATIONS = {
    "i": (Formulation.I, False),
    "pq": (Formulation.PQ, False),
    "q": (Formulation.PQ, True),
    "gb": (Formulation.GB, False),
    "b": (Formulation.GB, True),
}


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class RunConfig:
    command: str
    input: Optional[str] = None
    formulation: str = "pq"
    reactive_only: bool = False
    capacitive_only: Optional[bool] = None
    vmin: Optional[float] = None
    vmax: Optional[float] = None
    bounds: bool = True
    alpha: float = 1.0
    homotopy: str = "auto"
    out: str = "table"
    trace: bool = False
    verbose: bool = False

    def resolved_formulation(self) -> tuple:
        form, ro = FORMULATIONS[self.formulation]
        if self.reactive_only:
            if form == Formulation.I:
                raise UsageError("--reactive-only cannot be combined with formulation i "
                                 "(slack currents have no reactive-only restriction)")
            ro = True
        return form, ro


# ---------------------------------------------------------------------------
# inputs


def builtin_case_text(name: str) -> Optional[str]:
    res = resources.files("gridslack").joinpath("cases", f"{name}.toml")
    return res.read_text(encoding="utf-8") if res.is_file() else None


def read_network(spec: str):
    """Load a feeder file, or a built-in case by name when no such file exists."""
    path = Path(spec)
    try:
        if path.is_file():
            net = load_feeder(path)
        else:
            text = builtin_case_text(spec)
            if text is None:
                raise InputError(f"{spec}: no such file or built-in case "
                                 f"(built-ins: {', '.join(sorted(casegen.BUILTIN_CASES))})")
            net = parse_feeder(text)
        return to_per_unit(net)
    except ParseError as exc:
        raise InputError(f"{spec}: parse error: {exc}") from None
    except ValidationError as exc:
        raise InputError(f"{spec}: invalid network:\n  " + "\n  ".join(exc.diagnostics)) from None
    except (OSError, UnicodeDecodeError, ValueError) as exc:
        raise InputError(f"{spec}: {exc}") from None


def bounds_for(cfg: RunConfig, network) -> Optional[VoltageBounds]:
    if not cfg.bounds:
        return None
    td = network.tpia_defaults
    lo = cfg.vmin if cfg.vmin is not None else (td.vmin if td and td.vmin is not None else 0.9)
    hi = cfg.vmax if cfg.vmax is not None else (td.vmax if td and td.vmax is not None else 1.1)
    try:
        return VoltageBounds(lo, hi)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def run_tpia(cfg: RunConfig, network, trace=None):
    form, ro = cfg.resolved_formulation()
    td = network.tpia_defaults
    enabled = td.enabled if td else None
    cap_only = cfg.capacitive_only if cfg.capacitive_only is not None else bool(td and td.capacitive_only)
    ratings = None
    if cap_only and form != Formulation.I:
        ratings = capacitive_ratings(enabled if enabled is not None else default_enabled(network), form)
    try:
        problem = build_problem(network, form, bounds_for(cfg, network), cfg.alpha, ro, enabled, ratings)
    except ValidationError as exc:
        raise InputError("invalid network:\n  " + "\n  ".join(exc.diagnostics)) from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return solve(problem, PdipOptions(trace=trace), homotopy=cfg.homotopy)


def tpia_exit(report) -> int:
    return {"feasible": EXIT_OK, "infeasible": EXIT_INFEASIBLE}.get(report.status, EXIT_SOLVER)


# ---------------------------------------------------------------------------
# commands


def cmd_powerflow(cfg: RunConfig, out, err) -> int:
    net = read_network(cfg.input)
    try:
        if cfg.homotopy == "on":
            res = homotopy_solve(net)
        else:
            try:
                res = solve_powerflow(net)
            except NonConvergence:
                if cfg.homotopy == "off":
                    raise
                res = homotopy_solve(net)
    except NonConvergence as exc:
        err.write(f"power flow did not converge: {exc}\n"
                  f"hint: run `gridslack tpia {cfg.input}` to locate the infeasibility\n")
        return EXIT_NONCONV
    if cfg.trace:
        for k, r in enumerate(res.residual_history):
            err.write(f"newton {k:3d}  |f| = {r:.3e}\n")
    out.write(write_powerflow(res, cfg.out))
    return EXIT_OK


def cmd_tpia(cfg: RunConfig, out, err, write_compensated: Optional[str] = None) -> int:
    cfg.resolved_formulation()  # usage errors before touching the input
    net = read_network(cfg.input)
    trace = None
    if cfg.trace:
        def trace(k, eps, kkt, eta):
            err.write(f"pdip {k:3d}  eps = {eps:.3e}  |kkt| = {kkt:.3e}  step = {eta:.4f}\n")
    report = run_tpia(cfg, net, trace)
    if report.status == "failed":
        err.write(f"solver failure: {report.message}\n")
        return EXIT_SOLVER
    out.write(write_results(report, cfg.out))
    if write_compensated:
        try:
            comp = apply_compensation(net, report)
        except ValueError as exc:
            err.write(f"cannot write compensated network: {exc}\n")
            return EXIT_SOLVER
        save_feeder(_clear_defaults(comp), write_compensated)
    return tpia_exit(report)


def _clear_defaults(network):
    # the compensation was sized against the original bound policy; the written
    # network keeps only the slack locations so a re-run uses standard bounds
    td = network.tpia_defaults
    if td is None:
        return network
    return replace(network, tpia_defaults=TpiaDefaults(enabled=td.enabled) if td.enabled else None)


def parse_factors(text: str) -> list:
    """``"0.5,1,1.5"`` or ``"start:stop:step"`` (inclusive of stop)."""
    try:
        if ":" in text:
            a, b, h = (float(x) for x in text.split(":"))
            if not h > 0 or b < a:
                raise ValueError
            n = int(math.floor((b - a) / h + 1e-9))
            vals = [a + k * h for k in range(n + 1)]
        else:
            vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad factor list {text!r}") from None
    if not vals or any(not v > 0 for v in vals):
        raise UsageError("load factors must be positive")
    return vals


def sweep_threads() -> int:
    raw = os.environ.get("GRIDSLACK_THREADS", "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"GRIDSLACK_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise UsageError("GRIDSLACK_THREADS must be >= 1")
        return n
    return min(4, os.cpu_count() or 1)


SWEEP_COLUMNS = ("factor", "formulation", "status", "sum_abs_P", "sum_abs_Q", "iterations", "homotopy")


def cmd_sweep(cfg: RunConfig, factors: list, formulations: list, out, err) -> int:
    for f in formulations:
        if f not in FORMULATIONS:
            raise UsageError(f"unknown formulation {f!r}")
        replace(cfg, formulation=f).resolved_formulation()
    base = read_network(cfg.input)
    jobs = [(fac, f) for fac in factors for f in formulations]

    def run(job):
        fac, f = job
        rep = run_tpia(replace(cfg, formulation=f), casegen.scale_loads(base, fac))
        return (repr(fac), rep.label, rep.status, repr(rep.total_p + 0.0), repr(rep.total_q + 0.0),
                str(rep.iterations), "yes" if rep.homotopy_used else "no")

    with ThreadPoolExecutor(max_workers=sweep_threads()) as pool:
        rows = list(pool.map(run, jobs))  # map preserves job order
    out.write(",".join(SWEEP_COLUMNS) + "\n")
    for row in rows:
        out.write(",".join(row) + "\n")
    return EXIT_SOLVER if any(r[2] == "failed" for r in rows) else EXIT_OK


def cmd_gen(args, out, err) -> int:
    if args.case:
        builder = casegen.BUILTIN_CASES.get(args.case)
        if builder is None:
            raise UsageError(f"unknown case {args.case!r}")
        net = builder()
    else:
        if args.n < 2:
            raise UsageError("--n must be >= 2")
        spec = casegen.GenSpec(n_buses=args.n, phasing=args.phasing, meshed_links=args.meshed, seed=args.seed)
        net = casegen.generate(spec)
    if args.load_factor != 1.0:
        if not args.load_factor > 0:
            raise UsageError("--load-factor must be positive")
        net = casegen.scale_loads(net, args.load_factor)
    text = serialize_feeder(net)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    return EXIT_OK


def cmd_validate(cfg: RunConfig, out, err) -> int:
    path = Path(cfg.input)
    try:
        text = path.read_text(encoding="utf-8") if path.is_file() else builtin_case_text(cfg.input)
        if text is None:
            raise InputError(f"{cfg.input}: no such file or built-in case")
        net = parse_feeder(text, validate=False)
    except ParseError as exc:
        err.write(f"{cfg.input}: parse error: {exc}\n")
        return EXIT_INPUT
    except (OSError, UnicodeDecodeError) as exc:
        err.write(f"{cfg.input}: {exc}\n")
        return EXIT_INPUT
    diags = validate(net)
    if diags:
        for d in diags:
            err.write(f"{cfg.input}: {d}\n")
        return EXIT_INPUT
    n_nodes = sum(len(b.phases) for b in net.buses)
    out.write(f"{cfg.input}: ok ({len(net.buses)} buses, {n_nodes} node-phases, "
              f"{len(net.branches)} branches, {len(net.transformers)} transformers, "
              f"{len(net.loads)} loads)\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _solver_options(p):
    p.add_argument("input", help="feeder file, or the name of a built-in case")
    p.add_argument("-f", "--formulation", choices=sorted(FORMULATIONS), default="pq")
    p.add_argument("--reactive-only", action="store_true", help="same as choosing q or b")
    cap = p.add_mutually_exclusive_group()
    cap.add_argument("--capacitive-only", dest="capacitive_only", action="store_const", const=True,
                     help="keep reactive slack nonnegative (capacitor-like)")
    cap.add_argument("--allow-inductive", dest="capacitive_only", action="store_const", const=False,
                     help="ignore a capacitive_only default from the feeder file")
    p.add_argument("--vmin", type=float)
    p.add_argument("--vmax", type=float)
    p.add_argument("--no-bounds", action="store_true", help="drop voltage magnitude bounds")
    p.add_argument("--alpha", type=float, default=1.0, help="objective scaling")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gridslack", description="Three-phase feeder power flow and infeasibility analysis.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--homotopy", choices=("auto", "on", "off"), default="auto")
        p.add_argument("--out", choices=("table", "csv"), default="table")
        p.add_argument("--trace", action="store_true", help="per-iteration log on stderr")

    p = sub.add_parser("powerflow", help="Newton-Raphson power flow")
    p.add_argument("input")
    common(p)

    p = sub.add_parser("tpia", help="minimal slack injections under voltage bounds")
    _solver_options(p)
    common(p)
    p.add_argument("--write-compensated", metavar="PATH",
                   help="write the network with the reactive slack installed (q and b only)")

    p = sub.add_parser("sweep", help="TPIA over a range of load factors (CSV)")
    _solver_options(p)
    p.add_argument("--factors", default="0.5,1.0", help="comma list or start:stop:step")
    p.add_argument("--formulations", default="i,pq,gb", help="comma list of formulations")
    p.add_argument("--homotopy", choices=("auto", "on", "off"), default="auto")

    p = sub.add_parser("gen", help="write a synthetic or built-in feeder")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--phasing", choices=("ABC", "mixed"), default="mixed")
    p.add_argument("--meshed", type=int, default=0, help="loop-closing links")
    p.add_argument("--load-factor", type=float, default=1.0)
    p.add_argument("--case", help="emit a built-in case instead")
    p.add_argument("-o", "--output")

    p = sub.add_parser("validate", help="parse and check a feeder file")
    p.add_argument("input")
    return ap


def _config(args) -> RunConfig:
    if not getattr(args, "alpha", 1.0) > 0:
        raise UsageError("--alpha must be positive")
    no_bounds = getattr(args, "no_bounds", False)
    if no_bounds and (getattr(args, "vmin", None) is not None or getattr(args, "vmax", None) is not None):
        raise UsageError("--no-bounds conflicts with --vmin/--vmax")
    return RunConfig(
        command=args.command,
        input=getattr(args, "input", None),
        formulation=getattr(args, "formulation", "pq"),
        reactive_only=getattr(args, "reactive_only", False),
        capacitive_only=getattr(args, "capacitive_only", None),
        vmin=getattr(args, "vmin", None),
        vmax=getattr(args, "vmax", None),
        bounds=not no_bounds,
        alpha=getattr(args, "alpha", 1.0),
        homotopy=getattr(args, "homotopy", "auto"),
        out=getattr(args, "out", "table"),
        trace=getattr(args, "trace", False),
    )


def main(argv=None, stdout=None, stderr=None) -> int:
    out = stdout or sys.stdout
    err = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config(args)
        if args.command == "powerflow":
            return cmd_powerflow(cfg, out, err)
        if args.command == "tpia":
            return cmd_tpia(cfg, out, err, args.write_compensated)
        if args.command == "sweep":
            forms = [f.strip() for f in args.formulations.split(",") if f.strip()]
            return cmd_sweep(cfg, parse_factors(args.factors), forms, out, err)
        if args.command == "gen":
            return cmd_gen(args, out, err)
        return cmd_validate(cfg, out, err)
    except UsageError as exc:
        err.write(f"gridslack: error: {exc}\n")
        return EXIT_USAGE
    except InputError as exc:
        err.write(f"gridslack: {exc}\n")
        return EXIT_INPUT


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
