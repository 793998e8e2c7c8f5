"""Command-line interface: ``certbound bound | sweep | validate``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import sdp
from .bounds import (
    BoundResult,
    Direction,
    InconsistentBoundsError,
    Kind,
    MomentConstraint,
    UncertaintyProblem,
    bound_interval,
    build_bound_program,
    compute_bound,
    moment_constraints_from_mean_cov,
)
from .dynamics import BlowUpError, VectorField
from .montecarlo import InitialDistribution, consistency_check, estimate_expectation
from .polynomial import ParseError, PolynomialError, VariableSpace, parse_expression, render
from .sos import SemialgebraicSet, Verdict

log = logging.getLogger("certbound")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_MARGINAL = 2
EXIT_FAILED = 3

CSV_COLUMNS = ("T", "omega", "observable", "lb", "ub", "lb_status", "ub_status", "lb_cert", "ub_cert", "seconds")
MOMENT_WARN = 1e3


class InputError(ValueError):
    """Bad problem file or command-line input (exit code 1)."""


# ---------------------------------------------------------------------------
# problem files


@dataclass
class MonteCarloSettings:
    distribution: str = "normal"
    count: int = 10_000
    step: float = 1e-3
    seed: int = 0


@dataclass
class ProblemFile:
    variables: list[str]
    field: list[str]
    observable: str
    horizon: float
    degree: int
    mean: list[float] | None = None
    cov: list[list[float]] | None = None
    moments: list[dict] | None = None
    X: list[str] = field(default_factory=list)
    X0: list[str] = field(default_factory=list)
    tol: float | None = None
    max_iter: int | None = None
    montecarlo: MonteCarloSettings = field(default_factory=MonteCarloSettings)
    time_name: str = "t"

    @classmethod
    def from_dict(cls, data: Any) -> "ProblemFile":
        if not isinstance(data, dict):
            raise InputError("problem file must contain a JSON object")
        for key in ("variables", "field", "observable", "horizon", "degree", "moments"):
            if key not in data:
                raise InputError(f"missing required key {key!r}")
        variables = data["variables"]
        if not isinstance(variables, list) or not all(isinstance(v, str) for v in variables):
            raise InputError("'variables' must be a list of names")
        fld = data["field"]
        if isinstance(fld, dict):
            try:
                fld = [fld[v] for v in variables]
            except KeyError as exc:
                raise InputError(f"'field' has no entry for state {exc.args[0]!r}") from None
        if not isinstance(fld, list) or len(fld) != len(variables):
            raise InputError(f"'field' must give one expression for each of {len(variables)} states")
        out = cls(
            variables=list(variables),
            field=[str(e) for e in fld],
            observable=str(data["observable"]),
            horizon=_number(data["horizon"], "horizon"),
            degree=_integer(data["degree"], "degree"),
            X=_string_list(data.get("X", []), "X"),
            X0=_string_list(data.get("X0", []), "X0"),
        )
        moments = data["moments"]
        if isinstance(moments, list):
            moments = {"list": moments}
        if not isinstance(moments, dict):
            raise InputError("'moments' must be an object or a list")
        if "mean" in moments or "cov" in moments:
            moments = {"mean_cov": moments}
        has_mc, has_list = "mean_cov" in moments, "list" in moments
        if has_mc == has_list:
            raise InputError("'moments' needs exactly one of 'mean_cov' or 'list'")
        if has_mc:
            mc = moments["mean_cov"]
            try:
                out.mean = [float(x) for x in mc["mean"]]
                out.cov = [[float(x) for x in row] for row in mc["cov"]]
            except (KeyError, TypeError, ValueError):
                raise InputError("'mean_cov' needs numeric 'mean' (vector) and 'cov' (matrix)") from None
        else:
            entries = []
            for k, item in enumerate(moments["list"]):
                if not isinstance(item, dict) or "h" not in item or "c" not in item:
                    raise InputError(f"moment entry {k} needs 'h' and 'c'")
                kind = item.get("kind", Kind.INEQUALITY.value)
                if kind not in (Kind.INEQUALITY.value, Kind.EQUALITY.value):
                    raise InputError(f"moment entry {k}: kind must be 'inequality' or 'equality'")
                entries.append({"h": str(item["h"]), "c": _number(item["c"], f"moments[{k}].c"), "kind": kind})
            out.moments = entries
        solver = data.get("solver", {}) or {}
        if "tol" in solver:
            out.tol = _number(solver["tol"], "solver.tol")
        if "max_iter" in solver:
            out.max_iter = _integer(solver["max_iter"], "solver.max_iter")
        mc = data.get("montecarlo", {}) or {}
        unknown = set(mc) - {"distribution", "count", "step", "seed"}
        if unknown:
            raise InputError(f"unknown montecarlo settings: {sorted(unknown)}")
        out.montecarlo = MonteCarloSettings(
            distribution=str(mc.get("distribution", "normal")),
            count=_integer(mc.get("count", 10_000), "montecarlo.count"),
            step=_number(mc.get("step", 1e-3), "montecarlo.step"),
            seed=_integer(mc.get("seed", 0), "montecarlo.seed"),
        )
        return out

    def to_dict(self) -> dict:
        data: dict[str, Any] = {
            "variables": list(self.variables),
            "field": list(self.field),
            "observable": self.observable,
            "horizon": self.horizon,
            "degree": self.degree,
        }
        if self.moments is not None:
            data["moments"] = {"list": [dict(m) for m in self.moments]}
        else:
            data["moments"] = {"mean_cov": {"mean": list(self.mean), "cov": [list(r) for r in self.cov]}}
        if self.X:
            data["X"] = list(self.X)
        if self.X0:
            data["X0"] = list(self.X0)
        solver = {}
        if self.tol is not None:
            solver["tol"] = self.tol
        if self.max_iter is not None:
            solver["max_iter"] = self.max_iter
        if solver:
            data["solver"] = solver
        mc = self.montecarlo
        data["montecarlo"] = {"distribution": mc.distribution, "count": mc.count, "step": mc.step, "seed": mc.seed}
        return data

    @property
    def state_space(self) -> VariableSpace:
        return VariableSpace(self.variables)

    def _parse(self, text: str, space: VariableSpace, where: str):
        try:
            return parse_expression(text, space)
        except ParseError as exc:
            pointer = " " * exc.position + "^"
            raise InputError(f"{where}: {exc}\n    {text}\n    {pointer}") from None
        except PolynomialError as exc:
            raise InputError(f"{where}: {exc}") from None

    def to_problem(self) -> UncertaintyProblem:
        try:
            tx = VariableSpace([self.time_name, *self.variables])
        except PolynomialError as exc:
            raise InputError(f"variables: {exc}") from None
        state = self.state_space
        comps = [self._parse(e, tx, f"field[{i}] ({self.variables[i]})") for i, e in enumerate(self.field)]
        vf = VectorField(tx, tuple(comps))
        g = self._parse(self.observable, state, "observable")
        if self.moments is not None:
            constraints = [
                MomentConstraint(self._parse(m["h"], state, f"moments[{k}].h"), m["c"], m["kind"])
                for k, m in enumerate(self.moments)
            ]
        else:
            try:
                constraints = moment_constraints_from_mean_cov(self.mean, self.cov, state)
            except ValueError as exc:
                raise InputError(f"moments: {exc}") from None
        X = SemialgebraicSet(state, tuple(self._parse(e, state, f"X[{k}]") for k, e in enumerate(self.X)))
        X0 = SemialgebraicSet(state, tuple(self._parse(e, state, f"X0[{k}]") for k, e in enumerate(self.X0)))
        try:
            return UncertaintyProblem(vf, g, self.horizon, constraints, self.degree, X, X0)
        except (ValueError, PolynomialError) as exc:
            raise InputError(str(exc)) from None

    @classmethod
    def from_problem(cls, problem: UncertaintyProblem, mean=None, cov=None,
                     montecarlo: MonteCarloSettings | None = None) -> "ProblemFile":
        """Render an in-memory problem back to file form (moments as an explicit list unless mean/cov given)."""
        out = cls(
            variables=list(problem.field.state_names),
            field=[render(c) for c in problem.field.components],
            observable=render(problem.observable),
            horizon=problem.horizon,
            degree=problem.omega,
            X=[render(p) for p in problem.X.inequalities if not _is_one(p)],
            X0=[render(p) for p in problem.X0.inequalities if not _is_one(p)],
            time_name=problem.field.time_name,
        )
        if mean is not None:
            out.mean = [float(x) for x in mean]
            out.cov = [[float(x) for x in row] for row in np.asarray(cov, dtype=float)]
        else:
            out.moments = [{"h": render(mc.h), "c": mc.c, "kind": mc.kind.value} for mc in problem.constraints]
        if montecarlo is not None:
            out.montecarlo = montecarlo
        return out

    def solver_options(self, tol: float | None = None) -> sdp.SolverOptions:
        opts = sdp.SolverOptions()
        if self.tol is not None:
            opts.tol = self.tol
        if tol is not None:
            opts.tol = tol
        if self.max_iter is not None:
            opts.max_iter = self.max_iter
        return opts

    def distribution(self, variant: str | None = None) -> InitialDistribution:
        variant = variant or self.montecarlo.distribution
        variant = {"uniform": "uniform_box"}.get(variant, variant)
        if self.mean is not None:
            mean, cov = np.array(self.mean), np.array(self.cov)
        else:
            mean, var = self.to_problem().moment_estimates()
            if mean is None or var is None:
                raise InputError("Monte Carlo needs equality constraints fixing each mean and second moment")
            cov = np.diag(var)
        try:
            return InitialDistribution(variant, mean, cov)
        except ValueError as exc:
            raise InputError(f"distribution: {exc}") from None


def _is_one(p) -> bool:
    return p.degree == 0 and abs(p.coefficient((0,) * p.space.dim) - 1.0) == 0


def _number(x, what: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise InputError(f"{what!r} must be a number")
    return float(x)


def _integer(x, what: str) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise InputError(f"{what!r} must be an integer")
    return x


def _string_list(x, what: str) -> list[str]:
    if not isinstance(x, list) or not all(isinstance(e, str) for e in x):
        raise InputError(f"{what!r} must be a list of expression strings")
    return list(x)


def resolve_path(name: str) -> Path | None:
    """A filesystem path, or the bundled data file of that name."""
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("certbound") / "data" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    return None


def load_problem_file(name: str) -> ProblemFile:
    path = resolve_path(name)
    if path is None:
        raise InputError(f"{name}: no such file (and no bundled problem of that name)")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    try:
        return ProblemFile.from_dict(data)
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from None


def _warn_large_moments(pf: ProblemFile) -> None:
    values = []
    if pf.mean is not None:
        values = [c.c for c in moment_constraints_from_mean_cov(pf.mean, pf.cov, pf.state_space)]
    elif pf.moments:
        values = [m["c"] for m in pf.moments]
    big = max((abs(v) for v in values), default=0.0)
    if big > MOMENT_WARN:
        log.warning("moment data reach %.3g; consider rescaling the states for better conditioning", big)


# ---------------------------------------------------------------------------
# reporting


@dataclass
class ReportRow:
    T: float
    omega: int
    observable: str
    lower: BoundResult | None = None
    upper: BoundResult | None = None
    errors: list[str] = field(default_factory=list)
    mc_mean: float | None = None
    mc_stderr: float | None = None

    @property
    def seconds(self) -> float:
        return sum(r.seconds for r in (self.lower, self.upper) if r is not None)

    def results(self) -> list[BoundResult]:
        return [r for r in (self.lower, self.upper) if r is not None]

    def format(self) -> str:
        parts = [f"T={self.T:g}", f"omega={self.omega}", f"g={self.observable}"]
        for tag, r in (("LB", self.lower), ("UB", self.upper)):
            if r is not None:
                parts.append(f"{tag}={r.value:.6g} [{r.status.value}, {r.verdict.value}]")
        if self.mc_mean is not None:
            parts.append(f"MC={self.mc_mean:.6g}+-{self.mc_stderr:.2g}")
        parts.append(f"{self.seconds:.2f}s")
        parts.extend(f"error: {e}" for e in self.errors)
        return "  ".join(parts)


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6g}"


def csv_text(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        lo, up = row.lower, row.upper
        w.writerow([
            _fmt(row.T), row.omega, row.observable,
            _fmt(lo.value if lo else None), _fmt(up.value if up else None),
            lo.status.value if lo else "error", up.status.value if up else "error",
            lo.verdict.value if lo else Verdict.FAILED.value, up.verdict.value if up else Verdict.FAILED.value,
            _fmt(row.seconds),
        ])
    return buf.getvalue()


def exit_code_for(results: Sequence[BoundResult], errors: Sequence[str] = ()) -> int:
    if errors or not results:
        return EXIT_FAILED
    verdicts = {r.verdict for r in results}
    if Verdict.FAILED in verdicts:
        return EXIT_FAILED
    if Verdict.MARGINAL in verdicts:
        return EXIT_MARGINAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# commands


def _directions(choice: str) -> list[Direction]:
    return [Direction.LOWER, Direction.UPPER] if choice == "both" else [Direction(choice)]


def _load(args) -> ProblemFile:
    pf = load_problem_file(args.problem)
    if getattr(args, "observable", None):
        pf.observable = args.observable
    if getattr(args, "omega", None) is not None:
        pf.degree = args.omega
    if getattr(args, "horizon", None) is not None:
        pf.horizon = args.horizon
    _warn_large_moments(pf)
    return pf


def cmd_bound(args) -> int:
    pf = _load(args)
    problem = pf.to_problem()
    options = pf.solver_options(args.tol)
    row = ReportRow(problem.horizon, problem.omega, pf.observable)
    for d in _directions(args.direction):
        program = build_bound_program(problem, d)
        if args.export_sdpa:
            path = Path(args.export_sdpa)
            if args.direction == "both":
                path = path.with_name(f"{path.stem}.{d.value}{path.suffix}")
            sdp.write_sdpa(program.sdp_problem, path)
            log.info("wrote %s", path)
        try:
            res = compute_bound(problem, d, options, program=program)
        except Exception as exc:  # noqa: BLE001 - reported through the exit code
            row.errors.append(f"{d.value}: {exc}")
            continue
        setattr(row, d.value, res)
    if row.lower and row.upper and row.lower.certified and row.upper.certified:
        if row.lower.value > row.upper.value + 2 * options.tol * max(1.0, abs(row.upper.value)):
            row.errors.append(f"lower bound {row.lower.value:.6g} exceeds upper bound {row.upper.value:.6g}")
    print(row.format())
    return exit_code_for(row.results(), row.errors)


def _solve_cell(payload: tuple[dict, float, int, str, float | None]) -> tuple[BoundResult | None, str | None]:
    data, T, omega, direction, tol = payload
    pf = ProblemFile.from_dict(data)
    pf.horizon, pf.degree = T, omega
    try:
        problem = pf.to_problem()
        res = compute_bound(problem, direction, pf.solver_options(tol))
    except Exception as exc:  # noqa: BLE001 - recorded in the row
        return None, f"{direction}: {exc}"
    res.solution = None
    return res, None


def _parse_list(text: str, kind, flag: str) -> list:
    items = [s for s in text.replace(" ", "").split(",") if s]
    if not items:
        raise InputError(f"{flag} needs at least one value")
    try:
        return [kind(s) for s in items]
    except ValueError:
        raise InputError(f"{flag}: cannot parse {text!r}") from None


def cmd_sweep(args) -> int:
    pf = _load(args)
    omegas = _parse_list(args.omegas, int, "--omegas") if args.omegas is not None else [pf.degree]
    horizons = _parse_list(args.horizons, float, "--horizons") if args.horizons is not None else [pf.horizon]
    data = pf.to_dict()
    for T in horizons:
        for om in omegas:
            p = ProblemFile.from_dict(data)
            p.horizon, p.degree = T, om
            p.to_problem()  # validate every cell before spending solver time
    cells = [(T, om, d) for T in horizons for om in omegas for d in ("lower", "upper")]
    payloads = [(data, T, om, d, args.tol) for T, om, d in cells]
    jobs = args.jobs or os.cpu_count() or 1
    if jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(payloads))) as pool:
            outcomes = list(pool.map(_solve_cell, payloads))
    else:
        outcomes = [_solve_cell(p) for p in payloads]
    rows: dict[tuple[float, int], ReportRow] = {}
    for (T, om, d), (res, err) in zip(cells, outcomes):
        row = rows.setdefault((T, om), ReportRow(T, om, pf.observable))
        if err:
            row.errors.append(err)
        else:
            setattr(row, d, res)
    ordered = [rows[(T, om)] for T in horizons for om in omegas]
    for row in ordered:
        print(row.format())
    if args.csv:
        Path(args.csv).write_text(csv_text(ordered))
        log.info("wrote %s", args.csv)
    any_cert = any(r.certified for row in ordered for r in row.results())
    return EXIT_OK if any_cert else EXIT_FAILED


def cmd_validate(args) -> int:
    pf = _load(args)
    problem = pf.to_problem()
    mc = pf.montecarlo
    count = args.count if args.count is not None else mc.count
    seed = args.seed if args.seed is not None else mc.seed
    step = args.step if args.step is not None else mc.step
    dist = pf.distribution(args.dist)
    try:
        lower, upper = bound_interval(problem, pf.solver_options(args.tol))
    except InconsistentBoundsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    for r in (lower, upper):
        if not r.certified:
            log.warning("%s bound is %s; the check below is not rigorous", r.direction.value, r.verdict.value)
    lo, hi = lower.value, upper.value
    if args.swap_bounds:
        lo, hi = hi, lo
    try:
        stats = estimate_expectation(problem.field, problem.observable, dist, problem.horizon, count, step, seed)
    except BlowUpError as exc:
        print(f"error: trajectory blew up: {exc}", file=sys.stderr)
        return EXIT_FAILED
    check = consistency_check(stats, (lo, hi))
    row = ReportRow(problem.horizon, problem.omega, pf.observable, lower, upper,
                    mc_mean=stats.mean, mc_stderr=stats.standard_error)
    print(row.format())
    print(f"{dist.variant.value} n={count} seed={seed}: interval [{lo:.6g}, {hi:.6g}] "
          f"mean {stats.mean:.6g} se {stats.standard_error:.2g} -> "
          f"{'consistent' if check.consistent else 'INCONSISTENT'} (slack {check.slack:.3g})")
    return EXIT_OK if check.consistent else 1


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--tol", type=float, default=default, help="solver tolerance")
    parser.add_argument("--jobs", type=int, default=default, help="worker processes for sweeps (default: all cores)")
    parser.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="only log errors")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="certbound", description="Certified bounds on expectations of uncertain ODE states.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("problem", help="problem JSON file (or the name of a bundled one, e.g. vdp.json)")
        p.add_argument("--observable", help="override the observable expression")
        _global_flags(p, suppress=True)

    b = sub.add_parser("bound", help="compute bounds for one problem")
    common(b)
    b.add_argument("--direction", choices=["upper", "lower", "both"], default="both")
    b.add_argument("--omega", type=int, help="override the degree of v")
    b.add_argument("--export-sdpa", metavar="PATH", help="also write the SDP in SDPA sparse format")
    b.set_defaults(func=cmd_bound)

    s = sub.add_parser("sweep", help="bounds over a grid of horizons and degrees")
    common(s)
    s.add_argument("--omegas", help="comma-separated degrees")
    s.add_argument("--horizons", help="comma-separated horizons")
    s.add_argument("--csv", metavar="PATH", help="write the table as CSV")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate", help="check bounds against a Monte Carlo ensemble")
    common(v)
    v.add_argument("--omega", type=int, help="override the degree of v")
    v.add_argument("--count", type=int, help="number of samples")
    v.add_argument("--seed", type=int, help="random seed")
    v.add_argument("--step", type=float, help="integration step")
    v.add_argument("--dist", choices=["normal", "uniform"], help="initial distribution")
    v.add_argument("--swap-bounds", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_validate)
    return parser


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _configure_logging(quiet: bool) -> None:
    level = os.environ.get("CERTBOUND_LOG", "WARNING").upper()
    if quiet:
        level = "ERROR"
    log.setLevel(getattr(logging, level, logging.WARNING))
    if not any(isinstance(h, _StderrHandler) for h in log.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
        log.addHandler(handler)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.quiet)
    if args.jobs is not None and args.jobs < 1:
        parser.error("--jobs must be at least 1")
    if getattr(args, "count", None) is not None and args.count < 1:
        parser.error("--count must be at least 1")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
