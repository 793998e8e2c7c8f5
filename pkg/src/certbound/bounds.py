"""Certified bounds on E[g(x(T))] from moment information on x(0).

For the upper bound we look for a polynomial v(t, x) of degree omega and
scalars alpha, beta such that

    -Lv                       in Q(Omega),  Omega = [0, T] x X
    v(T, .) - g               in Q(X)
    alpha + beta.h - v(0, .)  in Q(X0)

and minimise alpha + beta.c.  Lower bounds negate the observable and the
resulting value.

The program is assembled in normalised coordinates: time is mapped onto
[0, 1] and each state is shifted and scaled, x = shift + scale * z.  Both maps
are affine, so membership in the quadratic modules (and the optimal value) is
unchanged; only the conditioning of the SDP improves.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import sdp
from .dynamics import VectorField, integrate, lie_derivative, rescale_time
from .polynomial import Polynomial, PolynomialError, VariableSpace, monomial_basis
from .sos import (
    CertificateReport,
    DegreeError,
    ParametricPolynomial,
    SemialgebraicSet,
    SosConstraintSystem,
    Verdict,
    classify,
    membership_constraint,
    verify_certificate,
)

log = logging.getLogger(__name__)


class Direction(str, enum.Enum):
    UPPER = "upper"
    LOWER = "lower"


class Kind(str, enum.Enum):
    INEQUALITY = "inequality"
    EQUALITY = "equality"


@dataclass(frozen=True)
class MomentConstraint:
    """E[h(x0)] <= c (inequality) or E[h(x0)] = c (equality)."""

    h: Polynomial
    c: float
    kind: Kind = Kind.INEQUALITY

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "c", float(self.c))


def moment_constraints_from_mean_cov(mean: Sequence[float], cov, space: VariableSpace) -> list[MomentConstraint]:
    """Equality constraints on all first and second moments of a distribution with given mean/cov."""
    mu = np.asarray(mean, dtype=float)
    sigma = np.asarray(cov, dtype=float)
    n = space.dim
    if mu.shape != (n,) or sigma.shape != (n, n):
        raise ValueError(f"mean must have length {n} and cov shape ({n}, {n})")
    if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12):
        raise ValueError("covariance matrix must be symmetric")
    if n and np.linalg.eigvalsh(sigma)[0] < -1e-10:
        raise ValueError("covariance matrix must be positive semidefinite")
    out = []
    for m in monomial_basis(space, 2)[1:]:
        idx = [i for i, e in enumerate(m) for _ in range(e)]
        if len(idx) == 1:
            c = mu[idx[0]]
        else:
            i, j = idx
            c = mu[i] * mu[j] + sigma[i, j]
        out.append(MomentConstraint(Polynomial.monomial(space, m), float(c), Kind.EQUALITY))
    return out


@dataclass
class UncertaintyProblem:
    field: VectorField
    observable: Polynomial
    horizon: float
    constraints: list[MomentConstraint]
    omega: int
    X: SemialgebraicSet | None = None
    X0: SemialgebraicSet | None = None

    def __post_init__(self):
        self.horizon = float(self.horizon)
        if not self.horizon >= 0:
            raise ValueError("horizon must be nonnegative")
        state = self.state_space
        if self.observable.space != state:
            self.observable = _to_state_space(self.observable, state, "observable")
        fixed = []
        for mc in self.constraints:
            h = mc.h if mc.h.space == state else _to_state_space(mc.h, state, "moment function")
            fixed.append(MomentConstraint(h, mc.c, mc.kind))
        self.constraints = fixed
        self.X = self.X or SemialgebraicSet.whole_space(state)
        self.X0 = self.X0 or SemialgebraicSet.whole_space(state)
        if self.X.space != state or self.X0.space != state:
            raise ValueError("X and X0 must be defined over the state variables")
        if self.omega < max(self.observable.degree, 0):
            raise DegreeError(f"omega={self.omega} is below the observable degree {self.observable.degree}")
        for mc in self.constraints:
            if mc.h.degree > self.omega:
                raise DegreeError(f"omega={self.omega} is below the degree of moment function {mc.h}")
        for phi in (*self.X.inequalities, *self.X0.inequalities):
            if phi.degree > self.omega:
                raise DegreeError(f"omega={self.omega} is below the degree of set inequality {phi}")

    @property
    def state_space(self) -> VariableSpace:
        return VariableSpace(self.field.state_names)

    @property
    def c(self) -> np.ndarray:
        return np.array([mc.c for mc in self.constraints])

    def with_observable(self, g: Polynomial) -> "UncertaintyProblem":
        return UncertaintyProblem(self.field, g, self.horizon, list(self.constraints), self.omega, self.X, self.X0)

    def with_omega(self, omega: int) -> "UncertaintyProblem":
        return UncertaintyProblem(self.field, self.observable, self.horizon, list(self.constraints), omega, self.X, self.X0)

    def with_horizon(self, T: float) -> "UncertaintyProblem":
        return UncertaintyProblem(self.field, self.observable, T, list(self.constraints), self.omega, self.X, self.X0)

    def moment_estimates(self) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Mean and per-axis variance implied by equality constraints on x_i and x_i^2, if present."""
        n = self.state_space.dim
        mean = [None] * n
        second = [None] * n
        for mc in self.constraints:
            if mc.kind is not Kind.EQUALITY or len(mc.h) != 1:
                continue
            (m, coeff), = mc.h.items()
            if sum(m) == 1:
                mean[m.index(1)] = mc.c / coeff
            elif sum(m) == 2 and max(m) == 2:
                second[m.index(2)] = mc.c / coeff
        if any(v is None for v in mean):
            return None, None
        mu = np.array(mean, dtype=float)
        if any(v is None for v in second):
            return mu, None
        var = np.maximum(np.array(second, dtype=float) - mu ** 2, 0.0)
        return mu, var


def _to_state_space(p: Polynomial, state: VariableSpace, what: str) -> Polynomial:
    for name in p.space.names:
        if name not in state and p.depends_on(name):
            raise PolynomialError(f"{what} must depend on the state variables only (found {name!r})")
    return p.embed(state)


@dataclass(frozen=True)
class StateScaling:
    """x = shift + scale * z, per state coordinate."""

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "StateScaling":
        return cls(np.zeros(n), np.ones(n))


def auto_scaling(problem: UncertaintyProblem, samples: int = 400) -> StateScaling:
    """Centre states on the box swept by the nominal trajectory and shrink large ones.

    Falls back to the identity when the constraints do not pin down a mean.
    """
    n = problem.state_space.dim
    mu, var = problem.moment_estimates()
    if mu is None:
        return StateScaling.identity(n)
    sd = np.sqrt(var) if var is not None else np.zeros(n)
    lo, hi = mu.copy(), mu.copy()
    if problem.horizon > 0:
        try:
            traj = integrate(problem.field, mu, problem.horizon, problem.horizon / samples)
            lo = traj.states.min(axis=0)
            hi = traj.states.max(axis=0)
        except Exception:  # noqa: BLE001 - scaling is only a conditioning aid
            pass
    centre = (lo + hi) / 2
    half = (hi - lo) / 2 + 3 * sd
    # Only ever shrink.  X is usually unbounded, so a coefficient residual in
    # magnified coordinates is amplified by high powers away from the box.
    return StateScaling(centre, np.maximum(half, 1.0))


@dataclass
class BoundProgram:
    problem: UncertaintyProblem
    direction: Direction
    sdp_problem: sdp.SdpProblem
    varmap: sdp.VariableMap
    systems: list[SosConstraintSystem]
    v_space: VariableSpace
    v_basis: list
    scaling: StateScaling
    lie_degree: int | None

    @property
    def sign(self) -> float:
        return 1.0 if self.direction is Direction.UPPER else -1.0


def _affine_images(space: VariableSpace, names: Sequence[str], scaling: StateScaling) -> dict[str, Polynomial]:
    return {
        name: Polynomial.variable(space, name) * float(a) + float(s)
        for name, s, a in zip(names, scaling.shift, scaling.scale)
    }


def build_bound_program(problem: UncertaintyProblem, direction: Direction | str = Direction.UPPER,
                        scaling: StateScaling | str | None = "auto") -> BoundProgram:
    """Assemble the degree-omega SOS program as a block-diagonal SDP."""
    direction = Direction(direction)
    sign = 1.0 if direction is Direction.UPPER else -1.0
    state = problem.state_space
    names = state.names
    n = state.dim
    if scaling is None or scaling == "none":
        scaling = StateScaling.identity(n)
    elif isinstance(scaling, str):
        if scaling != "auto":
            raise ValueError(f"unknown scaling mode {scaling!r}")
        scaling = auto_scaling(problem)
    T = problem.horizon
    omega = problem.omega

    to_z = _affine_images(state, names, scaling)
    g = problem.observable.substitute(to_z) * sign
    hs = [mc.h.substitute(to_z) for mc in problem.constraints]
    X = SemialgebraicSet(state, tuple(phi.substitute(to_z) for phi in problem.X.inequalities))
    X0 = SemialgebraicSet(state, tuple(phi.substitute(to_z) for phi in problem.X0.inequalities))

    systems: list[SosConstraintSystem] = []
    if T > 0:
        field_ = problem.field
        tx = field_.space
        images = _affine_images(tx, names, scaling)
        comps = [(f.substitute(images)) * (1.0 / float(a)) for f, a in zip(field_.components, scaling.scale)]
        zfield = rescale_time(VectorField(tx, tuple(comps)), T)
        v_space = tx
        basis = monomial_basis(tx, omega)
        mons = [Polynomial.monomial(tx, m) for m in basis]
        lie = [lie_derivative(p, zfield) for p in mons]
        lie_degree = max([omega, *(p.degree for p in lie)])
        tname = tx.names[0]
        tvar = Polynomial.variable(tx, tname)
        omega_set = SemialgebraicSet(tx, (tvar * (1.0 - tvar), *X.embed(tx).inequalities))
        lie_target = ParametricPolynomial(tx, Polynomial.zero(tx), tuple((f"v[{k}]", -p) for k, p in enumerate(lie)))
        systems.append(membership_constraint(lie_target, omega_set, lie_degree, label="lie"))
        at_end = [p.substitute({tname: 1.0}) for p in mons]
        at_start = [p.substitute({tname: 0.0}) for p in mons]
        at_end = [_drop_time(p, state) for p in at_end]
        at_start = [_drop_time(p, state) for p in at_start]
    else:
        v_space = state
        basis = monomial_basis(state, omega)
        mons = [Polynomial.monomial(state, m) for m in basis]
        at_end = at_start = mons
        lie_degree = None

    end_target = ParametricPolynomial(state, -g, tuple((f"v[{k}]", p) for k, p in enumerate(at_end)))
    systems.append(membership_constraint(end_target, X, omega, label="terminal"))
    init_params = [("alpha", Polynomial.constant(state, 1.0))]
    init_params += [(f"beta[{j}]", h) for j, h in enumerate(hs)]
    init_params += [(f"v[{k}]", -p) for k, p in enumerate(at_start)]
    init_target = ParametricPolynomial(state, Polynomial.zero(state), tuple(init_params))
    systems.append(membership_constraint(init_target, X0, omega, label="initial"))

    objective = {"alpha": 1.0}
    for j, mc in enumerate(problem.constraints):
        objective[f"beta[{j}]"] = mc.c
    nonneg = [f"beta[{j}]" for j, mc in enumerate(problem.constraints) if mc.kind is Kind.INEQUALITY]
    prob, varmap = sdp.assemble(systems, objective, nonneg)
    return BoundProgram(problem, direction, prob, varmap, systems, v_space, basis, scaling, lie_degree)


def _drop_time(p: Polynomial, state: VariableSpace) -> Polynomial:
    return p.embed(state)


@dataclass
class BoundResult:
    direction: Direction
    value: float
    alpha: float
    beta: np.ndarray
    v: Polynomial | None
    status: sdp.Status
    certificate: CertificateReport
    seconds: float
    omega: int
    horizon: float
    solution: sdp.SdpSolution | None = field(default=None, repr=False)

    @property
    def verdict(self) -> Verdict:
        return self.certificate.verdict

    @property
    def certified(self) -> bool:
        # The certificate is checked independently of the solver, so a stalled
        # solve whose iterate still verifies is a valid bound.
        return self.certificate.verdict is Verdict.CERTIFIED


def extract_v(program: BoundProgram, assignment: dict) -> Polynomial:
    """Auxiliary function in the original time and state coordinates."""
    coeffs = {m: assignment[f"v[{k}]"] for k, m in enumerate(program.v_basis)}
    vz = Polynomial(program.v_space, coeffs)
    state_names = program.problem.state_space.names
    space = program.v_space
    back = {
        name: (Polynomial.variable(space, name) - float(s)) * (1.0 / float(a))
        for name, s, a in zip(state_names, program.scaling.shift, program.scaling.scale)
    }
    T = program.problem.horizon
    if T > 0:
        back[space.names[0]] = Polynomial.variable(space, space.names[0]) * (1.0 / T)
    return vz.substitute(back)


def compute_bound(problem: UncertaintyProblem, direction: Direction | str = Direction.UPPER,
                  options: sdp.SolverOptions | None = None, eps_psd: float = 1e-6, eps_res: float = 1e-6,
                  scaling: StateScaling | str | None = "auto", program: BoundProgram | None = None) -> BoundResult:
    """Build, solve and verify one bound."""
    t0 = time.perf_counter()
    direction = Direction(direction)
    program = program or build_bound_program(problem, direction, scaling)
    options = options or sdp.SolverOptions()
    sol = sdp.solve(program.sdp_problem, options)
    assignment = program.varmap.assignment(sol)
    eigs: dict[str, float] = {}
    worst_res = 0.0
    for system in program.systems:
        rep = verify_certificate(system, assignment, eps_psd, eps_res)
        eigs.update(rep.min_eigenvalues)
        worst_res = max(worst_res, rep.coefficient_residual_inf_norm)
    for pid in program.varmap.nonnegative_ids:
        eigs[pid] = float(assignment[pid])
    verdict = classify(eigs.values(), worst_res, eps_psd, eps_res)
    if not all(np.isfinite(v) for v in eigs.values()) or not np.isfinite(worst_res):
        verdict = Verdict.FAILED
    report = CertificateReport(eigs, worst_res, verdict, eps_psd, eps_res)
    alpha = float(assignment["alpha"])
    beta = np.array([float(assignment[f"beta[{j}]"]) for j in range(len(problem.constraints))])
    raw = alpha + float(beta @ problem.c) if beta.size else alpha
    try:
        v = extract_v(program, assignment)
    except Exception:  # noqa: BLE001 - a failed solve may carry non-finite values
        v = None
    return BoundResult(direction, program.sign * raw, alpha, beta, v, sol.status, report,
                       time.perf_counter() - t0, problem.omega, problem.horizon, sol)


class InconsistentBoundsError(RuntimeError):
    pass


def bound_interval(problem: UncertaintyProblem, options: sdp.SolverOptions | None = None,
                   **kwargs) -> tuple[BoundResult, BoundResult]:
    options = options or sdp.SolverOptions()
    lower = compute_bound(problem, Direction.LOWER, options, **kwargs)
    upper = compute_bound(problem, Direction.UPPER, options, **kwargs)
    if lower.certified and upper.certified and lower.value > upper.value + 2 * options.tol * max(1.0, abs(upper.value)):
        raise InconsistentBoundsError(f"lower bound {lower.value} exceeds upper bound {upper.value}")
    return lower, upper


@dataclass
class SweepEntry:
    omega: int
    lower: BoundResult | None
    upper: BoundResult | None
    errors: list[str] = field(default_factory=list)


def degree_sweep(problem: UncertaintyProblem, omegas: Sequence[int], options: sdp.SolverOptions | None = None,
                 directions: Sequence[Direction | str] = (Direction.LOWER, Direction.UPPER),
                 **kwargs) -> tuple[list[SweepEntry], list[str]]:
    """Bounds for each omega; returns the table and monotonicity warnings."""
    omegas = list(omegas)
    if not omegas:
        raise ValueError("at least one degree is required")
    if any(b <= a for a, b in zip(omegas, omegas[1:])):
        raise ValueError("degrees must be strictly increasing")
    options = options or sdp.SolverOptions()
    directions = [Direction(d) for d in directions]
    table: list[SweepEntry] = []
    for omega in omegas:
        entry = SweepEntry(omega, None, None)
        for d in directions:
            try:
                res = compute_bound(problem.with_omega(omega), d, options, **kwargs)
            except Exception as exc:  # noqa: BLE001 - record and keep sweeping
                entry.errors.append(f"{d.value}: {exc}")
                log.warning("omega=%d %s failed: %s", omega, d.value, exc)
                continue
            setattr(entry, d.value, res)
        table.append(entry)
    warnings = monotonicity_warnings(table, 2 * options.tol)
    for w in warnings:
        log.warning(w)
    return table, warnings


def monotonicity_warnings(table: Sequence[SweepEntry], slack: float) -> list[str]:
    out = []
    for prev, cur in zip(table, table[1:]):
        if prev.upper and cur.upper and cur.upper.value > prev.upper.value + slack * max(1.0, abs(prev.upper.value)):
            out.append(f"upper bound increased from omega={prev.omega} ({prev.upper.value:.6g}) "
                       f"to omega={cur.omega} ({cur.upper.value:.6g})")
        if prev.lower and cur.lower and cur.lower.value < prev.lower.value - slack * max(1.0, abs(prev.lower.value)):
            out.append(f"lower bound decreased from omega={prev.omega} ({prev.lower.value:.6g}) "
                       f"to omega={cur.omega} ({cur.lower.value:.6g})")
    return out
