"""Quadratic-module membership as linear equations over Gram matrices.

A target polynomial p belongs to Q_omega(S) for S = {phi_1 >= 0, ...} when

    p = b_0' G_0 b_0 + sum_i phi_i * (b_i' G_i b_i),   G_i PSD,

with monomial bases b_i sized so every product stays within degree omega.
Matching coefficients monomial by monomial gives one linear equation per
monomial of degree <= omega.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .polynomial import (
    Monomial,
    Polynomial,
    PolynomialError,
    SpaceMismatchError,
    VariableSpace,
    monomial_basis,
)


class DegreeError(PolynomialError):
    pass


@dataclass(frozen=True)
class SemialgebraicSet:
    """{x : phi(x) >= 0 for every phi in ``inequalities``}; empty means the whole space."""

    space: VariableSpace
    inequalities: tuple[Polynomial, ...] = ()

    def __post_init__(self):
        ineqs = tuple(self.inequalities)
        for phi in ineqs:
            if phi.space != self.space:
                raise SpaceMismatchError("all inequalities must share the set's variable space")
        if not ineqs:
            ineqs = (Polynomial.constant(self.space, 1.0),)
        object.__setattr__(self, "inequalities", ineqs)

    @classmethod
    def whole_space(cls, space: VariableSpace) -> "SemialgebraicSet":
        return cls(space, ())

    @property
    def weights(self) -> list[Polynomial]:
        """Multiplier weights of the quadratic module: 1, then every nonconstant phi."""
        # Positive constants are redundant with the weight 1 itself.
        extra = [phi for phi in self.inequalities if not (phi.degree <= 0 and phi.coefficient((0,) * self.space.dim) > 0)]
        return [Polynomial.constant(self.space, 1.0), *extra]

    def contains(self, point: Sequence[float], tol: float = 0.0) -> bool:
        return all(phi(*point) >= -tol for phi in self.inequalities)

    def embed(self, target: VariableSpace) -> "SemialgebraicSet":
        return SemialgebraicSet(target, tuple(phi.embed(target) for phi in self.inequalities))

    def intersect(self, other: "SemialgebraicSet") -> "SemialgebraicSet":
        if other.space != self.space:
            raise SpaceMismatchError("cannot intersect sets over different spaces")
        return SemialgebraicSet(self.space, self.inequalities + other.inequalities)


@dataclass(frozen=True)
class ParametricPolynomial:
    """fixed + sum_k lambda_k * p_k for unknown scalars lambda_k named by ``params`` ids."""

    space: VariableSpace
    fixed: Polynomial
    params: tuple[tuple[str, Polynomial], ...] = ()

    def __post_init__(self):
        params = tuple((str(k), p) for k, p in self.params)
        object.__setattr__(self, "params", params)
        if self.fixed.space != self.space or any(p.space != self.space for _, p in params):
            raise SpaceMismatchError("parametric polynomial parts must share the space")
        ids = [k for k, _ in params]
        if len(set(ids)) != len(ids):
            raise ValueError("decision-variable ids must be unique")

    @classmethod
    def constant_target(cls, p: Polynomial) -> "ParametricPolynomial":
        return cls(p.space, p, ())

    @property
    def ids(self) -> list[str]:
        return [k for k, _ in self.params]

    @property
    def degree(self) -> int:
        return max([self.fixed.degree, *(p.degree for _, p in self.params)])

    def evaluate(self, values: Mapping[str, float]) -> Polynomial:
        out = self.fixed
        for k, p in self.params:
            out = out + p * float(values[k])
        return out


def gram_basis_for_weight(weight: Polynomial, omega: int, space: VariableSpace | None = None) -> list[Monomial]:
    space = space or weight.space
    d = weight.degree
    if d > omega:
        raise DegreeError(f"weight degree {d} exceeds omega={omega}")
    return monomial_basis(space, (omega - max(d, 0)) // 2)


@dataclass
class GramBlock:
    name: str
    weight: Polynomial
    basis: list[Monomial]
    # full symmetric entries: equation eq[k] gets val[k] * G[row[k], col[k]]
    eq: np.ndarray
    row: np.ndarray
    col: np.ndarray
    val: np.ndarray

    @property
    def size(self) -> int:
        return len(self.basis)

    def upper_entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(eq, row, col, val) restricted to row <= col, duplicates merged."""
        keep = self.row <= self.col
        eq, r, c, v = self.eq[keep], self.row[keep], self.col[keep], self.val[keep]
        n = self.size
        key = (eq * n + r) * n + c
        uniq, inv = np.unique(key, return_inverse=True)
        vals = np.bincount(inv, weights=v)
        c_u = uniq % n
        r_u = (uniq // n) % n
        e_u = uniq // (n * n)
        nz = vals != 0
        return e_u[nz], r_u[nz], c_u[nz], vals[nz]

    def polynomial(self, G: np.ndarray) -> Polynomial:
        """weight * (b' G b)."""
        space = self.weight.space
        terms: dict[Monomial, float] = {}
        for i, mi in enumerate(self.basis):
            for j, mj in enumerate(self.basis):
                g = G[i, j]
                if g == 0:
                    continue
                m = tuple(a + b for a, b in zip(mi, mj))
                terms[m] = terms.get(m, 0.0) + g
        return self.weight * Polynomial(space, terms)


@dataclass
class SosConstraintSystem:
    """Coefficient equations ``sum_blocks <A_m, G> - sum_k lambda_k p_k[m] = fixed[m]``."""

    label: str
    space: VariableSpace
    omega: int
    monomials: list[Monomial]
    blocks: list[GramBlock]
    fixed: np.ndarray
    param_ids: list[str]
    param_matrix: np.ndarray
    target: ParametricPolynomial = field(repr=False)

    @property
    def n_equations(self) -> int:
        return len(self.monomials)

    @property
    def block_names(self) -> list[str]:
        return [blk.name for blk in self.blocks]

    def equation_residual(self, assignment: Mapping[str, object]) -> np.ndarray:
        lhs = np.zeros(self.n_equations)
        for blk in self.blocks:
            G = np.asarray(assignment[blk.name], dtype=float)
            lhs += np.bincount(blk.eq, weights=blk.val * G[blk.row, blk.col], minlength=self.n_equations)
        lam = np.array([float(assignment[k]) for k in self.param_ids])
        if lam.size:
            lhs -= self.param_matrix @ lam
        return lhs - self.fixed


def _encode(monos: np.ndarray, base: int) -> np.ndarray:
    code = np.zeros(monos.shape[:-1], dtype=np.int64)
    for i in range(monos.shape[-1]):
        code = code * base + monos[..., i]
    return code


def _prune(blocks: list[GramBlock], zero_rows: np.ndarray, n_eq: int) -> list[GramBlock]:
    """Drop basis monomials whose Gram diagonal is forced to zero.

    An equation with zero right-hand side and no parameters whose only Gram
    terms are diagonal entries of one sign forces those entries, hence their
    whole rows and columns, to vanish on the PSD cone.  Repeat to a fixed point.
    """
    active = [np.ones(blk.size, dtype=bool) for blk in blocks]
    while True:
        off = np.zeros(n_eq)
        pos = np.zeros(n_eq)
        neg = np.zeros(n_eq)
        for blk, act in zip(blocks, active):
            live = act[blk.row] & act[blk.col]
            diag = live & (blk.row == blk.col)
            off += np.bincount(blk.eq[live & ~diag], minlength=n_eq)
            pos += np.bincount(blk.eq[diag & (blk.val > 0)], minlength=n_eq)
            neg += np.bincount(blk.eq[diag & (blk.val < 0)], minlength=n_eq)
        forced = zero_rows & (off == 0) & ((pos == 0) | (neg == 0)) & (pos + neg > 0)
        changed = False
        for blk, act in zip(blocks, active):
            hit = act[blk.row] & (blk.row == blk.col) & forced[blk.eq]
            idx = np.unique(blk.row[hit])
            if idx.size:
                act[idx] = False
                changed = True
        if not changed:
            break
    out = []
    for blk, act in zip(blocks, active):
        if act.all():
            out.append(blk)
            continue
        new_index = np.cumsum(act) - 1
        keep = act[blk.row] & act[blk.col]
        basis = [m for m, a in zip(blk.basis, act) if a]
        out.append(GramBlock(blk.name, blk.weight, basis, blk.eq[keep], new_index[blk.row[keep]],
                             new_index[blk.col[keep]], blk.val[keep]))
    return out


def membership_constraint(target: ParametricPolynomial | Polynomial, sset: SemialgebraicSet, omega: int,
                          label: str = "sos", reduce: bool = True) -> SosConstraintSystem:
    """Equations expressing ``target in Q_omega(sset)``.

    With ``reduce`` the Gram bases are pruned of monomials whose diagonal
    entries the equations force to zero (see ``_prune``); the set of feasible
    certificates is unchanged, but the SDP regains strictly feasible points.
    Blocks whose basis prunes to nothing are dropped.
    """
    if isinstance(target, Polynomial):
        target = ParametricPolynomial.constant_target(target)
    space = target.space
    if sset.space != space:
        raise SpaceMismatchError("target and set must share the variable space")
    if space.dim == 0:
        raise PolynomialError("empty variable space")
    if target.degree > omega:
        raise DegreeError(f"target degree {target.degree} exceeds omega={omega}")
    monomials = monomial_basis(space, omega)
    base = omega + 1
    codes = _encode(np.array(monomials, dtype=np.int64), base)
    order = np.argsort(codes)
    sorted_codes = codes[order]

    def lookup(code_arr: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(sorted_codes, code_arr)
        pos = np.clip(pos, 0, len(sorted_codes) - 1)
        if np.any(sorted_codes[pos] != code_arr):
            raise DegreeError("Gram product falls outside the coefficient equations")
        return order[pos]

    blocks: list[GramBlock] = []
    for i, w in enumerate(sset.weights):
        if w.degree > omega:
            raise DegreeError(f"inequality {w} has degree above omega={omega}")
        basis = gram_basis_for_weight(w, omega, space)
        B = np.array(basis, dtype=np.int64)
        n = len(basis)
        pair = B[:, None, :] + B[None, :, :]
        rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        eqs, rr, cc, vv = [], [], [], []
        for m, c in w.items():
            mono = pair + np.array(m, dtype=np.int64)
            eqs.append(lookup(_encode(mono, base)).ravel())
            rr.append(rows.ravel())
            cc.append(cols.ravel())
            vv.append(np.full(n * n, c))
        blocks.append(GramBlock(f"{label}.sigma{i}", w, basis, np.concatenate(eqs), np.concatenate(rr),
                                np.concatenate(cc), np.concatenate(vv)))

    index = {m: i for i, m in enumerate(monomials)}
    fixed = np.zeros(len(monomials))
    for m, c in target.fixed.items():
        fixed[index[m]] = c
    P = np.zeros((len(monomials), len(target.params)))
    for k, (_, p) in enumerate(target.params):
        for m, c in p.items():
            P[index[m], k] = c
    if reduce:
        zero_rows = (fixed == 0) & ~np.any(P != 0, axis=1)
        blocks = [blk for blk in _prune(blocks, zero_rows, len(monomials)) if blk.size]
    return SosConstraintSystem(label, space, omega, monomials, blocks, fixed, target.ids, P, target)


class Verdict(str, enum.Enum):
    CERTIFIED = "certified"
    MARGINAL = "marginal"
    FAILED = "failed"


@dataclass
class CertificateReport:
    min_eigenvalues: dict[str, float]
    coefficient_residual_inf_norm: float
    verdict: Verdict
    eps_psd: float = 1e-6
    eps_res: float = 1e-6

    @property
    def certified(self) -> bool:
        return self.verdict is Verdict.CERTIFIED


def classify(min_eigs: Sequence[float], residual: float, eps_psd: float, eps_res: float) -> Verdict:
    worst_eig = min(min_eigs, default=0.0)
    if worst_eig >= -eps_psd and residual <= eps_res:
        return Verdict.CERTIFIED
    if worst_eig >= -10 * eps_psd and residual <= 10 * eps_res:
        return Verdict.MARGINAL
    return Verdict.FAILED


def verify_certificate(system: SosConstraintSystem, assignment: Mapping[str, object], eps_psd: float = 1e-6,
                       eps_res: float = 1e-6) -> CertificateReport:
    """Check Gram blocks for PSD-ness and the coefficient equations for residual."""
    missing = [k for k in [*system.block_names, *system.param_ids] if k not in assignment]
    if missing:
        raise KeyError(f"assignment is missing decision variables: {missing}")
    eigs = {}
    for blk in system.blocks:
        G = np.asarray(assignment[blk.name], dtype=float)
        if G.shape != (blk.size, blk.size):
            raise ValueError(f"Gram block {blk.name} must be {blk.size}x{blk.size}")
        eigs[blk.name] = float(np.linalg.eigvalsh((G + G.T) / 2)[0])
    res = system.equation_residual(assignment)
    resnorm = float(np.max(np.abs(res))) if res.size else 0.0
    return CertificateReport(eigs, resnorm, classify(eigs.values(), resnorm, eps_psd, eps_res), eps_psd, eps_res)


def find_certificate(target: ParametricPolynomial | Polynomial, sset: SemialgebraicSet, omega: int,
                     tol: float = 1e-8, eps_psd: float = 1e-6, eps_res: float = 1e-6):
    """Search for a membership certificate with no objective.

    Returns ``(feasible, assignment, report, solution)``; ``feasible`` means the
    solver converged and the certificate verified.
    """
    from . import sdp

    system = membership_constraint(target, sset, omega)
    problem, varmap = sdp.assemble([system], {})
    sol = sdp.solve(problem, sdp.SolverOptions(tol=tol))
    assignment = varmap.assignment(sol)
    report = verify_certificate(system, assignment, eps_psd, eps_res)
    feasible = sol.status is sdp.Status.OPTIMAL and report.certified
    return feasible, assignment, report, sol
