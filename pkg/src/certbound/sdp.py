"""Block-diagonal semidefinite programs and a dense primal-dual interior-point solver.

Problems are posed in the form

    minimize    sum_k <C_k, X_k> + c_free . u
    subject to  sum_k <A_ik, X_k> + B_i . u = b_i,   i = 1..m
                X_k PSD, u free

with dual

    maximize    b . y
    subject to  S_k = C_k - sum_i y_i A_ik  PSD,   B^T y = c_free.

Free variables are eliminated once, up front: the dual multiplier is
restricted to the affine set {y : B^T y = c_free} = w + range(Q) where the
columns of Q span the null space of B^T, and the iteration runs on the
reduced multiplier.  The iteration itself is an infeasible-start
path-following method with Nesterov-Todd scaling and a Mehrotra
predictor-corrector step.  The dense Schur complement is factored by
Cholesky with a growing diagonal shift; once that shift runs out, or the
computed step stops satisfying the linearised constraints, the Newton
system is solved by QR of the scaled constraint matrix instead.

SOS programs over the whole space often have no strictly feasible primal
point, so the tolerance may be out of reach.  The best iterate is then
returned with a non-optimal status; callers verify certificates directly.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"
    MAX_ITERATIONS = "max_iterations"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class BlockEntries:
    """Upper-triangular coefficient entries of one PSD block.

    Entry ``k`` says that constraint ``con[k]`` has coefficient matrix value
    ``val[k]`` at positions (row[k], col[k]) and (col[k], row[k]); row <= col.
    """

    con: np.ndarray
    row: np.ndarray
    col: np.ndarray
    val: np.ndarray

    @classmethod
    def empty(cls) -> "BlockEntries":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros(0))

    def __post_init__(self):
        self.con = np.asarray(self.con, dtype=np.int64)
        self.row = np.asarray(self.row, dtype=np.int64)
        self.col = np.asarray(self.col, dtype=np.int64)
        self.val = np.asarray(self.val, dtype=float)


@dataclass
class SdpProblem:
    block_dims: list[int]
    b: np.ndarray
    A: list[BlockEntries]
    C: list[np.ndarray]
    B: np.ndarray
    c_free: np.ndarray

    def __post_init__(self):
        self.block_dims = [int(n) for n in self.block_dims]
        self.b = np.asarray(self.b, dtype=float)
        m = self.b.shape[0]
        if m < 1:
            raise ValueError("an SDP needs at least one equality constraint")
        if len(self.A) != len(self.block_dims) or len(self.C) != len(self.block_dims):
            raise ValueError("A and C need one entry per block")
        self.C = [np.asarray(c, dtype=float) for c in self.C]
        for n, ent, c in zip(self.block_dims, self.A, self.C):
            if n < 1:
                raise ValueError("block dimensions must be positive")
            if c.shape != (n, n) or not np.allclose(c, c.T, rtol=0, atol=0):
                raise ValueError("objective blocks must be symmetric and match block dimensions")
            if ent.con.size:
                if ent.con.min() < 0 or ent.con.max() >= m:
                    raise ValueError("constraint index out of range")
                if ent.row.min() < 0 or ent.col.max() >= n or np.any(ent.row > ent.col):
                    raise ValueError("block entries must be upper-triangular and inside the block")
        self.B = np.asarray(self.B, dtype=float).reshape(m, -1)
        self.c_free = np.asarray(self.c_free, dtype=float).reshape(-1)
        if self.c_free.shape[0] != self.B.shape[1]:
            raise ValueError("c_free length must equal the number of free variables")

    @property
    def n_constraints(self) -> int:
        return self.b.shape[0]

    @property
    def n_free(self) -> int:
        return self.B.shape[1]

    def constraint_matrix(self, i: int, k: int) -> np.ndarray:
        """Dense symmetric coefficient matrix of constraint ``i`` in block ``k``."""
        n = self.block_dims[k]
        ent = self.A[k]
        sel = ent.con == i
        M = np.zeros((n, n))
        M[ent.row[sel], ent.col[sel]] = ent.val[sel]
        M[ent.col[sel], ent.row[sel]] = ent.val[sel]
        return M

    def scaled(self, factor: float) -> "SdpProblem":
        """All constraint rows and right-hand sides multiplied by ``factor``."""
        A = [BlockEntries(e.con, e.row, e.col, e.val * factor) for e in self.A]
        return SdpProblem(list(self.block_dims), self.b * factor, A, [c.copy() for c in self.C],
                          self.B * factor, self.c_free.copy())


@dataclass
class SdpSolution:
    status: Status
    X: list[np.ndarray]
    u: np.ndarray
    y: np.ndarray
    S: list[np.ndarray]
    primal_objective: float
    dual_objective: float
    gap: float
    primal_residual: float
    dual_residual: float
    iterations: int
    seconds: float = 0.0
    history: list[dict] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.primal_objective


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 200
    initial_scale: float = 1.0
    stall_iterations: int = 12
    verbose: bool = False


# ---------------------------------------------------------------------------
# operators


class _Block:
    """Precomputed sparse operators for one block."""

    def __init__(self, n: int, ent: BlockEntries, m: int):
        self.n = n
        off = ent.row != ent.col
        con = np.concatenate([ent.con, ent.con[off]])
        row = np.concatenate([ent.row, ent.col[off]])
        col = np.concatenate([ent.col, ent.row[off]])
        val = np.concatenate([ent.val, ent.val[off]])
        # (m, n*n) operator: A_k(X) = Op @ vec(X)
        self.op = sp.csr_matrix((val, (con, row * n + col)), shape=(m, n * n))
        self.op.sum_duplicates()
        self.opT = self.op.T.tocsr()
        order = np.argsort(con, kind="stable")
        con, row, col, val = con[order], row[order], col[order], val[order]
        self.cons, starts = np.unique(con, return_index=True)
        bounds = np.append(starts, con.size)
        self.groups = [(row[a:e], col[a:e], val[a:e]) for a, e in zip(bounds[:-1], bounds[1:])]
        self.op_rows = self.op[self.cons] if self.cons.size else None

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.op @ X.ravel()

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        M = (self.opT @ y).reshape(self.n, self.n)
        return (M + M.T) / 2

    def reduce(self, Q: np.ndarray | None) -> None:
        """Dense coefficient matrices of the combined constraints sum_i Q[i, k] A_i."""
        n = self.n
        if Q is None:
            A = self.op.toarray()
        else:
            A = (self.opT @ Q).T
        self.reduced = np.ascontiguousarray(A).reshape(-1, n, n)
        r, c = np.triu_indices(n)
        self._svec_idx = (r, c, np.where(r == c, 1.0, np.sqrt(2.0)))

    def scaled_rows(self, G: np.ndarray) -> np.ndarray:
        """svec(G^T A_k G) for the reduced constraints, as columns."""
        r, c, w = self._svec_idx
        T = np.matmul(G.T, np.matmul(self.reduced, G))
        return (T[:, r, c] * w).T

    def schur(self, W: np.ndarray, m: int, chunk: int = 256) -> np.ndarray:
        """Dense m x m matrix with entries <A_i, W A_j W>."""
        out = np.zeros((m, m))
        if not self.cons.size:
            return out
        n = self.n
        cols = np.empty((n * n, min(chunk, len(self.groups))))
        for start in range(0, len(self.groups), chunk):
            grp = self.groups[start:start + chunk]
            for j, (r, c, v) in enumerate(grp):
                cols[:, j] = ((W[:, r] * v) @ W[c, :]).ravel()
            block = self.op_rows @ cols[:, :len(grp)]
            out[np.ix_(self.cons, self.cons[start:start + len(grp)])] = block
        return out


def _svec(M: np.ndarray) -> np.ndarray:
    n = M.shape[0]
    r, c = np.triu_indices(n)
    return np.where(r == c, 1.0, np.sqrt(2.0)) * M[r, c]


def _smat(v: np.ndarray, n: int) -> np.ndarray:
    r, c = np.triu_indices(n)
    M = np.zeros((n, n))
    w = np.where(r == c, 1.0, 1 / np.sqrt(2.0)) * v
    M[r, c] = w
    M[c, r] = w
    return M


def _inner(A: list[np.ndarray], B: list[np.ndarray]) -> float:
    return float(sum(np.vdot(a, b) for a, b in zip(A, B)))


def _sym(M: np.ndarray) -> np.ndarray:
    return (M + M.T) / 2


def _max_step(lam: np.ndarray, d: np.ndarray) -> float:
    """Largest a with diag(lam) + a d PSD (lam > 0), capped at 1e6."""
    isq = 1 / np.sqrt(lam)
    scaled = d * isq[:, None] * isq[None, :]
    emin = sla.eigvalsh(_sym(scaled), subset_by_index=[0, 0])[0] if d.shape[0] > 1 else scaled[0, 0]
    if emin >= -1e-300:
        return 1e6
    return min(1e6, -1.0 / emin)


def _nt_scaling(X: np.ndarray, S: np.ndarray):
    """G with G^{-1} X G^{-T} = G^T S G = diag(lam)."""
    Lx = np.linalg.cholesky(X)
    Ls = np.linalg.cholesky(S)
    U, lam, Vt = np.linalg.svd(Ls.T @ Lx)
    isq = 1 / np.sqrt(lam)
    G = (Lx @ Vt.T) * isq[None, :]
    # G^{-1} = diag(sqrt(lam)) V^T Lx^{-1} = diag(1/sqrt(lam)) U^T Ls^T
    Ginv = (U.T @ Ls.T) * isq[:, None]
    return G, Ginv, lam


class _Reduction:
    """Elimination of free variables through the null space of B^T."""

    def __init__(self, B: np.ndarray, c_free: np.ndarray):
        m, nf = B.shape
        self.nf = nf
        if nf == 0:
            self.Q = None
            self.w = np.zeros(m)
            self.consistent = True
            self.Ur = np.zeros((m, 0))
            self.s = np.zeros(0)
            self.Vr = np.zeros((0, 0))
            return
        U, s, Vt = np.linalg.svd(B, full_matrices=True)
        tol = (s[0] if s.size else 0.0) * max(m, nf) * 1e-13
        r = int(np.sum(s > tol))
        self.Ur, self.s, self.Vr = U[:, :r], s[:r], Vt[:r].T
        self.Q = U[:, r:]
        self.w = self.Ur @ ((self.Vr.T @ c_free) / self.s)
        self.consistent = bool(np.linalg.norm(B.T @ self.w - c_free) <= 1e-9 * (1 + np.linalg.norm(c_free)))

    def drop_dependent(self, M0: np.ndarray, b: np.ndarray, tol: float = 1e-10) -> bool:
        """Remove reduced directions with no constraint coefficients.

        ``M0`` is the reduced Schur matrix at X = S = I.  Returns False when a
        dropped direction carries a nonzero right-hand side (no feasible X).
        """
        ev, V = np.linalg.eigh(M0)
        keep = ev > tol * max(1.0, float(ev[-1]) if ev.size else 1.0)
        if np.all(keep):
            return True
        Q = np.eye(M0.shape[0]) if self.Q is None else self.Q
        null = Q @ V[:, ~keep]
        ok = bool(np.max(np.abs(null.T @ b)) <= 1e-8 * (1 + np.max(np.abs(b))))
        self.Q = Q @ V[:, keep]
        return ok

    @property
    def m_reduced(self) -> int:
        return self.w.shape[0] if self.Q is None else self.Q.shape[1]

    def restrict(self, v: np.ndarray) -> np.ndarray:
        return v if self.Q is None else self.Q.T @ v

    def lift(self, z: np.ndarray) -> np.ndarray:
        return z if self.Q is None else self.Q @ z

    def free_values(self, r: np.ndarray) -> np.ndarray:
        """Least-squares u with B u ~ r."""
        if self.nf == 0:
            return np.zeros(0)
        return self.Vr @ ((self.Ur.T @ r) / self.s)


def _chol_solve_factory(M: np.ndarray, refine: int = 3):
    """Cholesky solver for M with a growing diagonal shift, refined against M itself."""
    scale = max(1.0, float(np.max(np.abs(np.diag(M))))) if M.size else 1.0
    n = M.shape[0]
    reg = 1e-12
    while True:
        try:
            fac = sla.cho_factor(M + reg * scale * np.eye(n), lower=True, check_finite=False)
            if np.all(np.isfinite(fac[0])):
                break
        except (np.linalg.LinAlgError, sla.LinAlgError):
            pass
        reg *= 2
        if reg > 1e-6 * 1.0001:
            return None

    def solve_(rhs):
        x = sla.cho_solve(fac, rhs, check_finite=False)
        for _ in range(refine):
            x = x + sla.cho_solve(fac, rhs - M @ x, check_finite=False)
        return x

    return solve_


class _QrSystem:
    """Newton system in NT-scaled coordinates, solved by QR of the scaled constraint matrix.

    Avoids forming the Schur complement, whose condition number is the
    square of this matrix's; late iterations on degenerate problems need this.
    """

    def __init__(self, J: np.ndarray, rp: np.ndarray):
        (self.qr, self.tau), self.R = sla.qr(J, mode="raw", check_finite=False)
        self.p = J.shape[1]
        self.t = sla.solve_triangular(self.R, rp, trans="T", check_finite=False)

    def _apply_q(self, v: np.ndarray, trans: str) -> np.ndarray:
        # Q stays in Householder form; forming it explicitly doubles the cost
        work = sla.lapack.dormqr("L", trans, self.qr, self.tau, v[:, None], lwork=-1)[1]
        out, _, info = sla.lapack.dormqr("L", trans, self.qr, self.tau, v[:, None], lwork=int(work[0].real))
        if info != 0:
            raise np.linalg.LinAlgError(f"dormqr failed with info={info}")
        return out[:, 0]

    def solve(self, e: np.ndarray):
        """Return (dz, svec of the scaled primal step) for the affine target ``e``."""
        qe = self._apply_q(e, "T")
        dz = sla.solve_triangular(self.R, self.t - qe[:self.p], check_finite=False)
        qe[:self.p] = self.t
        return dz, self._apply_q(qe, "N")


def _blocks_from_identity(dims: Sequence[int], scale: float) -> list[np.ndarray]:
    return [scale * np.eye(n) for n in dims]


@dataclass
class _Iterate:
    X: list
    S: list
    y: np.ndarray
    u: np.ndarray
    pobj: float
    dobj: float
    rp: float
    rd: float
    it: int


def solve(problem: SdpProblem, options: SolverOptions | None = None, **kwargs) -> SdpSolution:
    """Solve ``problem``; keyword arguments override fields of ``options``.

    When the tolerance is out of reach the best iterate seen (by the larger
    of the residuals and the relative gap) is returned, with status
    max_iterations or, after a long run without progress, numerical_failure.
    """
    opts = options or SolverOptions()
    if kwargs:
        opts = SolverOptions(**{**opts.__dict__, **kwargs})
    t0 = time.perf_counter()
    m = problem.n_constraints
    dims = problem.block_dims
    blocks = [_Block(n, e, m) for n, e in zip(dims, problem.A)]
    red = _Reduction(problem.B, problem.c_free)
    nsum = sum(dims)
    b, C = problem.b, problem.C

    def A_op(X):
        out = np.zeros(m)
        for blk, x in zip(blocks, X):
            out += blk.apply(x)
        return out

    def At_op(y):
        return [blk.adjoint(y) for blk in blocks]

    X = _blocks_from_identity(dims, opts.initial_scale)
    S = _blocks_from_identity(dims, opts.initial_scale)
    history: list[dict] = []

    def finish(status, state: _Iterate):
        return SdpSolution(Status(status), [x.copy() for x in state.X], state.u, state.y,
                           [s.copy() for s in state.S], state.pobj, state.dobj, abs(state.pobj - state.dobj),
                           state.rp, state.rd, state.it, time.perf_counter() - t0, history)

    def trivial(status):
        return finish(status, _Iterate(X, S, red.w.copy(), np.zeros(problem.n_free), np.nan, np.nan,
                                       np.inf, np.inf, 0))

    if not red.consistent:
        return trivial(Status.DUAL_INFEASIBLE)
    M0 = sum(blk.schur(np.eye(blk.n), m) for blk in blocks)
    if red.Q is not None:
        M0 = red.Q.T @ M0 @ red.Q
    if not red.drop_dependent(_sym(M0), b):
        return trivial(Status.PRIMAL_INFEASIBLE)
    for blk in blocks:
        blk.reduce(red.Q)

    z = np.zeros(red.m_reduced)
    normC = 1 + max((float(np.max(np.abs(c))) for c in C), default=0.0)
    normb = max(1.0, float(np.max(np.abs(b))))
    use_qr = False
    best: _Iterate | None = None
    best_merit = np.inf
    ref = np.full(3, np.inf)
    since_progress = 0
    stall = 0
    it = 0
    while True:
        y = red.w + red.lift(z)
        rp_full = b - A_op(X)
        rp = red.restrict(rp_full)
        rp_eff = red.lift(rp) if red.Q is not None else rp_full
        u = red.free_values(rp_full)
        rd = [_sym(c - a - s) for c, a, s in zip(C, At_op(y), S)]
        xs = _inner(X, S)
        mu = xs / nsum
        pobj = _inner(C, X) + float(problem.c_free @ u)
        dobj = float(b @ y)
        rp_inf = float(np.max(np.abs(rp_eff)))
        rd_inf = max((float(np.max(np.abs(r))) for r in rd), default=0.0)
        relgap = max(abs(pobj - dobj), xs) / (1 + abs(pobj))
        folded = pobj - dobj + float(y @ rp_eff) - _inner(rd, X)
        history.append(dict(iteration=it, primal_objective=pobj, dual_objective=dobj,
                            primal_residual=rp_inf, dual_residual=rd_inf, complementarity=xs,
                            folded_gap=folded))
        if opts.verbose:
            log.info("it %3d pobj %+.10e dobj %+.10e rp %.2e rd %.2e gap %.2e%s", it, pobj, dobj,
                     rp_inf, rd_inf, relgap, " qr" if use_qr else "")
        current = _Iterate(X, S, y, u, pobj, dobj, rp_inf, rd_inf, it)
        merit = max(rp_inf, rd_inf, relgap)
        if merit <= opts.tol:
            return finish(Status.OPTIMAL, current)
        if merit < best_merit:
            best, best_merit = current, merit
        # progress means some measure still above tolerance halved
        parts = np.maximum([rp_inf, rd_inf, relgap], opts.tol)
        halved = parts < 0.5 * ref
        if np.any(halved):
            ref = np.where(halved, parts, ref)
            since_progress = 0
        else:
            since_progress += 1
        # infeasibility: diverging iterates that approach a Farkas certificate
        if dobj > 1e8 * normC:
            if max(float(np.max(np.abs(r - c))) for r, c in zip(rd, C)) / dobj <= 1e-7:
                return finish(Status.PRIMAL_INFEASIBLE, current)
        if pobj < -1e8 * normb and rp_inf / abs(pobj) <= 1e-7 and normb / abs(pobj) <= 1e-7:
            return finish(Status.DUAL_INFEASIBLE, current)
        if it >= opts.max_iter:
            return finish(Status.MAX_ITERATIONS, best)
        if since_progress >= opts.stall_iterations:
            log.debug("no progress in %d iterations; returning iterate %d", since_progress, best.it)
            return finish(Status.NUMERICAL_FAILURE, best)
        it += 1

        try:
            scal = [_nt_scaling(x, s) for x, s in zip(X, S)]
        except np.linalg.LinAlgError:
            return finish(Status.NUMERICAL_FAILURE, best)
        rdt = [G.T @ r @ G for (G, _, _), r in zip(scal, rd)]

        # rows of the reduced constraint operator in NT-scaled coordinates;
        # the Schur complement is J^T J
        J = np.vstack([blk.scaled_rows(G) for blk, (G, _, _) in zip(blocks, scal)])

        def build_qr():
            return _QrSystem(J, rp)

        if use_qr:
            system = build_qr()
        else:
            Ws = [G @ G.T for G, _, _ in scal]
            chol = _chol_solve_factory(_sym(J.T @ J))
            if chol is None:
                use_qr = True
                system = build_qr()

        def direction(Kt):
            """Step for the scaled complementarity target dX~ + dS~ = Kt."""
            if use_qr:
                e = np.concatenate([_svec(k - r) for k, r in zip(Kt, rdt)])
                dz, x = system.solve(e)
                dX, off = [], 0
                for (G, _, _), n in zip(scal, dims):
                    L = n * (n + 1) // 2
                    dX.append(_sym(G @ _smat(x[off:off + L], n) @ G.T))
                    off += L
            else:
                Rc = [G @ k @ G.T for (G, _, _), k in zip(scal, Kt)]
                rhs = rp - red.restrict(A_op([rc - W @ r @ W for rc, W, r in zip(Rc, Ws, rd)]))
                dz = chol(rhs)
                dX = None
            dS = [_sym(r - a) for r, a in zip(rd, At_op(red.lift(dz)))]
            if dX is None:
                dX = [_sym(rc - W @ ds @ W) for rc, W, ds in zip(Rc, Ws, dS)]
            return dz, dX, dS

        def steps(dX, dS):
            ap, ad = 1e6, 1e6
            sx, sz = [], []
            for (G, Ginv, lam), dx, ds in zip(scal, dX, dS):
                dxt = _sym(Ginv @ dx @ Ginv.T)
                dzt = _sym(G.T @ ds @ G)
                sx.append(dxt)
                sz.append(dzt)
                ap = min(ap, _max_step(lam, dxt))
                ad = min(ad, _max_step(lam, dzt))
            return ap, ad, sx, sz

        # predictor
        Ka = [-np.diag(lam) for _, _, lam in scal]
        _, dXa, dSa = direction(Ka)
        if not use_qr:
            err = float(np.max(np.abs(red.restrict(A_op(dXa)) - rp), initial=0.0))
            if err > 1e-2 * max(rp_inf, 1e-2 * opts.tol):
                log.debug("switching to QR steps at iteration %d (direction error %.1e)", it, err)
                use_qr = True
                system = build_qr()
                _, dXa, dSa = direction(Ka)
        ap_a, ad_a, dxt_a, dzt_a = steps(dXa, dSa)
        ap_a, ad_a = min(1.0, ap_a), min(1.0, ad_a)
        xs_aff = _inner([x + ap_a * d for x, d in zip(X, dXa)], [s + ad_a * d for s, d in zip(S, dSa)])
        sigma = float(np.clip((xs_aff / xs) ** 3, 0.0, 1.0)) if xs > 0 else 0.0

        # corrector
        Kc = []
        for (_, _, lam), dxt, dzt in zip(scal, dxt_a, dzt_a):
            r = -_sym(dxt @ dzt)
            r[np.diag_indices_from(r)] += sigma * mu - lam ** 2
            Kc.append(2 * r / (lam[:, None] + lam[None, :]))
        dz, dX, dS = direction(Kc)
        ap, ad, _, _ = steps(dX, dS)
        gamma = 0.9 + 0.09 * min(ap_a, ad_a)
        ap = min(1.0, gamma * ap)
        ad = min(1.0, gamma * ad)
        X = [_sym(x + ap * d) for x, d in zip(X, dX)]
        S = [_sym(s + ad * d) for s, d in zip(S, dS)]
        z = z + ad * dz
        if max(ap, ad) < 1e-10:
            stall += 1
            if stall >= 5:
                return finish(Status.NUMERICAL_FAILURE, best)
        else:
            stall = 0


def residuals(problem: SdpProblem, solution: SdpSolution) -> dict[str, float]:
    """Recompute primal/dual infinity-norm residuals and the relative gap from scratch."""
    m = problem.n_constraints
    if len(solution.X) != len(problem.block_dims) or len(solution.S) != len(problem.block_dims):
        raise ValueError("solution does not match the problem's block structure")
    for n, x, s in zip(problem.block_dims, solution.X, solution.S):
        if x.shape != (n, n) or s.shape != (n, n):
            raise ValueError("solution block dimensions do not match the problem")
    u = np.asarray(solution.u, dtype=float).reshape(-1)
    y = np.asarray(solution.y, dtype=float).reshape(-1)
    if u.shape[0] != problem.n_free or y.shape[0] != m:
        raise ValueError("solution vector lengths do not match the problem")
    AX = problem.B @ u if problem.n_free else np.zeros(m)
    dual = 0.0
    for k, (n, ent) in enumerate(zip(problem.block_dims, problem.A)):
        x = solution.X[k]
        w = np.where(ent.row == ent.col, 1.0, 2.0)
        AX = AX + np.bincount(ent.con, weights=ent.val * w * x[ent.row, ent.col], minlength=m)
        Aty = np.zeros((n, n))
        np.add.at(Aty, (ent.row, ent.col), ent.val * y[ent.con])
        off = ent.row != ent.col
        np.add.at(Aty, (ent.col[off], ent.row[off]), ent.val[off] * y[ent.con[off]])
        dual = max(dual, float(np.max(np.abs(problem.C[k] - Aty - solution.S[k]))))
    if problem.n_free:
        dual = max(dual, float(np.max(np.abs(problem.B.T @ y - problem.c_free))))
    primal = float(np.max(np.abs(AX - problem.b)))
    pobj = sum(float(np.vdot(c, x)) for c, x in zip(problem.C, solution.X)) + float(problem.c_free @ u)
    dobj = float(problem.b @ y)
    return {"primal": primal, "dual": dual, "gap": abs(pobj - dobj) / (1 + abs(pobj))}


# ---------------------------------------------------------------------------
# assembly from SOS constraint systems


@dataclass
class VariableMap:
    """Where each named decision variable lives in an assembled problem."""

    free_ids: list[str]
    block_of: dict[str, int]
    nonnegative_ids: list[str]
    row_offsets: dict[str, int]

    def assignment(self, solution: SdpSolution) -> dict[str, object]:
        out: dict[str, object] = {}
        for j, k in enumerate(self.free_ids):
            out[k] = float(solution.u[j])
        for name, k in self.block_of.items():
            X = solution.X[k]
            out[name] = float(X[0, 0]) if name in self.nonnegative_ids else X
        return out


def assemble(systems: Sequence, objective: dict[str, float], nonnegative: Sequence[str] = ()) -> tuple[SdpProblem, VariableMap]:
    """Stack SOS constraint systems into one block-diagonal SDP.

    Parameters named in ``nonnegative`` get a 1x1 PSD block each; every other
    parameter is a free variable.  ``objective`` maps parameter ids to their
    cost coefficients (minimisation).
    """
    nonneg = list(dict.fromkeys(nonnegative))
    ids: list[str] = []
    for sys_ in systems:
        for k in sys_.param_ids:
            if k not in ids:
                ids.append(k)
    labels = [sys_.label for sys_ in systems]
    if len(set(labels)) != len(labels):
        raise ValueError("constraint systems need distinct labels")
    unknown = [k for k in [*objective, *nonneg] if k not in ids]
    if unknown:
        raise KeyError(f"unknown decision variables: {unknown}")
    free_ids = [k for k in ids if k not in nonneg]
    free_col = {k: j for j, k in enumerate(free_ids)}

    m = sum(sys_.n_equations for sys_ in systems)
    b = np.zeros(m)
    B = np.zeros((m, len(free_ids)))
    dims: list[int] = []
    A: list[BlockEntries] = []
    C: list[np.ndarray] = []
    block_of: dict[str, int] = {}
    nonneg_rows: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {k: [] for k in nonneg}
    offsets = {}
    off = 0
    for sys_ in systems:
        offsets[sys_.label] = off
        rows = np.arange(sys_.n_equations) + off
        b[rows] = sys_.fixed
        for blk in sys_.blocks:
            if blk.name in block_of:
                raise ValueError(f"duplicate Gram block name {blk.name}")
            eq, r, c, v = blk.upper_entries()
            block_of[blk.name] = len(dims)
            dims.append(blk.size)
            A.append(BlockEntries(eq + off, r, c, v))
            C.append(np.zeros((blk.size, blk.size)))
        for k, pid in enumerate(sys_.param_ids):
            col = -sys_.param_matrix[:, k]
            if pid in free_col:
                B[rows, free_col[pid]] += col
            else:
                nz = np.nonzero(col)[0]
                nonneg_rows[pid].append((rows[nz], col[nz]))
        off += sys_.n_equations
    for pid in nonneg:
        parts = nonneg_rows[pid]
        con = np.concatenate([r for r, _ in parts]) if parts else np.zeros(0, dtype=np.int64)
        val = np.concatenate([v for _, v in parts]) if parts else np.zeros(0)
        z = np.zeros(con.shape[0], dtype=np.int64)
        block_of[pid] = len(dims)
        dims.append(1)
        A.append(BlockEntries(con, z, z.copy(), val))
        C.append(np.array([[float(objective.get(pid, 0.0))]]))
    c_free = np.array([float(objective.get(k, 0.0)) for k in free_ids])
    problem = SdpProblem(dims, b, A, C, B, c_free)
    return problem, VariableMap(free_ids, block_of, nonneg, offsets)


# ---------------------------------------------------------------------------
# SDPA sparse export


def write_sdpa(problem: SdpProblem, path: str | Path) -> None:
    """Write the problem in SDPA sparse format (``.dat-s``).

    SDPA's form is ``min c.x  s.t.  sum_i F_i x_i - F_0 PSD``; our dual
    multiplier y plays the role of x (c = -b, F_i = -A_i, F_0 = -C).  The
    equalities B^T y = c_free become a pair of diagonal (LP) blocks.
    """
    m = problem.n_constraints
    nf = problem.n_free
    dims = list(problem.block_dims)
    lines = [f'"certbound export: {m} constraints, {len(dims)} PSD blocks, {nf} free variables"',
             str(m)]
    nblocks = len(dims) + (2 if nf else 0)
    lines.append(str(nblocks))
    sizes = [str(n) for n in dims] + ([str(-nf), str(-nf)] if nf else [])
    lines.append(" ".join(sizes))
    lines.append(" ".join(f"{-v:.17g}" for v in problem.b))
    entries = []
    for k, (C, ent) in enumerate(zip(problem.C, problem.A), start=1):
        r, c = np.nonzero(np.triu(C))
        for i, j in zip(r, c):
            entries.append((0, k, i + 1, j + 1, -C[i, j]))
        for con, i, j, v in zip(ent.con, ent.row, ent.col, ent.val):
            if v != 0:
                entries.append((int(con) + 1, k, int(i) + 1, int(j) + 1, -float(v)))
    if nf:
        kp, kn = len(dims) + 1, len(dims) + 2
        for j in range(nf):
            if problem.c_free[j] != 0:
                entries.append((0, kp, j + 1, j + 1, problem.c_free[j]))
                entries.append((0, kn, j + 1, j + 1, -problem.c_free[j]))
        for i, j in zip(*np.nonzero(problem.B)):
            entries.append((int(i) + 1, kp, j + 1, j + 1, problem.B[i, j]))
            entries.append((int(i) + 1, kn, j + 1, j + 1, -problem.B[i, j]))
    entries.sort(key=lambda e: (e[0], e[1], e[2], e[3]))
    lines.extend(f"{a} {k} {i} {j} {v:.17g}" for a, k, i, j, v in entries)
    Path(path).write_text("\n".join(lines) + "\n")


def read_sdpa(path: str | Path) -> dict:
    """Parse an SDPA sparse file into ``m``, ``block_sizes``, ``c`` and an entry list."""
    raw = [ln.strip() for ln in Path(path).read_text().splitlines()]
    body = [ln for ln in raw if ln and not ln.startswith(('"', "*"))]
    tok = lambda s: s.replace(",", " ").replace("{", " ").replace("}", " ").replace("(", " ").replace(")", " ").split()
    m = int(tok(body[0])[0])
    nblocks = int(tok(body[1])[0])
    sizes = [int(x) for x in tok(body[2])[:nblocks]]
    c = np.array([float(x) for x in tok(body[3])[:m]])
    entries = []
    for ln in body[4:]:
        a, k, i, j, v = tok(ln)[:5]
        entries.append((int(a), int(k), int(i), int(j), float(v)))
    return {"m": m, "block_sizes": sizes, "c": c, "entries": entries}
