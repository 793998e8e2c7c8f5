import numpy as np
import pytest
from analytic_sdp import ANALYTIC, max_entry_problem, min_t_problem, shifted_scalar_problem

from certbound import sdp
from certbound.polynomial import Polynomial, VariableSpace, parse_expression
from certbound.sos import ParametricPolynomial, SemialgebraicSet, membership_constraint, verify_certificate

E = sdp.BlockEntries
TIGHT = sdp.SolverOptions(tol=1e-10)


@pytest.mark.parametrize("make,expected", ANALYTIC)
def test_analytic_examples(make, expected):
    problem = make()
    sol = sdp.solve(problem, TIGHT)
    assert sol.status is sdp.Status.OPTIMAL
    assert abs(sol.primal_objective - expected) <= 1e-8
    res = sdp.residuals(problem, sol)
    assert max(res.values()) <= 10 * TIGHT.tol


def test_min_t_solution_values():
    sol = sdp.solve(min_t_problem(), TIGHT)
    assert sol.u[0] == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose(sol.X[0], [[1, 1], [1, 1]], atol=1e-7)


def test_residuals_of_exact_solution():
    problem = min_t_problem()
    # primal X = [[1,1],[1,1]], t = 1; dual y = (-1/2, -1/2, 1) gives S = [[1/2,-1/2],[-1/2,1/2]]
    y = np.array([-0.5, -0.5, 1.0])
    S = np.array([[0.5, -0.5], [-0.5, 0.5]])
    sol = sdp.SdpSolution(sdp.Status.OPTIMAL, [np.ones((2, 2))], np.array([1.0]), y, [S], 1.0, 1.0, 0.0, 0, 0, 0)
    res = sdp.residuals(problem, sol)
    assert max(res.values()) <= 1e-12


def test_residuals_of_zero_point():
    problem = shifted_scalar_problem()
    problem = sdp.SdpProblem([1], [1.0], problem.A, problem.C, problem.B, problem.c_free)
    sol = sdp.SdpSolution(sdp.Status.OPTIMAL, [np.zeros((1, 1))], np.zeros(1), np.zeros(1), [np.zeros((1, 1))],
                          0, 0, 0, 0, 0, 0)
    assert sdp.residuals(problem, sol)["primal"] == 1.0


def test_residuals_dimension_mismatch():
    sol = sdp.solve(min_t_problem())
    with pytest.raises(ValueError):
        sdp.residuals(max_entry_problem(), sdp.SdpSolution(sol.status, sol.X, np.zeros(3), sol.y, sol.S,
                                                           0, 0, 0, 0, 0, 0))


def test_weak_duality_along_iterates():
    sol = sdp.solve(min_t_problem(), TIGHT)
    for h in sol.history:
        assert h["folded_gap"] >= -1e-9


def test_scale_invariance():
    a = sdp.solve(max_entry_problem(), TIGHT).primal_objective
    b = sdp.solve(max_entry_problem().scaled(10.0), TIGHT).primal_objective
    assert abs(a - b) <= 1e-7 * max(1.0, abs(a))


def test_determinism():
    a = sdp.solve(min_t_problem())
    b = sdp.solve(min_t_problem())
    assert a.iterations == b.iterations
    assert abs(a.primal_objective - b.primal_objective) <= 1e-12


def test_infeasibility_detection():
    primal_inf = sdp.SdpProblem([1], [-1.0], [E([0], [0], [0], [1.0])], [np.zeros((1, 1))], np.zeros((1, 0)), [])
    assert sdp.solve(primal_inf).status is sdp.Status.PRIMAL_INFEASIBLE
    unbounded = sdp.SdpProblem([2], [0.0], [E([0], [0], [1], [0.5])], [np.diag([-1.0, 0.0])], np.zeros((1, 0)), [])
    assert sdp.solve(unbounded).status is sdp.Status.DUAL_INFEASIBLE


def test_problem_validation():
    with pytest.raises(ValueError):
        sdp.SdpProblem([2], [], [E.empty()], [np.zeros((2, 2))], np.zeros((0, 0)), [])
    with pytest.raises(ValueError):
        sdp.SdpProblem([2], [1.0], [E([0], [1], [0], [1.0])], [np.zeros((2, 2))], np.zeros((1, 0)), [])
    with pytest.raises(ValueError):
        sdp.SdpProblem([2], [1.0], [E([0], [0], [0], [1.0])], [np.array([[0, 1], [0, 0.0]])], np.zeros((1, 0)), [])


# --- assembly --------------------------------------------------------------------

X12 = VariableSpace(["x1", "x2"])
X1 = VariableSpace(["x"])


def test_assemble_structure_counts():
    # x^2 on the whole line at degree 2: Gram basis [1, x], three coefficient equations
    system = membership_constraint(parse_expression("x^2", X1), SemialgebraicSet(X1), 2, reduce=False)
    problem, _ = sdp.assemble([system], {})
    assert problem.block_dims == [2] and problem.n_constraints == 3


def _beta_problem(kind_nonneg: bool):
    hs = [parse_expression(e, X12) for e in ("x1", "x2", "x1^2", "x1*x2", "x2^2")]
    params = [("alpha", Polynomial.constant(X12, 1.0))] + [(f"beta[{j}]", h) for j, h in enumerate(hs)]
    target = ParametricPolynomial(X12, -parse_expression("x1", X12), tuple(params))
    system = membership_constraint(target, SemialgebraicSet(X12), 2)
    nonneg = [f"beta[{j}]" for j in range(5)] if kind_nonneg else []
    return sdp.assemble([system], {"alpha": 1.0, **{f"beta[{j}]": 0.1 for j in range(5)}}, nonneg)


def test_assemble_nonnegative_betas_get_blocks():
    ineq, vm = _beta_problem(True)
    eq, _ = _beta_problem(False)
    assert len(ineq.block_dims) - len(eq.block_dims) == 5
    assert ineq.block_dims[-5:] == [1] * 5
    assert eq.n_free - ineq.n_free == 5
    assert vm.nonnegative_ids == [f"beta[{j}]" for j in range(5)]


def test_assemble_rejects_unknown_objective_variable():
    system = membership_constraint(parse_expression("x^2", X1), SemialgebraicSet(X1), 2)
    with pytest.raises(KeyError):
        sdp.assemble([system], {"gamma": 1.0})


def test_sos_global_minimum():
    # max gamma s.t. p - gamma is SOS recovers min p for a bivariate quartic
    p = parse_expression("x1^4 + x2^4 - 2*x1*x2 + 0.5*x1 + 1", X12)
    target = ParametricPolynomial(X12, p, (("gamma", -Polynomial.constant(X12, 1.0)),))
    system = membership_constraint(target, SemialgebraicSet(X12), 4)
    problem, vm = sdp.assemble([system], {"gamma": -1.0})
    sol = sdp.solve(problem)
    assert sol.status is sdp.Status.OPTIMAL
    gamma = vm.assignment(sol)["gamma"]
    g = np.linspace(-1.5, 1.5, 601)
    X, Y = np.meshgrid(g, g)
    grid_min = float(np.min(p.evaluate_many(np.column_stack([X.ravel(), Y.ravel()]))))
    assert gamma <= grid_min + 1e-7
    assert gamma >= grid_min - 1e-3
    assert verify_certificate(system, vm.assignment(sol)).certified
    assert max(sdp.residuals(problem, sol).values()) <= 10 * sdp.SolverOptions().tol


def test_sdpa_round_trip(tmp_path):
    problem = min_t_problem()
    path = tmp_path / "p.dat-s"
    sdp.write_sdpa(problem, path)
    data = sdp.read_sdpa(path)
    assert data["m"] == problem.n_constraints
    # two LP blocks encode the free-variable equality
    assert data["block_sizes"][0] == 2 and len(data["block_sizes"]) == 3
    np.testing.assert_allclose(data["c"], -problem.b)
