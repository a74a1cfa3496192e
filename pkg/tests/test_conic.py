import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from stabsyn import conic, lmi, matkit, plants

from conftest import random_sym


def psd_identity_problem(c_mat):
    n = c_mat.shape[0]
    k = matkit.svec_dim(n)
    cone = conic.Cone("psd", n, sp.identity(k, format="csr"), np.zeros(k), name="X")
    return conic.ProjectionProblem(matkit.svec(c_mat), [cone])


def test_pure_psd_matches_closed_form(rng):
    for n in (1, 3, 6):
        c_mat = random_sym(rng, n)
        x, rep, _ = conic.solve_projection(psd_identity_problem(c_mat))
        assert rep.status == conic.OPTIMAL
        assert np.max(np.abs(matkit.smat(x, n) - matkit.psd_project(c_mat))) <= 1e-6


def test_nonneg_orthant(rng):
    c = rng.standard_normal(8)
    cone = conic.Cone("nonneg", 8, sp.identity(8, format="csr"), np.zeros(8))
    x, rep, _ = conic.solve_projection(conic.ProjectionProblem(c, [cone]))
    np.testing.assert_allclose(x, np.maximum(c, 0), atol=1e-7)


def test_feasible_target_is_returned(rng):
    c_mat = matkit.psd_project(random_sym(rng, 4)) + np.eye(4)
    x, rep, _ = conic.solve_projection(psd_identity_problem(c_mat))
    np.testing.assert_allclose(matkit.smat(x, 4), c_mat, atol=1e-9)
    assert rep.objective <= 1e-12


def test_lmi_projection_of_feasible_point_is_identity():
    env = plants.make_env("pendulum-linear")
    init = lmi.initial_certificate(env.plant, 4, 4, 1.0)
    inst = init.instance()
    res = lmi.project(inst, init.theta, anchor=init.solution)
    assert res.feasible
    np.testing.assert_allclose(res.solution.q1, init.solution.q1, atol=1e-5 * np.abs(init.solution.q1).max())
    np.testing.assert_allclose(res.solution.q2, init.solution.q2, rtol=1e-5)
    assert np.max(np.abs(res.solution.theta.flat() - init.theta.flat())) <= 1e-5


def tiny_problem(seed):
    """Random feasible problem: a 2x2 or 3x3 PSD block plus sign constraints, n <= 6 variables."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    d = int(rng.integers(2, 4))
    k = matkit.svec_dim(d)
    a = rng.standard_normal((k, n))
    x0 = rng.standard_normal(n)
    # choose b so that x0 is strictly feasible
    b = matkit.svec(np.eye(d)) - a @ x0
    cones = [conic.Cone("psd", d, a, b, name="lmi")]
    m = int(rng.integers(0, 3))
    if m:
        g = rng.standard_normal((m, n))
        cones.append(conic.Cone("nonneg", m, g, 0.5 - g @ x0, name="lin"))
    target = x0 + 3 * rng.standard_normal(n)
    return conic.ProjectionProblem(target, cones), a, b, cones


@pytest.mark.parametrize("seed", range(8))
def test_matches_cvxpy(seed):
    cp = pytest.importorskip("cvxpy")
    prob, a, b, cones = tiny_problem(seed)
    x, rep, _ = conic.solve_projection(prob)
    assert rep.status == conic.OPTIMAL
    assert rep.kkt_residual <= 1e-5
    xv = cp.Variable(prob.n)
    cons = []
    for cone in cones:
        expr = cone.a.toarray() @ xv + cone.b
        if cone.kind == "psd":
            r, c, s = matkit.svec_indices(cone.dim)
            entries = {}
            for i in range(len(r)):
                entries[(r[i], c[i])] = expr[i] / s[i]
            mat = cp.bmat([[entries[(max(i, j), min(i, j))] for j in range(cone.dim)] for i in range(cone.dim)])
            cons.append((mat + mat.T) / 2 >> 0)
        else:
            cons.append(expr >= 0)
    ref = cp.Problem(cp.Minimize(cp.sum_squares(xv - prob.target)), cons)
    ref.solve(solver="CLARABEL")
    assert rep.objective == pytest.approx(ref.value, rel=1e-5, abs=1e-6)
    assert np.max(np.abs(x - xv.value)) <= 1e-4 * max(1.0, np.abs(x).max())


@pytest.mark.parametrize("seed", range(3))
def test_beats_random_feasible_samples(seed):
    prob, a, b, cones = tiny_problem(100 + seed)
    x, rep, _ = conic.solve_projection(prob)
    rng = np.random.default_rng(seed)
    samples = x + rng.standard_normal((200_000, prob.n)) * rng.uniform(1e-3, 1.0, (200_000, 1))
    ok = np.ones(len(samples), bool)
    for cone in cones:
        v = samples @ cone.a.toarray().T + cone.b
        if cone.kind == "psd":
            r, c, s = matkit.svec_indices(cone.dim)
            m = np.zeros((len(v), cone.dim, cone.dim))
            m[:, r, c] = v / s
            m[:, c, r] = v / s
            ok &= np.linalg.eigvalsh(m)[:, 0] >= 0
        else:
            ok &= np.all(v >= 0, axis=1)
    assert ok.any()
    best = np.min(np.sum((samples[ok] - prob.target) ** 2, axis=1))
    assert rep.objective <= best + 1e-4


def test_adjoint_identity(rng):
    prob, *_ = tiny_problem(7)
    assert conic.affine_map_adjoint_check(prob, trials=20) <= 1e-10
    env = plants.make_env("cartpole")
    init = lmi.initial_certificate(env.plant, 4, 4, 0.98)
    assert conic.affine_map_adjoint_check(lmi.projection_problem(init.instance()), trials=5) <= 1e-10


def test_adjoint_zero_and_single_variable():
    zero = conic.ProjectionProblem(np.zeros(2), [conic.Cone("psd", 2, sp.csr_matrix((3, 2)), np.zeros(3))])
    assert conic.affine_map_adjoint_check(zero) == 0.0
    coeff = matkit.svec(np.array([[1.0, 2.0], [2.0, 3.0]]))
    one = conic.ProjectionProblem(np.zeros(1), [conic.Cone("psd", 2, sp.csr_matrix(coeff[:, None]), np.zeros(3))])
    s_mat = np.array([[0.5, -1.0], [-1.0, 2.0]])
    # <x * C, S> = x * trace(C S) and the adjoint maps S to trace(C S)
    assert (one.cones[0].a.T @ matkit.svec(s_mat))[0] == pytest.approx(np.trace(matkit.smat(coeff, 2) @ s_mat))
    assert conic.affine_map_adjoint_check(one) <= 1e-12


def test_infeasible_problem_raises():
    # x >= 1 and -x >= 0
    a = sp.csr_matrix(np.array([[1.0], [-1.0]]))
    cone = conic.Cone("nonneg", 2, a, np.array([-1.0, 0.0]))
    with pytest.raises(conic.InfeasibleSuspected) as info:
        conic.solve_projection(conic.ProjectionProblem(np.zeros(1), [cone]))
    assert info.value.report.status == conic.INFEASIBLE


def test_max_iter_status(rng):
    prob, *_ = tiny_problem(3)
    x, rep, _ = conic.solve_projection(prob, max_iter=3, check_every=1)
    assert rep.status == conic.MAX_ITER
    assert rep.iterations <= 3


def test_deterministic(rng):
    prob, *_ = tiny_problem(5)
    x1, r1, _ = conic.solve_projection(prob)
    x2, r2, _ = conic.solve_projection(prob)
    assert np.array_equal(x1, x2) and r1.iterations == r2.iterations


def test_optimal_status_implies_small_residuals():
    for seed in range(5):
        prob, *_ = tiny_problem(seed)
        _, rep, _ = conic.solve_projection(prob)
        assert rep.status == conic.OPTIMAL
        assert prob.is_feasible(conic.solve_projection(prob)[0], tol=1e-12)
        assert rep.kkt_residual <= 1e-5


def test_warm_start_reduces_iterations():
    prob, *_ = tiny_problem(2)
    _, cold, warm = conic.solve_projection(prob)
    _, again, _ = conic.solve_projection(prob, warm)
    assert again.iterations <= cold.iterations


def test_equilibrated_solve_agrees():
    prob, *_ = tiny_problem(4)
    x1, _, _ = conic.solve_projection(prob)
    x2, rep, _ = conic.solve_projection(prob, scale=True)
    assert rep.status == conic.OPTIMAL
    np.testing.assert_allclose(x1, x2, atol=1e-5)


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1))
def test_psd_projection_property(seed):
    rng = np.random.default_rng(seed)
    c_mat = random_sym(rng, 3)
    x, rep, _ = conic.solve_projection(psd_identity_problem(c_mat))
    assert np.max(np.abs(matkit.smat(x, 3) - matkit.psd_project(c_mat))) <= 1e-6


def test_cone_validation():
    with pytest.raises(ValueError):
        conic.Cone("soc", 2, sp.csr_matrix((2, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        conic.Cone("psd", 2, sp.csr_matrix((2, 1)), np.zeros(2))
