import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, strategies as st

from stabsyn import matkit

from conftest import random_spd, random_sym


@pytest.mark.parametrize("method", ["lapack", "jacobi"])
@pytest.mark.parametrize(
    "m, expected",
    [
        (np.eye(3), [1.0, 1.0, 1.0]),
        (np.diag([2.0, -3.0]), [-3.0, 2.0]),
        (np.array([[1.0, 0.5], [0.5, 1.0]]), [0.5, 1.5]),
    ],
)
def test_sym_eig_examples(method, m, expected):
    w, v = matkit.sym_eig(m, method=method)
    np.testing.assert_allclose(w, expected, atol=1e-12)
    np.testing.assert_allclose(v.T @ v, np.eye(len(w)), atol=1e-12)


@pytest.mark.parametrize("n", [1, 4, 9, 20])
def test_jacobi_matches_lapack(rng, n):
    m = random_sym(rng, n)
    w_j, v_j = matkit.jacobi_eig(m)
    w_l, _ = matkit.sym_eig(m)
    np.testing.assert_allclose(w_j, w_l, atol=1e-10)
    assert np.all(np.diff(w_j) >= 0)
    recon = (v_j * w_j) @ v_j.T
    assert np.linalg.norm(recon - m) <= 1e-9 * max(1.0, np.linalg.norm(m))


def test_jacobi_iteration_cap():
    policy = matkit.NumericPolicy(jacobi_max_sweeps=0)
    with pytest.raises(matkit.SolverFailure):
        matkit.jacobi_eig(np.array([[1.0, 1.0], [1.0, 2.0]]), policy)


def test_psd_project_examples():
    np.testing.assert_allclose(matkit.psd_project(np.diag([2.0, -3.0])), np.diag([2.0, 0.0]), atol=1e-12)
    np.testing.assert_allclose(matkit.psd_project(np.array([[0.0, 1.0], [1.0, 0.0]])), 0.5 * np.ones((2, 2)), atol=1e-12)


def test_psd_project_fixed_point(rng):
    p = random_spd(rng, 5, floor=0.0)
    np.testing.assert_allclose(matkit.psd_project(p), p, atol=1e-10)


@given(st.integers(1, 5), st.integers(0, 10_000))
def test_psd_project_is_nearest_and_idempotent(n, seed):
    rng = np.random.default_rng(seed)
    m = random_sym(rng, n, 2.0)
    proj = matkit.psd_project(m)
    assert matkit.min_eig(proj) >= -1e-10
    np.testing.assert_allclose(matkit.psd_project(proj), proj, atol=1e-10)
    dist = np.linalg.norm(m - proj)
    for _ in range(1000 // 50):
        x = rng.standard_normal((n, n))
        x = x @ x.T * rng.uniform(0, 2)
        assert dist <= np.linalg.norm(m - x) + 1e-12


@given(st.integers(1, 8), st.integers(0, 10_000))
def test_svec_round_trip_and_isometry(n, seed):
    rng = np.random.default_rng(seed)
    a, b = random_sym(rng, n), random_sym(rng, n)
    np.testing.assert_allclose(matkit.smat(matkit.svec(a), n), a, atol=1e-12)
    assert matkit.svec(a).size == matkit.svec_dim(n) == n * (n + 1) // 2
    assert abs(matkit.svec(a) @ matkit.svec(b) - np.trace(a @ b)) <= 1e-10


def test_smat_infers_dimension():
    v = matkit.svec(np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]]))
    assert matkit.smat(v).shape == (3, 3)


def test_dlyap_examples():
    np.testing.assert_allclose(matkit.dlyap(np.array([[0.5]]), np.array([[1.0]])), [[4.0 / 3.0]], atol=1e-12)
    np.testing.assert_allclose(matkit.dlyap(np.zeros((3, 3)), np.eye(3)), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(
        matkit.dlyap(np.diag([0.9, 0.5]), np.eye(2)), np.diag([1 / 0.19, 4.0 / 3.0]), atol=1e-10
    )


def test_dlyap_rejects_unstable():
    with pytest.raises(matkit.UnstableMatrix):
        matkit.dlyap(np.array([[1.0]]), np.array([[1.0]]))


def test_dlyap_value_decrease_identity(rng):
    a = rng.standard_normal((5, 5))
    a *= 0.9 / matkit.spectral_radius(a)
    q = random_spd(rng, 5)
    p = matkit.dlyap(a, q)
    assert np.linalg.norm(a.T @ p @ a - p + q) <= 1e-8 * np.linalg.norm(q)
    assert matkit.min_eig(p) > 0
    for _ in range(10):
        z = rng.standard_normal(5)
        az = a @ z
        assert abs((az @ p @ az - z @ p @ z) + z @ q @ z) <= 1e-8 * max(1.0, z @ p @ z)


def test_dare_gain_examples():
    one = np.array([[1.0]])
    np.testing.assert_allclose(matkit.dare_gain([[0.0]], [[3.0]], one, one), [[0.0]], atol=1e-12)
    k = matkit.dare_gain([[2.0]], one, one, one)
    assert abs(2.0 - k[0, 0]) < 1
    np.testing.assert_allclose(matkit.dare_gain([[0.5]], one, [[0.0]], one), [[0.0]], atol=1e-12)


def test_dare_matches_scipy(rng):
    a = rng.standard_normal((4, 4))
    b = rng.standard_normal((4, 2))
    q = random_spd(rng, 4)
    r = random_spd(rng, 2)
    np.testing.assert_allclose(matkit.dare(a, b, q, r), sla.solve_discrete_are(a, b, q, r), rtol=1e-8, atol=1e-8)
    k = matkit.dare_gain(a, b, q, r)
    assert matkit.spectral_radius(a - b @ k) < 1


def test_dare_unstabilizable_fails():
    # the unstable mode is not reachable
    a = np.diag([2.0, 0.5])
    b = np.array([[0.0], [1.0]])
    with pytest.raises(matkit.SolverFailure):
        matkit.dare_gain(a, b, np.eye(2), np.eye(1))


def test_cond_and_chol(rng):
    p = random_spd(rng, 4)
    w = np.linalg.eigvalsh(p)
    assert matkit.cond_spd(p) == pytest.approx(w[-1] / w[0])
    l = matkit.chol(p)
    np.testing.assert_allclose(l @ l.T, p, atol=1e-12)
    assert matkit.cond_spd(-np.eye(2)) == float("inf")


def test_lstsq(rng):
    a = rng.standard_normal((6, 3))
    x = rng.standard_normal(3)
    np.testing.assert_allclose(matkit.lstsq(a, a @ x), x, atol=1e-12)
