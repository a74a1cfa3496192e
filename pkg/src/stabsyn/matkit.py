"""Dense symmetric linear algebra used throughout the package.

Everything here is a pure function of its inputs. Matrices are plain
``numpy`` arrays; symmetric inputs are symmetrized on entry so that round-off
asymmetry from upstream products never leaks into an eigensolver.
"""

from __future__ import annotations

import dataclasses
from functools import lru_cache

import numpy as np
import scipy.linalg as sla


class SolverFailure(RuntimeError):
    """An iterative kernel hit its iteration cap without converging."""


class UnstableMatrix(ValueError):
    """A Lyapunov solve was requested for a matrix with spectral radius >= 1."""


@dataclasses.dataclass(frozen=True)
class NumericPolicy:
    """Central tolerance record. Tests may build a tighter copy with ``replace``."""

    sym_tol: float = 1e-12
    eig_recon_tol: float = 1e-9
    psd_tol: float = 1e-10
    lyap_tol: float = 1e-8
    riccati_tol: float = 1e-7
    jacobi_max_sweeps: int = 100
    riccati_max_iter: int = 10_000
    feas_tol: float = 1e-8


DEFAULT_POLICY = NumericPolicy()


def symmetrize(m) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return 0.5 * (m + m.T)


# ---------------------------------------------------------------------------
# eigen-decomposition


def jacobi_eig(m, policy: NumericPolicy = DEFAULT_POLICY):
    """Cyclic Jacobi eigensolver.

    Slow compared to LAPACK but short enough to audit; it is kept as the
    reference path for ``sym_eig(method="jacobi")`` and as a test oracle.
    Returns ascending eigenvalues and orthonormal eigenvector columns.
    """
    a = symmetrize(m).copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = max(1.0, np.linalg.norm(a))
    for _ in range(policy.jacobi_max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= 1e-15 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise SolverFailure(f"Jacobi did not converge in {policy.jacobi_max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def sym_eig(m, method: str = "lapack", policy: NumericPolicy = DEFAULT_POLICY):
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix."""
    a = symmetrize(m)
    if method == "jacobi":
        return jacobi_eig(a, policy)
    if method != "lapack":
        raise ValueError(f"unknown eigen method {method!r}")
    try:
        w, v = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise SolverFailure(str(exc)) from exc
    return w, v


def min_eig(m) -> float:
    return float(np.linalg.eigvalsh(symmetrize(m))[0])


def psd_project(m) -> np.ndarray:
    """Frobenius-nearest PSD matrix (negative eigenvalues clipped to zero)."""
    w, v = sym_eig(m)
    w = np.clip(w, 0.0, None)
    return symmetrize((v * w) @ v.T)


def cond_spd(p) -> float:
    """Condition number from the extreme eigenvalues of an SPD matrix."""
    w = np.linalg.eigvalsh(symmetrize(p))
    if w[0] <= 0:
        return float("inf")
    return float(w[-1] / w[0])


def is_psd(m, tol: float = 0.0) -> bool:
    return min_eig(m) >= -tol


def chol(m) -> np.ndarray:
    """Lower Cholesky factor; raises ``numpy.linalg.LinAlgError`` if not PD."""
    return np.linalg.cholesky(symmetrize(m))


def lstsq(a, b) -> np.ndarray:
    sol, *_ = np.linalg.lstsq(np.asarray(a, float), np.asarray(b, float), rcond=None)
    return sol


# ---------------------------------------------------------------------------
# symmetric vectorization (lower triangle, column-major, off-diagonals * sqrt 2)


@lru_cache(maxsize=64)
def svec_indices(n: int):
    """Row/col index arrays and scale factors of the svec layout for size n."""
    rows, cols = [], []
    for j in range(n):
        for i in range(j, n):
            rows.append(i)
            cols.append(j)
    rows = np.array(rows, dtype=np.intp)
    cols = np.array(cols, dtype=np.intp)
    scale = np.where(rows == cols, 1.0, np.sqrt(2.0))
    for arr in (rows, cols, scale):
        arr.setflags(write=False)
    return rows, cols, scale


def svec_dim(n: int) -> int:
    return n * (n + 1) // 2


def svec(m) -> np.ndarray:
    a = symmetrize(m)
    r, c, s = svec_indices(a.shape[0])
    return a[r, c] * s


def smat(v, n: int | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if n is None:
        n = int(round((np.sqrt(8 * v.size + 1) - 1) / 2))
    if svec_dim(n) != v.size:
        raise ValueError(f"length {v.size} is not a triangular number for n={n}")
    r, c, s = svec_indices(n)
    out = np.zeros((n, n))
    out[r, c] = v / s
    out[c, r] = v / s
    return out


# ---------------------------------------------------------------------------
# Lyapunov and Riccati


def spectral_radius(a) -> float:
    a = np.atleast_2d(np.asarray(a, float))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def dlyap(a, q, policy: NumericPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Solve ``a.T @ P @ a - P + q = 0`` for a Schur-stable ``a``."""
    a = np.atleast_2d(np.asarray(a, float))
    q = symmetrize(q)
    if a.shape != q.shape:
        raise ValueError(f"shape mismatch: a {a.shape} vs q {q.shape}")
    rad = spectral_radius(a)
    if rad >= 1.0:
        raise UnstableMatrix(f"spectral radius {rad:.6g} >= 1")
    # scipy solves a X a^H - X + q = 0, so pass the transpose.
    p = symmetrize(sla.solve_discrete_lyapunov(a.T, q))
    resid = np.linalg.norm(a.T @ p @ a - p + q)
    if resid > policy.lyap_tol * max(1.0, np.linalg.norm(q)) * max(1.0, np.linalg.norm(p)):
        raise SolverFailure(f"Lyapunov residual {resid:.3g} too large")
    return p


def dare(a, b, q, r, policy: NumericPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Stabilizing DARE solution by the structure-preserving doubling algorithm."""
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    q = symmetrize(q)
    r = symmetrize(r)
    n = a.shape[0]
    if b.shape[0] != n or q.shape != (n, n) or r.shape != (b.shape[1], b.shape[1]):
        raise ValueError("dare: inconsistent dimensions")
    ak = a.copy()
    gk = symmetrize(b @ np.linalg.solve(r, b.T))
    hk = q.copy()
    eye = np.eye(n)
    for _ in range(policy.riccati_max_iter):
        w = eye + gk @ hk
        ak_w = np.linalg.solve(w.T, ak.T).T  # ak @ inv(w)
        a_next = ak_w @ ak
        g_next = symmetrize(gk + ak_w @ gk @ ak.T)
        h_next = symmetrize(hk + ak.T @ hk @ np.linalg.solve(w, ak))
        done = np.linalg.norm(h_next - hk) <= 1e-14 * max(1.0, np.linalg.norm(h_next))
        ak, gk, hk = a_next, g_next, h_next
        if done or not np.all(np.isfinite(hk)):
            break
    else:
        raise SolverFailure("doubling iteration for the DARE did not converge")
    if not np.all(np.isfinite(hk)):
        raise SolverFailure("DARE iteration diverged")
    return hk


def dare_gain(a, b, q, r, policy: NumericPolicy = DEFAULT_POLICY) -> np.ndarray:
    """State-feedback gain K with ``a - b @ K`` Schur stable (LQR on the DARE)."""
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    q = np.atleast_2d(np.asarray(q, float))
    r = np.atleast_2d(np.asarray(r, float))
    p = dare(a, b, q, r, policy)
    gain = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
    with np.errstate(over="ignore", invalid="ignore"):
        resid = np.linalg.norm(a.T @ p @ a - p - a.T @ p @ b @ gain + q)
    if not resid <= policy.riccati_tol * max(1.0, np.linalg.norm(p)):
        raise SolverFailure(f"Riccati residual {resid:.3g} too large")
    rad = spectral_radius(a - b @ gain)
    if rad >= 1.0:
        raise SolverFailure(f"DARE gain is not stabilizing (spectral radius {rad:.6g})")
    return gain
