"""Operator-splitting solver for proximal semidefinite programs.

Solves

    minimize    ||x - c||^2
    subject to  A_i x + b_i - margin_i * e_i  in  K_i      (i = 1..m)

where each ``K_i`` is a PSD cone (entries stored as svec) or the
nonnegative orthant. The splitting introduces a consensus copy
``s = A x + b`` and alternates a linear solve in ``x`` (cached sparse
factorization of ``I + rho A^T A``) with a blockwise cone projection in ``s``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import matkit

OPTIMAL, MAX_ITER, INFEASIBLE = "optimal", "max-iter", "infeasible-suspected"


class InfeasibleSuspected(RuntimeError):
    """Raised when the dual iterates look like an infeasibility certificate."""

    def __init__(self, message, report=None, best=None):
        super().__init__(message)
        self.report = report
        self.best = best


@dataclasses.dataclass
class Cone:
    kind: str  # "psd" or "nonneg"
    dim: int  # matrix size for psd, length for nonneg
    a: sp.csr_matrix
    b: np.ndarray
    margin: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("psd", "nonneg"):
            raise ValueError(f"unknown cone kind {self.kind!r}")
        self.a = sp.csr_matrix(self.a)
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.a.shape[0] != self.length or self.b.size != self.length:
            raise ValueError(f"cone {self.name!r}: map has {self.a.shape[0]} rows, expected {self.length}")

    @property
    def length(self) -> int:
        return matkit.svec_dim(self.dim) if self.kind == "psd" else self.dim

    def unit(self) -> np.ndarray:
        """The cone's 'identity' direction (svec(I) or all ones)."""
        if self.kind == "psd":
            return matkit.svec(np.eye(self.dim))
        return np.ones(self.dim)

    def project(self, v: np.ndarray) -> np.ndarray:
        if self.kind == "nonneg":
            return np.maximum(v, 0.0)
        r, c, s = matkit.svec_indices(self.dim)
        m = np.empty((self.dim, self.dim))
        m[r, c] = v / s
        m[c, r] = v / s
        w, vec = np.linalg.eigh(m)
        pos = w > 0
        if not pos.any():
            return np.zeros_like(v)
        vp = vec[:, pos]
        proj = (vp * w[pos]) @ vp.T
        return proj[r, c] * s

    def residual(self, v: np.ndarray) -> float:
        """Smallest eigenvalue (psd) or entry (nonneg) of a cone vector."""
        if v.size == 0:
            return math.inf
        if self.kind == "nonneg":
            return float(v.min())
        return float(np.linalg.eigvalsh(matkit.smat(v, self.dim))[0])


@dataclasses.dataclass
class ProjectionProblem:
    """``min ||x - target||^2`` over a product of cones; Hessian is the identity."""

    target: np.ndarray
    cones: list
    layout: object = None

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float).ravel()
        for cone in self.cones:
            if cone.a.shape[1] != self.n:
                raise ValueError(f"cone {cone.name!r} acts on {cone.a.shape[1]} variables, expected {self.n}")

    @property
    def n(self) -> int:
        return self.target.size

    def stacked(self):
        a = sp.vstack([c.a for c in self.cones], format="csr") if self.cones else sp.csr_matrix((0, self.n))
        b = np.concatenate([c.b - c.margin * c.unit() for c in self.cones]) if self.cones else np.zeros(0)
        return a, b

    def slices(self):
        out, pos = [], 0
        for c in self.cones:
            out.append(slice(pos, pos + c.length))
            pos += c.length
        return out

    def cone_residuals(self, x, margin_frac: float = 0.0) -> dict:
        """Smallest eigenvalue or entry per cone, after removing ``margin_frac`` of each margin."""
        out = {}
        for i, c in enumerate(self.cones):
            v = c.a @ x + c.b
            if margin_frac:
                v = v - margin_frac * c.margin * c.unit()
            out[c.name or f"cone{i}"] = c.residual(v)
        return out

    def is_feasible(self, x, tol: float = 0.0, margin_frac: float = 0.0) -> bool:
        return all(r >= -tol for r in self.cone_residuals(x, margin_frac).values())

    def objective(self, x) -> float:
        d = np.asarray(x) - self.target
        return float(d @ d)


@dataclasses.dataclass
class SolveReport:
    primal_residual: float
    dual_residual: float
    objective: float
    iterations: int
    status: str
    eps_abs: float
    eps_rel: float
    max_iter: int
    penalty: float = 1.0
    refactorizations: int = 0
    kkt_residual: float = math.nan
    repair_weight: float = 0.0
    seconds: float = 0.0
    cone_residuals: dict = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclasses.dataclass
class WarmStart:
    x: np.ndarray
    s: np.ndarray
    y: np.ndarray
    penalty: float = 1.0


def affine_map_adjoint_check(problem: ProjectionProblem, trials: int = 5, seed: int = 0) -> float:
    """Largest |<A x, S> - <x, A^T S>| over random pairs, relative to the norms."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for cone in problem.cones:
        a = cone.a
        for _ in range(trials):
            x = rng.standard_normal(problem.n)
            if cone.kind == "psd":
                smat_s = rng.standard_normal((cone.dim, cone.dim))
                s = matkit.svec(smat_s + smat_s.T)
                # <A x, S> as a trace inner product of matrices
                lhs = float(np.sum(matkit.smat(a @ x, cone.dim) * matkit.smat(s, cone.dim)))
            else:
                s = rng.standard_normal(cone.length)
                lhs = float((a @ x) @ s)
            rhs = float(x @ (a.T @ s))
            scale = max(1.0, np.linalg.norm(x) * np.linalg.norm(s))
            worst = max(worst, abs(lhs - rhs) / scale)
    return worst


class _Factor:
    """Factorization of diag(h) + penalty * A^T A (sparse LU; the matrix is SPD)."""

    def __init__(self, ata: sp.csc_matrix, penalty: float, h=None):
        h = np.ones(ata.shape[0]) if h is None else h
        m = (sp.diags(h, format="csc") + penalty * ata).tocsc()
        self._lu = spla.splu(m, permc_spec="MMD_AT_PLUS_A")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(rhs)


def _factor(ata, penalty: float, h=None) -> _Factor:
    return _Factor(ata, penalty, h)


def _gram(a: sp.csr_matrix) -> sp.csc_matrix:
    """A^T A; through BLAS when A is fairly dense (sparse products are slow there)."""
    rows, cols = a.shape
    if rows * cols <= 4e7 and a.nnz > 0.02 * rows * cols:
        ad = a.toarray()
        return sp.csc_matrix(ad.T @ ad)
    return (a.T.tocsr() @ a).tocsc()


def equilibrate(a: sp.csr_matrix, slices, iters: int = 15, bounds=(1e-4, 1e4)):
    """Ruiz-style scaling: a diagonal variable scaling ``d`` and one scalar per cone.

    Returns ``(d, e)`` with ``e`` expanded to rows, so that ``diag(e) a diag(d)``
    has columns and cone blocks of comparable infinity norm. A scalar per cone
    keeps each cone invariant; the objective Hessian ``diag(d)^2`` enters the
    column norms so that variables that barely appear in the constraints are
    not blown up.
    """
    n = a.shape[1]
    d = np.ones(n)
    e_cone = np.ones(len(slices))
    a = a.tocsc()
    for _ in range(iters):
        e_rows = np.concatenate([np.full(sl.stop - sl.start, ec) for sl, ec in zip(slices, e_cone)]) if slices else np.zeros(0)
        scaled = sp.diags(e_rows) @ a @ sp.diags(d)
        col = np.asarray(abs(scaled).max(axis=0).todense()).ravel() if scaled.shape[0] else np.zeros(n)
        col = np.maximum(col, d * d)
        col = np.where(col > 0, col, 1.0)
        d = np.clip(d / np.sqrt(col), *bounds)
        scaled = (sp.diags(e_rows) @ a @ sp.diags(d)).tocsr()
        row = np.asarray(abs(scaled).max(axis=1).todense()).ravel() if scaled.shape[0] else np.zeros(0)
        for k, sl in enumerate(slices):
            top = float(row[sl].max()) if sl.stop > sl.start else 0.0
            if top > 0:
                e_cone[k] = float(np.clip(e_cone[k] / math.sqrt(top), *bounds))
    e_rows = np.concatenate([np.full(sl.stop - sl.start, ec) for sl, ec in zip(slices, e_cone)]) if slices else np.zeros(0)
    return d, e_rows


def solve_projection(
    problem: ProjectionProblem,
    warm_start: Optional[WarmStart] = None,
    *,
    eps_abs: float = 1e-9,
    eps_rel: float = 1e-6,
    max_iter: int = 50_000,
    penalty: Optional[float] = None,
    relax: float = 1.6,
    check_every: int = 10,
    adapt_every: int = 50,
    adapt_factor: float = 5.0,
    max_refactor: int = 50,
    primal_weight: float = 1.0,
    anchor: Optional[np.ndarray] = None,
    raise_on_infeasible: bool = True,
    min_iter: int = 0,
    scale: bool = False,
):
    """Solve the projection problem by ADMM.

    Returns ``(x, report, warm)``. ``warm`` can seed the next solve of a
    nearby problem with the same variable layout and cone sizes.

    If ``anchor`` is a point satisfying every cone with its margin removed,
    the returned point is pulled toward it by the smallest convex weight that
    makes it feasible (``report.repair_weight``). Without an anchor, a point
    that fails the margin-free cones is returned with status max-iter.
    """
    t0 = time.perf_counter()
    a, b = problem.stacked()
    c = problem.target
    n, m = problem.n, a.shape[0]
    slices = problem.slices()
    at_raw = a.T.tocsr()
    # iterate in equilibrated coordinates: x = d * xs, s = ss / e, y = e * ys
    if scale:
        d, e = equilibrate(a, slices)
    else:
        d, e = np.ones(n), np.ones(m)
    a_s = (sp.diags(e) @ a @ sp.diags(d)).tocsr()
    b_s = e * b
    at_s = a_s.T.tocsr()
    ata = _gram(a_s)
    h = d * d
    dc = d * c

    if warm_start is not None and warm_start.x.size == n and warm_start.s.size == m:
        xs = warm_start.x / d
        ss = warm_start.s * e
        ys = warm_start.y / e
        rho = warm_start.penalty if penalty is None else penalty
    else:
        xs = c / d
        ax0 = a_s @ xs + b_s
        ss = np.zeros(m)
        for cone, sl in zip(problem.cones, slices):
            ss[sl] = cone.project(ax0[sl])
        ys = np.zeros(m)
        rho = 100.0 if penalty is None else penalty
    factor = _factor(ata, rho, h)
    refactors = 1
    c_norm = float(np.linalg.norm(c))

    def project_all(v):
        out = np.empty_like(v)
        for cone, sl in zip(problem.cones, slices):
            out[sl] = cone.project(v[sl])
        return out

    status = MAX_ITER
    r_p = r_d = math.inf
    tol_abs, tol_rel, tightened = eps_abs, eps_rel, 0
    tighten_floor = 1e4  # at most four decades of tightening
    ys_check = ys.copy()
    best = (math.inf, xs.copy(), ss.copy(), ys.copy())
    it = 0
    for it in range(1, max_iter + 1):
        rhs = dc - at_s @ (ys - rho * (ss - b_s))
        xs = factor.solve(rhs)
        axs = a_s @ xs + b_s
        s_hat = relax * axs + (1.0 - relax) * ss
        s_new = project_all(s_hat + ys / rho)
        ys = ys + rho * (s_hat - s_new)
        ss = s_new

        if it % check_every and it != max_iter:
            continue
        x = d * xs
        ax = axs / e
        s_un = ss / e
        aty = at_raw @ (e * ys)
        r_p = float(np.linalg.norm(ax - s_un))
        r_d = float(np.linalg.norm(x - c + aty))
        # normalizations follow the usual QP convention: the dual side is
        # measured against ||x||, ||c|| and ||A^T y||, not ||x - c||
        scale_p = max(np.linalg.norm(ax), np.linalg.norm(s_un), 1e-30)
        scale_d = max(np.linalg.norm(x), c_norm, np.linalg.norm(aty), 1e-30)
        eps_p = tol_abs * math.sqrt(max(m, 1)) + tol_rel * scale_p
        eps_d = tol_abs * math.sqrt(n) + tol_rel * scale_d
        merit = r_p / eps_p + r_d / eps_d
        if merit < best[0]:
            best = (merit, xs.copy(), ss.copy(), ys.copy())
        if r_p <= eps_p and r_d <= eps_d and it >= min_iter:
            if problem.is_feasible(x, _roundoff(a, b, x)) or tol_abs * tighten_floor <= eps_abs:
                status = OPTIMAL
                break
            # converged by the relative test but outside the margin-free
            # cones: tighten and keep going rather than lean on the repair
            tol_abs *= 0.1
            tol_rel *= 0.1
            tightened += 1

        dy = e * (ys - ys_check)
        ys_check = ys.copy()
        bdy = float(b @ dy)
        if it > 200 and bdy > 0:
            ndy = np.linalg.norm(dy)
            if np.linalg.norm(at_raw @ dy) <= 1e-6 * bdy and bdy > 1e-9 * ndy * max(1.0, np.linalg.norm(b)):
                status = INFEASIBLE
                break

        if it % adapt_every == 0 and refactors < max_refactor:
            ratio = primal_weight * (r_p / eps_p) / max(r_d / eps_d, 1e-30)
            if ratio > adapt_factor or ratio < 1.0 / adapt_factor:
                rho_new = float(np.clip(rho * math.sqrt(ratio), 1e-6, 1e6))
                if rho_new != rho:
                    rho = rho_new
                    factor = _factor(ata, rho, h)
                    refactors += 1

    if status == MAX_ITER:
        _, xs, ss, ys = best
    x, s, y = d * xs, ss / e, e * ys
    repair = 0.0
    if anchor is not None and status != INFEASIBLE and not problem.is_feasible(x, _roundoff(a, b, x)):
        x, repair = _repair(problem, x, np.asarray(anchor, dtype=float))
    ax = a @ x + b
    aty = at_raw @ y
    kkt = float(np.linalg.norm(x - c + aty) / max(1.0, np.linalg.norm(x), np.linalg.norm(c), np.linalg.norm(aty)))
    report = SolveReport(
        primal_residual=float(np.linalg.norm(ax - s)),
        dual_residual=float(np.linalg.norm(x - c + aty)),
        objective=problem.objective(x),
        iterations=it,
        status=status,
        eps_abs=eps_abs,
        eps_rel=eps_rel,
        max_iter=max_iter,
        penalty=rho,
        refactorizations=refactors,
        kkt_residual=kkt,
        repair_weight=repair,
        seconds=time.perf_counter() - t0,
        cone_residuals=problem.cone_residuals(x),
    )
    if status == OPTIMAL and not problem.is_feasible(x, _roundoff(a, b, x)):
        report.status = MAX_ITER
    warm = WarmStart(x.copy(), s.copy(), y.copy(), rho)
    if status == INFEASIBLE and raise_on_infeasible:
        raise InfeasibleSuspected(
            f"projection looks infeasible after {it} iterations (primal residual {report.primal_residual:.3g})",
            report=report,
            best=x,
        )
    return x, report, warm


def _roundoff(a: sp.csr_matrix, b: np.ndarray, x: np.ndarray) -> float:
    """Cone residuals this small are rounding error (active constraints with no margin)."""
    if not b.size:
        return 0.0
    return 1e3 * np.finfo(float).eps * float(np.max(abs(a) @ np.abs(x) + np.abs(b)))


def _repair(problem: ProjectionProblem, x: np.ndarray, anchor: np.ndarray, steps: int = 60):
    """Smallest t in [0, 1] with (1 - t) x + t anchor feasible (bisection).

    Aims for half of each cone margin when the anchor has it, so that a
    repaired point stays strictly inside.
    """
    frac = 0.5 if problem.is_feasible(anchor, margin_frac=0.5) else 0.0
    if not problem.is_feasible(anchor, margin_frac=frac):
        return x, 0.0
    lo, hi = 0.0, 1.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if problem.is_feasible((1 - mid) * x + mid * anchor, margin_frac=frac):
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12:
            break
    return (1 - hi) * x + hi * anchor, hi
