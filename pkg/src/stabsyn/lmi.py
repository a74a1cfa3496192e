"""Convex stability conditions for the controller/plant feedback loop.

The sequentially convexified LMIs are built as sparse affine maps

    svec(F(x)) = const + coeff @ x

over a packed variable vector ``x`` (Q1 in svec coordinates, diag Q2, the
free transformed-controller blocks, multiplier coordinates). Each instance
carries two equivalent forms: the plain one (``matrix``), used for every
feasibility verdict, and a whitened one that the projection solver works
with. The whitened form uses the variables X = W^-1 Q1 W^-1 (W = P_bar^-1/2)
and Y = Q2 * Lambda_bar, so the linearization point is X = I, Y = 1 and the
numbers seen by the solver stay near unit scale.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import conic, matkit, rnnctl
from .iqc import ExtendedSystem, IqcSpec, extend_system
from .plants import PlantLti, UncertainPlant

log = logging.getLogger(__name__)

FEAS_TOL = 1e-8
# initial Lambda_bar : P_bar ratios tried by verify_controller
VERIFY_LAMBDA_SCALES = (1.0, 1e1, 1e2, 1e3, 1e4)


class ContractError(ValueError):
    pass


class InitializationFailure(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# variable layout


@dataclasses.dataclass(frozen=True)
class VarBlock:
    name: str
    kind: str  # "sym" | "diag" | "full" | "mult"
    shape: tuple
    offset: int
    basis: tuple = ()

    @property
    def size(self) -> int:
        if self.kind == "sym":
            return matkit.svec_dim(self.shape[0])
        if self.kind == "diag":
            return self.shape[0]
        if self.kind == "mult":
            return len(self.basis)
        return self.shape[0] * self.shape[1]

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


class VarLayout:
    """Ordered decision-variable blocks packed into one vector."""

    def __init__(self, specs):
        blocks, pos = {}, 0
        for name, kind, shape, *rest in specs:
            basis = tuple(rest[0]) if rest else ()
            blk = VarBlock(name, kind, tuple(shape), pos, basis)
            blocks[name] = blk
            pos += blk.size
        self.blocks = blocks
        self.n = pos

    def __contains__(self, name) -> bool:
        return name in self.blocks

    def __getitem__(self, name) -> VarBlock:
        return self.blocks[name]

    @property
    def names(self):
        return tuple(self.blocks)

    def vec_operator(self, name) -> sp.csr_matrix:
        """Sparse map from a block's coordinates to vec(X) (column-major)."""
        blk = self.blocks[name]
        rows_n, cols_n = blk.shape
        if blk.kind == "sym":
            n = rows_n
            r, c, s = matkit.svec_indices(n)
            t = np.arange(r.size)
            off = r != c
            ri = np.concatenate([r + c * n, (c + r * n)[off]])
            ci = np.concatenate([t, t[off]])
            vals = np.concatenate([1.0 / s, (1.0 / s)[off]])
            return sp.csr_matrix((vals, (ri, ci)), shape=(n * n, blk.size))
        if blk.kind == "diag":
            i = np.arange(rows_n)
            return sp.csr_matrix((np.ones(rows_n), (i + i * rows_n, i)), shape=(rows_n * rows_n, rows_n))
        if blk.kind == "full":
            i, j = np.divmod(np.arange(blk.size), cols_n)
            return sp.csr_matrix((np.ones(blk.size), (i + j * rows_n, np.arange(blk.size))), shape=(blk.size, blk.size))
        cols = [np.asarray(b, float).ravel(order="F") for b in blk.basis]
        dense = np.column_stack(cols) if cols else np.zeros((rows_n * cols_n, 0))
        return sp.csr_matrix(dense)

    def to_matrix(self, name, coords) -> np.ndarray:
        blk = self.blocks[name]
        coords = np.asarray(coords, float)
        if blk.kind == "sym":
            return matkit.smat(coords, blk.shape[0])
        if blk.kind == "diag":
            return np.diag(coords)
        if blk.kind == "full":
            return coords.reshape(blk.shape)
        m = np.zeros(blk.shape)
        for ci, b in zip(coords, blk.basis):
            m = m + ci * b
        return m

    def from_value(self, name, value) -> np.ndarray:
        blk = self.blocks[name]
        value = np.asarray(value, float)
        if blk.kind == "sym":
            return matkit.svec(value)
        if blk.kind in ("diag", "mult"):
            v = np.diag(value) if value.ndim == 2 else value.ravel()
            if v.size != blk.size:
                raise ContractError(f"{name}: expected {blk.size} coordinates, got {v.size}")
            return v
        if value.shape != blk.shape:
            raise ContractError(f"{name}: expected shape {blk.shape}, got {value.shape}")
        return value.ravel()


@dataclasses.dataclass
class Assignment:
    """Values of the decision variables. ``q2`` and ``lam`` are coordinate vectors."""

    q1: np.ndarray
    q2: np.ndarray
    theta: Optional[rnnctl.TransformedParams] = None
    lam: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0))

    def values(self) -> dict:
        out = {"Q1": self.q1, "Q2": np.diag(np.asarray(self.q2, float).ravel()), "lam": np.asarray(self.lam, float)}
        if self.theta is not None:
            out.update(self.theta.blocks())
        return out


# ---------------------------------------------------------------------------
# affine expressions and the sparse builder


class _Expr:
    """``const + sum_k L_k X_k R_k`` for a (p, q) matrix-valued expression."""

    def __init__(self, shape, const=None, terms=()):
        self.shape = tuple(shape)
        self.const = np.zeros(self.shape) if const is None else np.asarray(const, float)
        self.terms = list(terms)

    @classmethod
    def var(cls, name, left, right, const=None):
        left, right = np.atleast_2d(left), np.atleast_2d(right)
        return cls((left.shape[0], right.shape[1]), const, [(name, left, right)])

    def __add__(self, other):
        return _Expr(self.shape, self.const + other.const, self.terms + other.terms)

    def __neg__(self):
        return _Expr(self.shape, -self.const, [(n, -l, r) for n, l, r in self.terms])

    def lmul(self, m):
        m = np.atleast_2d(m)
        return _Expr((m.shape[0], self.shape[1]), m @ self.const, [(n, m @ l, r) for n, l, r in self.terms])

    def rmul(self, m):
        m = np.atleast_2d(m)
        return _Expr((self.shape[0], m.shape[1]), self.const @ m, [(n, l, r @ m) for n, l, r in self.terms])

    def value(self, values: dict) -> np.ndarray:
        out = self.const.copy()
        for name, left, right in self.terms:
            out = out + left @ np.atleast_2d(values[name]) @ right
        return out


class _Builder:
    """Accumulates lower-triangular blocks into svec(G + G^T)."""

    def __init__(self, sizes, layout: VarLayout, frozen: dict):
        self.sizes = list(sizes)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.n = int(self.offsets[-1])
        self.layout = layout
        self.frozen = frozen
        self.g0 = np.zeros((self.n, self.n))
        self.rows, self.cols, self.vals = [], [], []
        self._vops = {}

    def _vop(self, name):
        if name not in self._vops:
            self._vops[name] = self.layout.vec_operator(name)
        return self._vops[name]

    def put(self, bi, bj, expr: _Expr):
        if bi < bj:
            raise ValueError("only lower-triangular blocks are stored")
        p, q = self.sizes[bi], self.sizes[bj]
        if p == 0 or q == 0:
            return
        if expr.shape != (p, q):
            raise ContractError(f"block ({bi}, {bj}) has shape {expr.shape}, expected {(p, q)}")
        half = 0.5 if bi == bj else 1.0
        ro, co = self.offsets[bi], self.offsets[bj]
        self.g0[ro : ro + p, co : co + q] += half * expr.const
        for name, left, right in expr.terms:
            if name not in self.layout:
                self.g0[ro : ro + p, co : co + q] += half * (left @ np.atleast_2d(self.frozen[name]) @ right)
                continue
            if not (np.any(left) and np.any(right)):
                continue
            k = sp.kron(sp.csr_matrix(right.T), sp.csr_matrix(left), format="csr") @ self._vop(name)
            k = k.tocoo()
            local = k.row
            glob = (ro + local % p) + (co + local // p) * self.n
            self.rows.append(glob)
            self.cols.append(k.col + self.layout[name].offset)
            self.vals.append(half * k.data)

    def finish(self):
        n = self.n
        r, c, s = matkit.svec_indices(n)
        t = np.arange(r.size)
        sel = sp.csr_matrix(
            (np.concatenate([s, s]), (np.concatenate([t, t]), np.concatenate([r + c * n, c + r * n]))),
            shape=(r.size, n * n),
        )
        const = matkit.svec(self.g0 + self.g0.T) if n else np.zeros(0)
        if self.rows:
            gmap = sp.csr_matrix(
                (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
                shape=(n * n, self.layout.n),
            )
            coeff = (sel @ gmap).tocsr()
        else:
            coeff = sp.csr_matrix((r.size, self.layout.n))
        coeff.eliminate_zeros()
        return const, coeff


# ---------------------------------------------------------------------------
# loop data


@dataclasses.dataclass(frozen=True, eq=False)
class LoopData:
    """Plant-side blocks of the interconnection (nominal or extended)."""

    ag: np.ndarray
    bg: np.ndarray
    cg: np.ndarray
    b_q: np.ndarray
    c_r: np.ndarray
    d_rq: np.ndarray
    iqc: Optional[IqcSpec] = None

    @property
    def n_g(self) -> int:
        return self.ag.shape[0]

    @property
    def n_q(self) -> int:
        return self.b_q.shape[1]

    @property
    def n_r(self) -> int:
        return self.c_r.shape[0]

    @property
    def robust(self) -> bool:
        return self.iqc is not None

    @classmethod
    def nominal(cls, plant: PlantLti):
        n = plant.a_g.shape[0]
        return cls(plant.a_g, plant.b_g, plant.c_g, np.zeros((n, 0)), np.zeros((0, n)), np.zeros((0, 0)))

    @classmethod
    def extended(cls, ext: ExtendedSystem, spec: IqcSpec):
        return cls(ext.a_e, ext.b_e2, ext.c_e2, ext.b_e1, ext.c_e1, ext.d_e1, spec)

    def digest(self) -> str:
        h = hashlib.sha256()
        for m in (self.ag, self.bg, self.cg, self.b_q, self.c_r, self.d_rq):
            h.update(np.ascontiguousarray(m, dtype=float).tobytes())
            h.update(str(m.shape).encode())
        if self.iqc is not None:
            h.update(self.iqc.dumps().encode())
        return h.hexdigest()[:16]


def loop_data(system, iqc: Optional[IqcSpec] = None) -> LoopData:
    if isinstance(system, LoopData):
        return system
    if isinstance(system, PlantLti):
        return LoopData.nominal(system)
    if isinstance(system, UncertainPlant):
        if iqc is None:
            raise ContractError("an uncertain plant needs an IQC description")
        return LoopData.extended(extend_system(system, iqc), iqc)
    if isinstance(system, ExtendedSystem):
        if iqc is None:
            raise ContractError("an extended system needs its IQC description")
        return LoopData.extended(system, iqc)
    raise ContractError(f"unsupported system type {type(system).__name__}")


def closed_loop(theta_t: rnnctl.TransformedParams, data: LoopData) -> rnnctl.ClosedLoop:
    ext = ExtendedSystem(data.ag, data.b_q, data.bg, data.c_r, data.d_rq, data.cg, 0, data.n_r)
    if data.robust:
        return rnnctl.assemble_closed_loop_robust(theta_t, ext)
    return rnnctl.assemble_closed_loop(theta_t, PlantLti(data.ag, data.bg, data.cg))


def _loop_exprs(data: LoopData, shapes: dict, half_width: np.ndarray):
    """Closed-loop blocks as affine expressions of the controller blocks."""
    n_g = data.n_g
    n_xi = shapes["a_k"][0]
    n_phi = shapes["c_k2"][0]
    n_z = n_g + n_xi
    e1 = np.vstack([np.eye(n_g), np.zeros((n_xi, n_g))])
    e2 = np.vstack([np.zeros((n_g, n_xi)), np.eye(n_xi)])
    w = np.diag(half_width)
    a_const = np.zeros((n_z, n_z))
    a_const[:n_g, :n_g] = data.ag
    big_a = _Expr(
        (n_z, n_z),
        a_const,
        [
            ("d_k2", e1 @ data.bg, data.cg @ e1.T),
            ("c_k1", e1 @ data.bg, e2.T),
            ("b_k2", e2, data.cg @ e1.T),
            ("a_k", e2, e2.T),
        ],
    )
    big_b = _Expr((n_z, n_phi), None, [("d_k1", e1 @ data.bg, w), ("b_k1", e2, w)])
    big_c = _Expr((n_phi, n_z), None, [("d_k3", np.eye(n_phi), data.cg @ e1.T), ("c_k2", np.eye(n_phi), e2.T)])
    b_q = np.vstack([data.b_q, np.zeros((n_xi, data.n_q))])
    c_r = np.hstack([data.c_r, np.zeros((data.n_r, n_xi))])
    return big_a, big_b, big_c, b_q, c_r


def _mult_expr(data: LoopData, left, right) -> _Expr:
    """``left @ M(lam) @ right`` with the multiplier's fixed part as constant."""
    left, right = np.atleast_2d(left), np.atleast_2d(right)
    e = _Expr.var("lam", left, right, const=left @ data.iqc.fixed @ right)
    return e


# ---------------------------------------------------------------------------
# instances


@dataclasses.dataclass(eq=False)
class LmiInstance:
    """One sequentially convexified stability LMI around (P_bar, Lambda_bar)."""

    layout: VarLayout
    data: LoopData
    theta_template: rnnctl.TransformedParams
    p_bar: np.ndarray
    q_bar: np.ndarray  # P_bar^-1
    lam_bar: np.ndarray  # diagonal of Lambda_bar
    rho: float
    eps: float
    frozen: dict
    sizes: tuple
    const: np.ndarray
    coeff: sp.csr_matrix
    scaled_const: np.ndarray  # whitened form, in whitened coordinates (see to_scaled)
    scaled_coeff: sp.csr_matrix
    q_half: np.ndarray = None  # Q_bar^(1/2)
    q_half_inv: np.ndarray = None

    @property
    def dim(self) -> int:
        return int(sum(self.sizes))

    @property
    def n_zeta(self) -> int:
        return self.p_bar.shape[0]

    @property
    def n_phi(self) -> int:
        return self.lam_bar.size

    @property
    def robust(self) -> bool:
        return self.data.robust

    @property
    def theta_free(self) -> bool:
        return "a_k" in self.layout

    def vector(self, assignment) -> np.ndarray:
        if isinstance(assignment, np.ndarray):
            if assignment.size != self.layout.n:
                raise ContractError(f"expected {self.layout.n} coordinates, got {assignment.size}")
            return assignment
        x = np.zeros(self.layout.n)
        vals = assignment.values()
        for name in self.layout.names:
            x[self.layout[name].slice] = self.layout.from_value(name, vals[name])
        return x

    def assignment(self, x) -> Assignment:
        x = np.asarray(x, float)
        lay = self.layout
        q1 = lay.to_matrix("Q1", x[lay["Q1"].slice])
        q2 = x[lay["Q2"].slice].copy()
        lam = x[lay["lam"].slice].copy() if "lam" in lay else np.zeros(0)
        if self.theta_free:
            blocks = {n: x[lay[n].slice].reshape(lay[n].shape) for n in rnnctl.BLOCKS}
            theta = self.theta_template.replace(**blocks)
        else:
            theta = self.theta_template
        return Assignment(q1, q2, theta, lam)

    def matrix(self, assignment) -> np.ndarray:
        x = self.vector(assignment)
        return matkit.smat(self.const + self.coeff @ x, self.dim)

    def to_scaled(self, x) -> np.ndarray:
        """Whitened coordinates: Q1 = W X W with W = Q_bar^(1/2), Q2 = L_bar Y."""
        x = np.array(x, dtype=float)
        lay = self.layout
        q1 = lay["Q1"].slice
        x[q1] = matkit.svec(self.q_half_inv @ matkit.smat(x[q1], self.n_zeta) @ self.q_half_inv)
        x[lay["Q2"].slice] = x[lay["Q2"].slice] * self.lam_bar
        return x

    def from_scaled(self, xs) -> np.ndarray:
        x = np.array(xs, dtype=float)
        lay = self.layout
        q1 = lay["Q1"].slice
        x[q1] = matkit.svec(self.q_half @ matkit.smat(x[q1], self.n_zeta) @ self.q_half)
        x[lay["Q2"].slice] = x[lay["Q2"].slice] / self.lam_bar
        return x

    def scaled_matrix(self, assignment) -> np.ndarray:
        """The LMI after the whitening congruence (same inertia as ``matrix``)."""
        xs = self.to_scaled(self.vector(assignment))
        return matkit.smat(self.scaled_const + self.scaled_coeff @ xs, self.dim)


def strictness(q_bar, l_bar) -> float:
    """Shift used for the strict cones Q1 > 0 and diag Q2 > 0.

    A trace-relative 1e-6, capped at 1% of the smallest eigenvalue of
    ``q_bar`` (and of ``l_bar``) so the linearization point stays strictly
    inside even when P is badly conditioned.
    """
    q_bar = matkit.symmetrize(q_bar)
    l_bar = np.atleast_1d(np.asarray(l_bar, float))
    n = q_bar.shape[0]
    eps = 1e-6 * min(np.trace(q_bar) / n, float(np.mean(l_bar)) if l_bar.size else 1.0)
    floor = matkit.min_eig(q_bar)
    if l_bar.size:
        floor = min(floor, float(np.min(l_bar)))
    if floor > 0:
        eps = min(eps, 1e-2 * floor)
    return float(eps)


def _make_layout(n_zeta, n_phi, theta_t, free_theta, data: LoopData) -> VarLayout:
    specs = [("Q1", "sym", (n_zeta, n_zeta)), ("Q2", "diag", (n_phi, n_phi))]
    if free_theta:
        specs += [(name, "full", shape) for name, shape in theta_t.shapes().items()]
    if data.robust and data.iqc.n_lambda:
        specs.append(("lam", "mult", (data.n_r, data.n_r), data.iqc.basis))
    return VarLayout(specs)


def _assemble(
    data: LoopData,
    theta_t: rnnctl.TransformedParams,
    p_bar,
    lam_bar,
    rho,
    *,
    free_theta=True,
    q_bar=None,
    eps=None,
    lam=None,
) -> LmiInstance:
    n_g = data.n_g
    if theta_t.n_y != data.cg.shape[0] or theta_t.n_u != data.bg.shape[1]:
        raise ContractError(
            f"controller expects n_y={theta_t.n_y}, n_u={theta_t.n_u}; "
            f"plant has n_y={data.cg.shape[0]}, n_u={data.bg.shape[1]}"
        )
    n_zeta = n_g + theta_t.n_xi
    n_phi = theta_t.n_phi
    p_bar = matkit.symmetrize(p_bar)
    if p_bar.shape != (n_zeta, n_zeta):
        raise ContractError(f"P_bar must be {n_zeta}x{n_zeta}, got {p_bar.shape}")
    lam_bar = np.asarray(lam_bar, float)
    if lam_bar.ndim == 2:
        if np.any(lam_bar - np.diag(np.diag(lam_bar))):
            raise ContractError("Lambda_bar must be diagonal")
        lam_bar = np.diag(lam_bar).copy()
    if lam_bar.size != n_phi:
        raise ContractError(f"Lambda_bar must have {n_phi} diagonal entries, got {lam_bar.size}")
    if np.any(lam_bar <= 0):
        raise ContractError("Lambda_bar must be positive")
    if not 0.0 <= rho <= 1.0:
        raise ContractError(f"rho must lie in [0, 1], got {rho}")
    q_bar = np.linalg.inv(p_bar) if q_bar is None else matkit.symmetrize(q_bar)
    q_bar = matkit.symmetrize(q_bar)
    l_bar = 1.0 / lam_bar
    if eps is None:
        eps = strictness(q_bar, l_bar)

    layout = _make_layout(n_zeta, n_phi, theta_t, free_theta, data)
    frozen = {} if free_theta else dict(theta_t.blocks())
    if data.robust and "lam" not in layout:
        frozen["lam"] = data.iqc.fixed if lam is None else data.iqc.multiplier(lam)
    big_a, big_b, big_c, b_q, c_r = _loop_exprs(data, theta_t.shapes(), theta_t.sectors.half_width)
    n_q = data.n_q
    d_rq = data.d_rq
    sizes = (n_zeta, n_q, n_phi, n_zeta, n_phi)
    ZT, Q, Z, ZT2, PH2 = range(5)

    # Whitened form: congruence by blockdiag(Q_bar W^-1, I, L_bar^(1/2), W^-1, L_bar^(-1/2))
    # with W = Q_bar^(1/2), in the variables X = W^-1 Q1 W^-1 and Y = Q2 / l_bar. The
    # linearization point becomes X = I, Y = 1 and the loop matrices appear in
    # the coordinates where P_bar is the identity.
    w, v = np.linalg.eigh(q_bar)
    if w[0] <= 0:
        raise ContractError("Q_bar must be positive definite")
    q_half = matkit.symmetrize((v * np.sqrt(w)) @ v.T)
    q_half_inv = matkit.symmetrize((v / np.sqrt(w)) @ v.T)
    lh, lhi = np.diag(np.sqrt(l_bar)), np.diag(1.0 / np.sqrt(l_bar))
    i_z, i_f = np.eye(n_zeta), np.eye(n_phi)

    out = []
    for scaled in (False, True):
        b = _Builder(sizes, layout, frozen)
        if scaled:
            top = _Expr.var("Q1", -rho**2 * i_z, i_z, const=2 * rho**2 * i_z)
            zz = _Expr.var("Q2", -i_f, i_f, const=2 * i_f)
            cr_l, cr_r = q_half @ c_r.T, c_r @ q_half
            blk_a = big_a.lmul(q_half_inv).rmul(q_half)
            blk_b = big_b.lmul(q_half_inv).rmul(lh)
            blk_c = big_c.lmul(lhi).rmul(q_half)
            blk_q = q_half_inv @ b_q
        else:
            top = _Expr.var("Q1", -rho**2 * p_bar, p_bar, const=2 * rho**2 * p_bar)
            zz = _Expr.var("Q2", -np.diag(lam_bar), np.diag(lam_bar), const=2 * np.diag(lam_bar))
            cr_l, cr_r = c_r.T, c_r
            blk_a, blk_b, blk_c, blk_q = big_a, big_b, big_c, b_q
        if data.robust and data.n_r:
            top = top + (-_mult_expr(data, cr_l, cr_r))
            b.put(Q, ZT, -_mult_expr(data, d_rq.T, cr_r))
            b.put(Q, Q, -_mult_expr(data, d_rq.T, d_rq))
        b.put(ZT, ZT, top)
        b.put(Z, Z, zz)
        b.put(ZT2, ZT, blk_a)
        if n_q:
            b.put(ZT2, Q, _Expr(blk_q.shape, blk_q))
        b.put(ZT2, Z, blk_b)
        b.put(ZT2, ZT2, _Expr.var("Q1", i_z, i_z))
        b.put(PH2, ZT, blk_c)
        b.put(PH2, PH2, _Expr.var("Q2", i_f, i_f))
        out.append(b.finish())
    (const, coeff), (sconst, scoeff) = out
    return LmiInstance(
        layout=layout,
        data=data,
        theta_template=theta_t,
        p_bar=p_bar,
        q_bar=q_bar,
        lam_bar=lam_bar,
        rho=float(rho),
        eps=float(eps),
        frozen=frozen,
        sizes=sizes,
        const=const,
        coeff=coeff,
        scaled_const=sconst,
        scaled_coeff=scoeff,
        q_half=q_half,
        q_half_inv=q_half_inv,
    )


def assemble_nominal(plant: PlantLti, theta_t, p_bar, lam_bar, rho, **kw) -> LmiInstance:
    """Nominal sequentially convexified LMI.

    ``theta_t`` fixes the controller sizes and sector data; pass
    ``free_theta=False`` to freeze its values instead of optimizing them.
    """
    return _assemble(loop_data(plant), theta_t, p_bar, lam_bar, rho, **kw)


def assemble_robust(extended, theta_t, iqc: IqcSpec, p_bar, lam_bar, rho, **kw) -> LmiInstance:
    """Robust LMI on the plant extended by the IQC filter."""
    return _assemble(loop_data(extended, iqc), theta_t, p_bar, lam_bar, rho, **kw)


def assemble(data: LoopData, theta_t, p_bar, lam_bar, rho, **kw) -> LmiInstance:
    return _assemble(data, theta_t, p_bar, lam_bar, rho, **kw)


def next_instance(instance: LmiInstance, solution: Assignment, **kw) -> LmiInstance:
    """Instance linearized at a solution: P_bar = Q1^-1, Lambda_bar = Q2^-1."""
    q1 = matkit.symmetrize(solution.q1)
    p_next = matkit.symmetrize(np.linalg.inv(q1))
    kw.setdefault("eps", instance.eps)
    kw.setdefault("free_theta", instance.theta_free)
    theta = solution.theta if solution.theta is not None else instance.theta_template
    if not instance.theta_free:
        theta = instance.theta_template
    return _assemble(instance.data, theta, p_next, 1.0 / np.asarray(solution.q2, float), instance.rho, q_bar=q1, **kw)


def min_eig_residual(instance: LmiInstance, assignment) -> float:
    """Smallest eigenvalue of the assembled (unscaled) LMI; >= -1e-8 reads as feasible."""
    if instance.dim == 0:
        return 0.0
    return matkit.min_eig(instance.matrix(assignment))


def side_residual(instance: LmiInstance, assignment: Assignment) -> float:
    """How far Q1 >= eps I, diag Q2 >= eps and lam >= 0 are from failing."""
    parts = [matkit.min_eig(assignment.q1) - instance.eps, float(np.min(assignment.q2)) - instance.eps]
    if "lam" in instance.layout and np.size(assignment.lam):
        parts.append(float(np.min(assignment.lam)))
    return float(min(parts))


def is_feasible(instance: LmiInstance, assignment, tol: float = FEAS_TOL) -> bool:
    if isinstance(assignment, np.ndarray):
        assignment = instance.assignment(assignment)
    return min_eig_residual(instance, assignment) >= -tol and side_residual(instance, assignment) >= -1e-9


def recursive_feasibility_check(prev_solution: Assignment, new_instance: LmiInstance, tol: float = 1e-7) -> bool:
    return min_eig_residual(new_instance, prev_solution) >= -tol


# ---------------------------------------------------------------------------
# independent oracles


def lmi_dense(instance: LmiInstance, assignment: Assignment) -> np.ndarray:
    """The same LMI assembled directly from closed-loop matrices (test oracle)."""
    theta = assignment.theta if assignment.theta is not None else instance.theta_template
    cl = closed_loop(theta, instance.data)
    rho, pb, lb = instance.rho, instance.p_bar, np.diag(instance.lam_bar)
    q1, q2 = matkit.symmetrize(assignment.q1), np.diag(np.asarray(assignment.q2, float))
    g1 = rho**2 * (2 * pb - pb @ q1 @ pb)
    g2 = 2 * lb - lb @ q2 @ lb
    if not cl.robust:
        z = np.zeros
        nz, nf = cl.n_zeta, cl.b.shape[1]
        return np.block(
            [
                [g1, z((nz, nf)), cl.a.T, cl.c.T],
                [z((nf, nz)), g2, cl.b.T, cl.d.T],
                [cl.a, cl.b, q1, z((nz, nf))],
                [cl.c, cl.d, z((nf, nz)), q2],
            ]
        )
    m = instance.data.iqc.multiplier(assignment.lam) if "lam" in instance.layout else instance.frozen["lam"]
    nz, nq, nf = cl.n_zeta, cl.b_q.shape[1], cl.b.shape[1]
    nr = cl.c_r.shape[0]
    r_mat = np.block(
        [
            [np.eye(nz), np.zeros((nz, nq)), np.zeros((nz, nf))],
            [np.zeros((nf, nz)), np.zeros((nf, nq)), np.eye(nf)],
            [cl.c_r, cl.d_rq, cl.d_rz],
        ]
    )
    gamma = np.zeros((nz + nf + nr, nz + nf + nr))
    gamma[:nz, :nz] = g1
    gamma[nz : nz + nf, nz : nz + nf] = g2
    gamma[nz + nf :, nz + nf :] = -m
    h = np.block([[cl.a, cl.b_q, cl.b], [cl.c, cl.d_vq, cl.d]])
    qq = np.block([[q1, np.zeros((nz, nf))], [np.zeros((nf, nz)), q2]])
    return np.block([[r_mat.T @ gamma @ r_mat, h.T], [h, qq]])


def lyap_cond(cl: rnnctl.ClosedLoop, p, lam_mat, rho, m=None) -> np.ndarray:
    """Dissipation matrix that must be negative semidefinite for a certificate.

    Nominal: [A B; I 0]^T diag(P, -rho^2 P) [A B; I 0] + [C D; 0 I]^T diag(L, -L) [C D; 0 I].
    Robust: the same over (zeta, q, z) plus [C_r D_rq D_rz]^T M [C_r D_rq D_rz].
    """
    p = matkit.symmetrize(p)
    lam_mat = np.atleast_2d(lam_mat)
    nz, nf = cl.n_zeta, cl.b.shape[1]
    if not cl.robust:
        top = np.hstack([cl.a, cl.b])
        eye = np.hstack([np.eye(nz), np.zeros((nz, nf))])
        out = top.T @ p @ top - rho**2 * eye.T @ p @ eye
        cv = np.hstack([cl.c, cl.d])
        zsel = np.hstack([np.zeros((nf, nz)), np.eye(nf)])
        return matkit.symmetrize(out + cv.T @ lam_mat @ cv - zsel.T @ lam_mat @ zsel)
    nq = cl.b_q.shape[1]
    top = np.hstack([cl.a, cl.b_q, cl.b])
    eye = np.hstack([np.eye(nz), np.zeros((nz, nq + nf))])
    cv = np.hstack([cl.c, cl.d_vq, cl.d])
    zsel = np.hstack([np.zeros((nf, nz + nq)), np.eye(nf)])
    rr = np.hstack([cl.c_r, cl.d_rq, cl.d_rz])
    out = top.T @ p @ top - rho**2 * eye.T @ p @ eye
    out = out + cv.T @ lam_mat @ cv - zsel.T @ lam_mat @ zsel + rr.T @ np.atleast_2d(m) @ rr
    return matkit.symmetrize(out)


def certificate_slack(cert, theta_t, system, iqc: Optional[IqcSpec] = None) -> float:
    """Largest eigenvalue of the dissipation matrix; a valid certificate gives <= 0."""
    if isinstance(theta_t, rnnctl.RnnParams):
        theta_t = rnnctl.loop_transform(theta_t)
    data = system if isinstance(system, LoopData) else loop_data(system, iqc)
    cl = closed_loop(theta_t, data)
    if cert.p.shape[0] != cl.n_zeta or cert.lambda_diag.size != theta_t.n_phi:
        raise ContractError("certificate dimensions do not match the closed loop")
    m = data.iqc.multiplier(cert.m_coords) if cl.robust and data.iqc is not None else None
    return float(-matkit.min_eig(-lyap_cond(cl, cert.p, cert.lambda_mat, cert.rho, m)))


# ---------------------------------------------------------------------------
# projection onto the convexified stability set


@dataclasses.dataclass
class ProjectionResult:
    solution: Assignment
    x: np.ndarray
    report: conic.SolveReport
    warm: conic.WarmStart
    residual: float  # min_eig_residual of the unscaled LMI
    side: float
    margin: float

    @property
    def feasible(self) -> bool:
        return self.residual >= -FEAS_TOL and self.side >= -1e-9


def _scale(instance: LmiInstance) -> float:
    return float(np.sqrt(np.mean(instance.scaled_const**2)) + 1e-300)


def projection_problem(instance: LmiInstance, theta_target=None, lam_target=None, margin: float = 0.0):
    """Proximal problem: nearest (Q1, Q2, theta, lam) to the linearization point and theta'."""
    lay = instance.layout
    target = np.zeros(lay.n)
    # variables are whitened (see LmiInstance.to_scaled): the linearization
    # point is X = I, Y = 1
    target[lay["Q1"].slice] = matkit.svec(np.eye(instance.n_zeta))
    target[lay["Q2"].slice] = 1.0
    if instance.theta_free:
        theta_target = instance.theta_template if theta_target is None else theta_target
        for name in rnnctl.BLOCKS:
            target[lay[name].slice] = np.asarray(getattr(theta_target, name), float).ravel()
    if "lam" in lay:
        blk = lay["lam"]
        target[blk.slice] = np.ones(blk.size) if lam_target is None else np.asarray(lam_target, float)
    n = lay.n
    cones = [conic.Cone("psd", instance.dim, instance.scaled_coeff, instance.scaled_const, margin, "lmi")]
    q1 = lay["Q1"]
    sel = sp.csr_matrix((np.ones(q1.size), (np.arange(q1.size), np.arange(q1.offset, q1.offset + q1.size))), shape=(q1.size, n))
    # Q1 >= eps I  <=>  X >= eps W^-2 ;  Q2 >= eps  <=>  Y >= eps lam_bar
    w_inv2 = instance.q_half_inv @ instance.q_half_inv
    cones.append(conic.Cone("psd", instance.n_zeta, sel, -instance.eps * matkit.svec(w_inv2), 0.0, "q1"))
    q2 = lay["Q2"]
    sel = sp.csr_matrix((np.ones(q2.size), (np.arange(q2.size), np.arange(q2.offset, q2.offset + q2.size))), shape=(q2.size, n))
    cones.append(conic.Cone("nonneg", q2.size, sel, -instance.eps * instance.lam_bar, 0.0, "q2"))
    if "lam" in lay:
        blk = lay["lam"]
        sel = sp.csr_matrix((np.ones(blk.size), (np.arange(blk.size), np.arange(blk.offset, blk.offset + blk.size))), shape=(blk.size, n))
        cones.append(conic.Cone("nonneg", blk.size, sel, np.zeros(blk.size), 0.0, "lam"))
    return conic.ProjectionProblem(target, cones, layout=lay)


def project(
    instance: LmiInstance,
    theta_target=None,
    *,
    lam_target=None,
    anchor: Optional[Assignment] = None,
    warm: Optional[conic.WarmStart] = None,
    margin_rel: float = 1e-6,
    **solver_kw,
) -> ProjectionResult:
    """Solve the projection and return the point with its feasibility verdict.

    ``anchor`` should be strictly feasible for ``instance`` (the previous
    iterate is, by recursive feasibility); it caps the LMI margin and is the
    fallback for the convex-combination repair.
    """
    margin = margin_rel * _scale(instance)
    anchor_xs = None
    if anchor is not None:
        anchor_xs = instance.to_scaled(instance.vector(anchor))
        smin = matkit.min_eig(matkit.smat(instance.scaled_const + instance.scaled_coeff @ anchor_xs, instance.dim))
        if smin > 0:
            margin = min(margin, 0.5 * smin)
    problem = projection_problem(instance, theta_target, lam_target, margin)
    xs, report, warm_out = conic.solve_projection(problem, warm, anchor=anchor_xs, **solver_kw)
    x = instance.from_scaled(xs)
    sol = instance.assignment(x)
    return ProjectionResult(
        solution=sol,
        x=x,
        report=report,
        warm=warm_out,
        residual=min_eig_residual(instance, x),
        side=side_residual(instance, sol),
        margin=margin,
    )


# ---------------------------------------------------------------------------
# certificates


def plant_hash(system) -> str:
    h = hashlib.sha256()
    h.update(type(system).__name__.encode())
    for f in dataclasses.fields(system):
        v = getattr(system, f.name)
        if isinstance(v, np.ndarray):
            h.update(f.name.encode())
            h.update(str(v.shape).encode())
            h.update(np.ascontiguousarray(v, dtype=float).tobytes())
    return h.hexdigest()[:16]


def theta_hash(theta) -> str:
    h = hashlib.sha256()
    h.update(theta.kind.encode())
    h.update(theta.activation.encode())
    h.update(np.ascontiguousarray(theta.flat()).tobytes())
    h.update(np.ascontiguousarray(theta.sectors.alpha).tobytes())
    h.update(np.ascontiguousarray(theta.sectors.beta).tobytes())
    return h.hexdigest()[:16]


@dataclasses.dataclass(eq=False)
class Certificate:
    p: np.ndarray
    lambda_diag: np.ndarray
    rho: float
    m_coords: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0))
    cond_p: float = math.nan
    epsilon: float = 0.0
    plant_hash: str = ""
    theta_hash: str = ""

    def __post_init__(self):
        self.p = matkit.symmetrize(self.p)
        self.lambda_diag = np.asarray(self.lambda_diag, float).ravel()
        self.m_coords = np.asarray(self.m_coords, float).ravel()
        if matkit.min_eig(self.p) <= 0:
            raise ContractError("certificate P must be positive definite")
        if np.any(self.lambda_diag <= 0):
            raise ContractError("certificate Lambda must be positive")
        if math.isnan(self.cond_p):
            self.cond_p = matkit.cond_spd(self.p)

    @property
    def lambda_mat(self) -> np.ndarray:
        return np.diag(self.lambda_diag)

    @property
    def envelope(self) -> float:
        """Decay-envelope coefficient sqrt(cond P)."""
        return math.sqrt(self.cond_p)

    @classmethod
    def from_solution(cls, sol: Assignment, instance: LmiInstance, plant=None) -> "Certificate":
        p = matkit.symmetrize(np.linalg.inv(matkit.symmetrize(sol.q1)))
        theta = sol.theta if sol.theta is not None else instance.theta_template
        return cls(
            p=p,
            lambda_diag=1.0 / np.asarray(sol.q2, float),
            rho=instance.rho,
            m_coords=np.asarray(sol.lam, float) if "lam" in instance.layout else np.zeros(0),
            epsilon=instance.eps,
            plant_hash=plant_hash(plant) if plant is not None else instance.data.digest(),
            theta_hash=theta_hash(theta),
        )

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "P": self.p.tolist(),
            "Lambda": self.lambda_diag.tolist(),
            "M_coords": self.m_coords.tolist(),
            "cond_P": self.cond_p,
            "epsilon": self.epsilon,
            "plant_hash": self.plant_hash,
            "theta_hash": self.theta_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        return cls(
            p=np.asarray(d["P"], float),
            lambda_diag=np.asarray(d["Lambda"], float),
            rho=float(d["rho"]),
            m_coords=np.asarray(d.get("M_coords", []), float),
            cond_p=float(d["cond_P"]),
            epsilon=float(d.get("epsilon", 0.0)),
            plant_hash=d.get("plant_hash", ""),
            theta_hash=d.get("theta_hash", ""),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Certificate":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclasses.dataclass
class InfeasibleReport:
    """No certificate was found; this is not a proof of instability."""

    reason: str
    rounds: int = 0
    best_residual: float = -math.inf
    details: dict = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"reason": self.reason, "rounds": self.rounds, "best_residual": self.best_residual, **self.details}


# ---------------------------------------------------------------------------
# Lyapunov LMI for a fixed controller


def lyapunov_problem(cl: rnnctl.ClosedLoop, rho, data: LoopData, lam_fixed=None, margin=1e-6, lam_floor=1e-3):
    """Linear feasibility problem in (P, Lambda, lam) for a fixed closed loop.

    ``-lyap_cond(P, Lambda, M) >= margin I`` with ``P >= I`` fixing the scale;
    the objective keeps (P, Lambda, lam) small, which favours a well
    conditioned P. Returns ``(problem, layout)``.
    """
    nz, nf = cl.n_zeta, cl.b.shape[1]
    nq = cl.b_q.shape[1] if cl.robust else 0
    specs = [("P", "sym", (nz, nz))]
    if lam_fixed is None:
        specs.append(("L", "diag", (nf, nf)))
    robust_mult = cl.robust and data.iqc is not None and data.iqc.n_lambda > 0
    if robust_mult:
        specs.append(("lam", "mult", (data.n_r, data.n_r), data.iqc.basis))
    lay = VarLayout(specs)
    frozen = {} if lam_fixed is None else {"L": np.diag(np.asarray(lam_fixed, float).ravel())}
    if cl.robust:
        top = np.hstack([cl.a, cl.b_q, cl.b])
        cv = np.hstack([cl.c, cl.d_vq, cl.d])
        rr = np.hstack([cl.c_r, cl.d_rq, cl.d_rz])
    else:
        top = np.hstack([cl.a, cl.b])
        cv = np.hstack([cl.c, cl.d])
        rr = np.zeros((0, nz + nf))
    size = nz + nq + nf
    e_z = np.vstack([np.eye(nz), np.zeros((nq + nf, nz))])
    e_f = np.vstack([np.zeros((nz + nq, nf)), np.eye(nf)])
    neg = (
        _Expr.var("P", -top.T, top)
        + _Expr.var("P", rho**2 * e_z, e_z.T)
        + _Expr.var("L", -cv.T, cv)
        + _Expr.var("L", e_f, e_f.T)
    )
    if robust_mult:
        neg = neg + _Expr.var("lam", -rr.T, rr, const=-rr.T @ data.iqc.fixed @ rr)
    b = _Builder([size], lay, frozen)
    b.put(0, 0, neg)
    const, coeff = b.finish()
    n = lay.n
    cones = [conic.Cone("psd", size, coeff, const, margin, "lyap")]
    pb = lay["P"]
    sel = sp.csr_matrix((np.ones(pb.size), (np.arange(pb.size), np.arange(pb.offset, pb.offset + pb.size))), shape=(pb.size, n))
    cones.append(conic.Cone("psd", nz, sel, -matkit.svec(np.eye(nz)), 0.0, "P"))
    target = np.zeros(n)
    if "L" in lay:
        blk = lay["L"]
        sel = sp.csr_matrix((np.ones(blk.size), (np.arange(blk.size), np.arange(blk.offset, blk.offset + blk.size))), shape=(blk.size, n))
        cones.append(conic.Cone("nonneg", blk.size, sel, -lam_floor * np.ones(blk.size), 0.0, "L"))
        target[blk.slice] = 1.0
    if "lam" in lay:
        blk = lay["lam"]
        sel = sp.csr_matrix((np.ones(blk.size), (np.arange(blk.size), np.arange(blk.offset, blk.offset + blk.size))), shape=(blk.size, n))
        cones.append(conic.Cone("nonneg", blk.size, sel, np.zeros(blk.size), 0.0, "lam"))
        target[blk.slice] = 1.0
    return conic.ProjectionProblem(target, cones, layout=lay), lay


def solve_lyapunov(theta_t, data: LoopData, rho, lam_fixed=None, **solver_kw):
    """Find (P, Lambda, lam) certifying a fixed controller, or None."""
    cl = closed_loop(theta_t, data)
    if not cl.robust and matkit.spectral_radius(cl.a) > rho * (1 + 1e-9):
        return None
    problem, lay = lyapunov_problem(cl, rho, data, lam_fixed=lam_fixed)
    solver_kw.setdefault("max_iter", 20_000)
    # this feasibility problem converges faster with a primal-heavy penalty rule
    solver_kw.setdefault("primal_weight", 300.0)
    try:
        x, report, _ = conic.solve_projection(problem, **solver_kw)
    except conic.InfeasibleSuspected:
        return None
    p = lay.to_matrix("P", x[lay["P"].slice])
    lam_diag = np.diag(lay.to_matrix("L", x[lay["L"].slice])) if "L" in lay else np.asarray(lam_fixed, float).ravel()
    lam = x[lay["lam"].slice] if "lam" in lay else np.zeros(0)
    m = data.iqc.multiplier(lam) if (cl.robust and data.iqc is not None) else None
    slack = -matkit.min_eig(-lyap_cond(cl, p, np.diag(lam_diag), rho, m))
    if matkit.min_eig(p) <= 0 or np.any(lam_diag <= 0) or slack > 0:
        return None
    return p, lam_diag, lam, report


def verify_controller(theta_t, system, rho, iqc: Optional[IqcSpec] = None, max_rounds: int = 30, **solver_kw):
    """Search a certificate for a fixed controller by sequential convexification.

    Returns a ``Certificate`` or an ``InfeasibleReport``.
    """
    if isinstance(theta_t, rnnctl.RnnParams):
        theta_t = rnnctl.loop_transform(theta_t)
    data = loop_data(system, iqc)
    cl = closed_loop(theta_t, data)
    if not cl.robust:
        rad = matkit.spectral_radius(cl.a)
        if rad > rho * (1 + 1e-9):
            return InfeasibleReport(
                "closed-loop spectral radius exceeds rho; no quadratic certificate exists",
                details={"spectral_radius": rad, "rho": rho},
            )
    direct = solve_lyapunov(theta_t, data, rho, **solver_kw)
    nz = cl.n_zeta
    nf = theta_t.n_phi
    if direct is not None:
        p_start, lam_start, lam0, _ = direct
        starts = [(p_start, lam_start)]
    else:
        lam0 = None
        p_start = np.eye(nz)
        if matkit.spectral_radius(cl.a) < rho:
            try:
                p_start = matkit.dlyap(cl.a / max(rho, 1e-12), np.eye(nz))
                p_start = p_start / matkit.min_eig(p_start)
            except (matkit.UnstableMatrix, matkit.SolverFailure):
                pass
        # the convexified set caps the multiplier at Lambda_bar, and only the
        # ratio Lambda_bar : P_bar matters, so several ratios are tried
        starts = [(p_start, s * np.ones(nf)) for s in VERIFY_LAMBDA_SCALES]
    solver_kw.setdefault("max_iter", 20_000)
    best = -math.inf
    plant = system if not isinstance(system, LoopData) else None
    for p_bar, lam_bar in starts:
        warm, lam_t = None, lam0
        for rnd in range(1, max_rounds + 1):
            inst = _assemble(data, theta_t, p_bar, lam_bar, rho, free_theta=False)
            try:
                res = project(inst, lam_target=lam_t, warm=warm, **solver_kw)
            except conic.InfeasibleSuspected:
                break
            best = max(best, res.residual)
            if res.feasible:
                return Certificate.from_solution(res.solution, inst, plant=plant)
            warm = res.warm
            q1 = res.solution.q1
            if matkit.min_eig(q1) <= 0 or np.any(res.solution.q2 <= 0):
                break
            p_bar = matkit.symmetrize(np.linalg.inv(q1))
            lam_bar = 1.0 / res.solution.q2
            lam_t = res.solution.lam if res.solution.lam.size else None
    return InfeasibleReport("no certificate found", rounds=max_rounds, best_residual=best)


# ---------------------------------------------------------------------------
# initial certificate


def observer_controller(
    plant: PlantLti, n_xi, n_phi, rho=1.0, activation="tanh", sectors=None, margin=0.95, state_weight=1e-3
):
    """Observer-based output feedback embedded in the transformed parameters.

    The design uses the plant scaled by ``1 / (margin * rho)`` so that the
    closed-loop spectral radius stays below ``margin * rho``.
    """
    a, b, c = plant.a_g, plant.b_g, plant.c_g
    n = a.shape[0]
    if n_xi < n:
        raise ContractError(f"n_xi={n_xi} is smaller than the plant order {n}; cannot embed an observer")
    s = margin * (rho if rho > 0 else 1.0)
    # extra weight on the (normalized) outputs keeps transients inside the limits
    k = matkit.dare_gain(a / s, b / s, state_weight * np.eye(n) + c.T @ c, np.eye(b.shape[1]))
    lt = matkit.dare_gain(a.T / s, c.T / s, np.eye(n), np.eye(c.shape[0]))
    l = lt.T
    theta = rnnctl.TransformedParams.zeros(n_xi, n_phi, c.shape[0], b.shape[1], activation=activation, sectors=sectors)
    a_k = np.zeros((n_xi, n_xi))
    a_k[:n, :n] = a - b @ k - l @ c
    b_k2 = np.zeros((n_xi, c.shape[0]))
    b_k2[:n] = l
    c_k1 = np.zeros((b.shape[1], n_xi))
    c_k1[:, :n] = -k
    return theta.replace(a_k=a_k, b_k2=b_k2, c_k1=c_k1)


@dataclasses.dataclass
class InitialCertificate:
    p: np.ndarray
    lambda_diag: np.ndarray
    theta: rnnctl.TransformedParams
    m_coords: np.ndarray
    epsilon: float
    solution: Assignment  # strictly feasible point for the instance at (p, lambda)
    data: LoopData
    rounds: int = 0

    def __iter__(self):
        return iter((self.p, np.diag(self.lambda_diag), self.theta))

    def instance(self, free_theta=True) -> LmiInstance:
        return _assemble(
            self.data,
            self.theta,
            self.p,
            self.lambda_diag,
            self.rho,
            free_theta=free_theta,
            q_bar=self.solution.q1,
            eps=self.epsilon,
        )

    rho: float = 1.0


def initial_certificate(
    system,
    n_xi,
    n_phi,
    rho,
    *,
    iqc: Optional[IqcSpec] = None,
    activation="tanh",
    sectors=None,
    max_rounds: int = 20,
    rate_slack: float = 0.975,
    **solver_kw,
) -> InitialCertificate:
    """Bootstrap (P0, Lambda0, theta0) so that the first projection is feasible."""
    data = loop_data(system, iqc)
    nominal = system.nominal() if isinstance(system, UncertainPlant) else PlantLti(data.ag[: data.n_g], data.bg, data.cg)
    theta0 = observer_controller(nominal, n_xi, n_phi, rho, activation, sectors)
    diagnostics = {}
    cl = closed_loop(theta0, data)
    n_lam = data.iqc.n_lambda if data.robust else 0

    def lmi_candidate(rate):
        direct = solve_lyapunov(theta0, data, rate, lam_fixed=np.ones(n_phi), **solver_kw)
        if direct is None:
            diagnostics[f"lmi@{rate:.4g}"] = "failed"
            return None
        p, lam_diag, lam, _ = direct
        return p, lam_diag, lam if lam.size else np.ones(n_lam)

    def lyap_candidate(rate):
        if data.robust:
            return None
        try:
            p = matkit.dlyap(cl.a / max(rate, 1e-12), np.eye(cl.n_zeta))
        except (matkit.UnstableMatrix, matkit.SolverFailure) as exc:
            diagnostics[f"dlyap@{rate:.4g}"] = str(exc)
            return None
        return matkit.symmetrize(p) / matkit.min_eig(p), np.ones(n_phi), np.zeros(0)

    def setup(cand):
        p, lam_diag, lam = cand
        q = matkit.symmetrize(np.linalg.inv(p))
        e = strictness(q, 1.0 / np.asarray(lam_diag, float))
        return p, q, np.asarray(lam_diag, float), lam, e, Assignment(q, 1.0 / np.asarray(lam_diag, float), theta0, lam)

    # a certificate at a slightly faster rate is strictly interior at rho and
    # needs no bootstrap projection; the closed form is tried first as it is cheap
    for make in (lyap_candidate, lmi_candidate):
        cand = make(rate_slack * rho)
        if cand is None:
            continue
        p0, q_bar, lam_diag, lam0, eps, anchor = setup(cand)
        inst = _assemble(data, theta0, p0, lam_diag, rho, eps=eps, q_bar=q_bar)
        if matkit.min_eig(inst.scaled_matrix(inst.vector(anchor))) > 0 and side_residual(inst, anchor) > 0:
            return InitialCertificate(
                p=p0,
                lambda_diag=lam_diag,
                theta=theta0,
                m_coords=lam0,
                epsilon=eps,
                solution=anchor,
                data=data,
                rounds=0,
                rho=float(rho),
            )
        diagnostics[f"{make.__name__}: not interior"] = True

    cand = lyap_candidate(rho) or lmi_candidate(rho)
    if cand is None:
        raise InitializationFailure(f"initial controller is not certifiable at rate {rho}", diagnostics)
    p0, q_bar, lam_diag, lam0, eps, anchor = setup(cand)
    if not lam0.size:
        lam0 = None
    theta = theta0
    warm = None
    for rnd in range(1, max_rounds + 1):
        inst = _assemble(data, theta, p0, lam_diag, rho, eps=eps, q_bar=q_bar)
        if anchor is not None and min_eig_residual(inst, anchor) < 0:
            anchor = None
        try:
            res = project(inst, theta0, lam_target=lam0, anchor=anchor, warm=warm, **solver_kw)
        except conic.InfeasibleSuspected as exc:
            diagnostics[f"round{rnd}"] = str(exc)
            res = None
        if res is not None and res.feasible:
            sol = res.solution
            q1 = matkit.symmetrize(sol.q1)
            return InitialCertificate(
                p=matkit.symmetrize(np.linalg.inv(q1)),
                lambda_diag=1.0 / sol.q2,
                theta=sol.theta,
                m_coords=sol.lam,
                epsilon=eps,
                solution=sol,
                data=data,
                rounds=rnd,
                rho=float(rho),
            )
        if res is None:
            break
        diagnostics[f"round{rnd}"] = {"residual": res.residual, "status": res.report.status}
        q1 = res.solution.q1
        if matkit.min_eig(q1) <= 0:
            break
        q_bar = matkit.symmetrize(q1)
        p0 = matkit.symmetrize(np.linalg.inv(q_bar))
        lam_diag = 1.0 / np.maximum(res.solution.q2, eps)
        theta = res.solution.theta
        lam0 = res.solution.lam if res.solution.lam.size else lam0
        warm = res.warm
    raise InitializationFailure("bootstrap projection stayed infeasible", diagnostics)
