"""Time-domain rho-hard IQCs for an uncertainty q = Delta(p).

A filter ``psi+ = A psi + B1 p + B2 q, r = C psi + D1 p + D2 q`` (psi(0) = 0)
maps the uncertainty's input/output to ``r``; the IQC asks every partial sum
``sum_k rho^(-2k) r(k)^T M r(k)`` to stay nonnegative. ``M`` ranges over a
finitely generated cone ``fixed + sum_i lam_i basis_i`` with ``lam >= 0``.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np


class ContractError(ValueError):
    pass


def _mat(m, rows, cols) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return np.zeros((rows, cols))
    return m.reshape(rows, cols)


@dataclasses.dataclass(frozen=True, eq=False)
class IqcSpec:
    a_psi: np.ndarray
    b_psi1: np.ndarray
    b_psi2: np.ndarray
    c_psi: np.ndarray
    d_psi1: np.ndarray
    d_psi2: np.ndarray
    basis: tuple  # tuple of (n_r, n_r) symmetric matrices
    fixed: np.ndarray
    rho: float = 1.0

    def __post_init__(self):
        d1 = np.atleast_2d(np.asarray(self.d_psi1, dtype=float))
        d2 = np.atleast_2d(np.asarray(self.d_psi2, dtype=float))
        n_r, n_p = d1.shape
        n_q = d2.shape[1]
        a = np.asarray(self.a_psi, dtype=float)
        n_psi = 0 if a.size == 0 else a.shape[0]
        object.__setattr__(self, "a_psi", _mat(a, n_psi, n_psi))
        object.__setattr__(self, "b_psi1", _mat(self.b_psi1, n_psi, n_p))
        object.__setattr__(self, "b_psi2", _mat(self.b_psi2, n_psi, n_q))
        object.__setattr__(self, "c_psi", _mat(self.c_psi, n_r, n_psi))
        object.__setattr__(self, "d_psi1", d1)
        object.__setattr__(self, "d_psi2", d2.reshape(n_r, n_q))
        basis = tuple(np.asarray(b, dtype=float).reshape(n_r, n_r) for b in self.basis)
        for b in basis:
            if not np.allclose(b, b.T):
                raise ContractError("multiplier basis matrices must be symmetric")
        object.__setattr__(self, "basis", basis)
        fixed = np.zeros((n_r, n_r)) if self.fixed is None else np.asarray(self.fixed, float).reshape(n_r, n_r)
        object.__setattr__(self, "fixed", 0.5 * (fixed + fixed.T))
        if not 0.0 <= float(self.rho) <= 1.0:
            raise ContractError(f"rho must lie in [0, 1], got {self.rho}")

    @property
    def n_psi(self) -> int:
        return self.a_psi.shape[0]

    @property
    def n_r(self) -> int:
        return self.d_psi1.shape[0]

    @property
    def n_p(self) -> int:
        return self.d_psi1.shape[1]

    @property
    def n_q(self) -> int:
        return self.d_psi2.shape[1]

    @property
    def n_lambda(self) -> int:
        return len(self.basis)

    def multiplier(self, lam) -> np.ndarray:
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        if lam.size != self.n_lambda:
            raise ContractError(f"expected {self.n_lambda} multiplier coordinates, got {lam.size}")
        m = self.fixed.copy()
        for li, b in zip(lam, self.basis):
            m = m + li * b
        return m

    def to_dict(self) -> dict:
        return {
            "a_psi": self.a_psi.tolist(),
            "b_psi1": self.b_psi1.tolist(),
            "b_psi2": self.b_psi2.tolist(),
            "c_psi": self.c_psi.tolist(),
            "d_psi1": self.d_psi1.tolist(),
            "d_psi2": self.d_psi2.tolist(),
            "basis": [b.tolist() for b in self.basis],
            "fixed": self.fixed.tolist(),
            "rho": float(self.rho),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IqcSpec":
        return cls(
            a_psi=np.asarray(d["a_psi"], float),
            b_psi1=np.asarray(d["b_psi1"], float),
            b_psi2=np.asarray(d["b_psi2"], float),
            c_psi=np.asarray(d["c_psi"], float),
            d_psi1=np.asarray(d["d_psi1"], float),
            d_psi2=np.asarray(d["d_psi2"], float),
            basis=tuple(np.asarray(b, float) for b in d["basis"]),
            fixed=np.asarray(d["fixed"], float),
            rho=float(d["rho"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    def __eq__(self, other):
        if not isinstance(other, IqcSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def sector_iqc(alpha: float, beta: float, rho: float = 1.0) -> IqcSpec:
    """Static sector multiplier for a scalar Delta in sector [alpha, beta].

    ``r = (beta p - q, q - alpha p)`` and ``M = lam [[0, 1], [1, 0]]`` so that
    ``r^T M r = 2 lam (beta p - q)(q - alpha p) >= 0`` inside the sector.
    """
    if alpha > beta:
        raise ContractError(f"sector needs alpha <= beta, got [{alpha}, {beta}]")
    return IqcSpec(
        a_psi=np.zeros((0, 0)),
        b_psi1=np.zeros((0, 1)),
        b_psi2=np.zeros((0, 1)),
        c_psi=np.zeros((2, 0)),
        d_psi1=np.array([[beta], [-alpha]]),
        d_psi2=np.array([[-1.0], [1.0]]),
        basis=(np.array([[0.0, 1.0], [1.0, 0.0]]),),
        fixed=np.zeros((2, 2)),
        rho=rho,
    )


def filter_output(spec: IqcSpec, p_trace, q_trace) -> np.ndarray:
    """Run the filter from psi(0) = 0 and return r(k) for every k."""
    p_trace = np.asarray(p_trace, dtype=float).reshape(len(p_trace), -1)
    q_trace = np.asarray(q_trace, dtype=float).reshape(len(q_trace), -1)
    psi = np.zeros(spec.n_psi)
    out = np.zeros((len(p_trace), spec.n_r))
    for k, (p, q) in enumerate(zip(p_trace, q_trace)):
        out[k] = spec.c_psi @ psi + spec.d_psi1 @ p + spec.d_psi2 @ q
        psi = spec.a_psi @ psi + spec.b_psi1 @ p + spec.b_psi2 @ q
    return out


def check_iqc(spec: IqcSpec, lam, p_trace, q_trace, n_steps=None, tol: float = 1e-9):
    """Evaluate every weighted partial sum up to ``n_steps``.

    Returns ``(holds, worst_partial_sum)``.
    """
    if len(p_trace) != len(q_trace):
        raise ContractError("p and q traces must have equal length")
    n_steps = len(p_trace) - 1 if n_steps is None else n_steps
    if len(p_trace) < n_steps + 1:
        raise ContractError("traces are shorter than N + 1")
    if n_steps < 0:
        return True, 0.0
    m = spec.multiplier(lam)
    r = filter_output(spec, p_trace[: n_steps + 1], q_trace[: n_steps + 1])
    terms = np.einsum("ki,ij,kj->k", r, m, r)
    if spec.rho == 0.0:
        weights = np.zeros(n_steps + 1)
        weights[0] = 1.0
    else:
        weights = spec.rho ** (-2.0 * np.arange(n_steps + 1))
    partial = np.cumsum(weights * terms)
    worst = float(min(0.0, partial.min()))
    return bool(partial.min() >= -tol), worst


@dataclasses.dataclass(frozen=True)
class ExtendedSystem:
    a_e: np.ndarray
    b_e1: np.ndarray
    b_e2: np.ndarray
    c_e1: np.ndarray
    d_e1: np.ndarray
    c_e2: np.ndarray
    n_psi: int
    n_r: int

    @property
    def n_x(self) -> int:
        return self.a_e.shape[0]


def extend_system(plant, spec: IqcSpec) -> ExtendedSystem:
    """Interconnect the uncertain plant's nominal part with the IQC filter."""
    if spec.n_p != plant.c_g1.shape[0] or spec.n_q != plant.b_g1.shape[1]:
        raise ContractError(
            f"filter expects (n_p, n_q)=({spec.n_p}, {spec.n_q}), plant has "
            f"({plant.c_g1.shape[0]}, {plant.b_g1.shape[1]})"
        )
    n_g, n_psi = plant.a_g.shape[0], spec.n_psi
    a_e = np.block(
        [
            [plant.a_g, np.zeros((n_g, n_psi))],
            [spec.b_psi1 @ plant.c_g1, spec.a_psi],
        ]
    )
    b_e1 = np.vstack([plant.b_g1, spec.b_psi1 @ plant.d_g1 + spec.b_psi2])
    b_e2 = np.vstack([plant.b_g2, np.zeros((n_psi, plant.b_g2.shape[1]))])
    c_e1 = np.hstack([spec.d_psi1 @ plant.c_g1, spec.c_psi])
    d_e1 = spec.d_psi1 @ plant.d_g1 + spec.d_psi2
    c_e2 = np.hstack([plant.c_g2, np.zeros((plant.c_g2.shape[0], n_psi))])
    return ExtendedSystem(a_e, b_e1, b_e2, c_e1, d_e1, c_e2, n_psi, spec.n_r)
