"""Recurrent controller: parameterization, loop transformation, simulation.

The controller is an LTI system in feedback with an elementwise activation

    xi+ = A_K xi + B_K1 w + B_K2 y
    u   = C_K1 xi + D_K1 w + D_K2 y
    v   = C_K2 xi + D_K3 y,          w = phi(v)

Normalizing ``phi`` in sector [alpha, beta] to ``phi_t`` in sector [-1, 1]
gives an equivalent controller whose parameters (the "transformed" set) enter
the closed-loop matrices affinely; that is the form learned and projected.
"""

from __future__ import annotations

import dataclasses
import json
import re
from typing import Optional

import numpy as np

BLOCKS = ("a_k", "b_k1", "b_k2", "c_k1", "d_k1", "d_k2", "c_k2", "d_k3")


class ContractError(ValueError):
    pass


# ---------------------------------------------------------------------------
# activations and sectors


_LEAKY = re.compile(r"^leaky-relu\(([^)]+)\)$")


def parse_activation(tag: str):
    """Return ``(kind, slope)`` for 'tanh', 'relu' or 'leaky-relu(a)'."""
    if tag in ("tanh", "relu"):
        return tag, None
    m = _LEAKY.match(tag)
    if m:
        a = float(m.group(1))
        if not 0.0 < a < 1.0:
            raise ContractError(f"leaky-relu slope must lie in (0, 1), got {a}")
        return "leaky-relu", a
    raise ContractError(f"unknown activation {tag!r}")


def activation_fn(tag: str):
    kind, a = parse_activation(tag)
    if kind == "tanh":
        return np.tanh, lambda v: 1.0 - np.tanh(v) ** 2
    if kind == "relu":
        return (lambda v: np.maximum(v, 0.0)), (lambda v: (v > 0).astype(float))
    return (lambda v: np.where(v > 0, v, a * v)), (lambda v: np.where(v > 0, 1.0, a))


@dataclasses.dataclass(frozen=True)
class SectorBounds:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if alpha.shape != beta.shape:
            raise ContractError("alpha and beta must have equal length")
        if np.any(alpha > beta):
            raise ContractError("sector requires alpha <= beta elementwise")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def n(self) -> int:
        return self.alpha.size

    @property
    def center(self) -> np.ndarray:
        """Diagonal of S_phi = (A_phi + B_phi) / 2."""
        return 0.5 * (self.alpha + self.beta)

    @property
    def half_width(self) -> np.ndarray:
        """Diagonal of (B_phi - A_phi) / 2."""
        return 0.5 * (self.beta - self.alpha)

    def __eq__(self, other):
        return (
            isinstance(other, SectorBounds)
            and np.array_equal(self.alpha, other.alpha)
            and np.array_equal(self.beta, other.beta)
        )


def sector_of(activation: str, n_phi: int = 1) -> SectorBounds:
    kind, a = parse_activation(activation)
    lo = a if kind == "leaky-relu" else 0.0
    return SectorBounds(np.full(n_phi, lo), np.ones(n_phi))


def qc_form(v, w, sectors: SectorBounds, lam) -> np.ndarray:
    """Quadratic form of the sector QC for each row of (v, w); >= 0 in sector."""
    lam = np.asarray(lam, dtype=float)
    al, be = sectors.alpha, sectors.beta
    # [v; w]^T [[-2 A B L, (A+B) L], [(A+B) L, -2 L]] [v; w], all diagonal
    return np.sum(lam * (-2 * al * be * v * v + 2 * (al + be) * v * w - 2 * w * w), axis=-1)


def shifted_activation(v, activation: str, sectors: SectorBounds) -> np.ndarray:
    """phi_t(v) = (2 phi(v) - (alpha + beta) v) / (beta - alpha), in sector [-1, 1].

    Channels with a degenerate sector (alpha == beta) have phi linear and
    contribute nothing through z, so they are set to zero.
    """
    phi, _ = activation_fn(activation)
    width = sectors.beta - sectors.alpha
    safe = np.where(width > 0, width, 1.0)
    z = (2.0 * phi(v) - (sectors.alpha + sectors.beta) * v) / safe
    return np.where(width > 0, z, 0.0)


def shifted_activation_grad(v, activation: str, sectors: SectorBounds) -> np.ndarray:
    _, dphi = activation_fn(activation)
    width = sectors.beta - sectors.alpha
    safe = np.where(width > 0, width, 1.0)
    g = (2.0 * dphi(v) - (sectors.alpha + sectors.beta)) / safe
    return np.where(width > 0, g, 0.0)


# ---------------------------------------------------------------------------
# parameter containers


def _block_shapes(n_xi, n_phi, n_y, n_u):
    return {
        "a_k": (n_xi, n_xi),
        "b_k1": (n_xi, n_phi),
        "b_k2": (n_xi, n_y),
        "c_k1": (n_u, n_xi),
        "d_k1": (n_u, n_phi),
        "d_k2": (n_u, n_y),
        "c_k2": (n_phi, n_xi),
        "d_k3": (n_phi, n_y),
    }


@dataclasses.dataclass(frozen=True, eq=False)
class _Params:
    a_k: np.ndarray
    b_k1: np.ndarray
    b_k2: np.ndarray
    c_k1: np.ndarray
    d_k1: np.ndarray
    d_k2: np.ndarray
    c_k2: np.ndarray
    d_k3: np.ndarray
    activation: str = "tanh"
    sectors: Optional[SectorBounds] = None

    kind = "base"

    def __post_init__(self):
        for name in BLOCKS:
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        parse_activation(self.activation)
        if self.sectors is None:
            object.__setattr__(self, "sectors", sector_of(self.activation, self.n_phi))
        expected = _block_shapes(self.n_xi, self.n_phi, self.n_y, self.n_u)
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ContractError(f"{self.kind}.{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.sectors.n != self.n_phi:
            raise ContractError("sector vector length must equal n_phi")

    @property
    def n_xi(self) -> int:
        return self.a_k.shape[0]

    @property
    def n_phi(self) -> int:
        return self.c_k2.shape[0]

    @property
    def n_y(self) -> int:
        return self.b_k2.shape[1]

    @property
    def n_u(self) -> int:
        return self.c_k1.shape[0]

    @classmethod
    def zeros(cls, n_xi, n_phi, n_y, n_u, activation="tanh", sectors=None):
        shapes = _block_shapes(n_xi, n_phi, n_y, n_u)
        return cls(**{k: np.zeros(s) for k, s in shapes.items()}, activation=activation, sectors=sectors)

    def shapes(self) -> dict:
        return _block_shapes(self.n_xi, self.n_phi, self.n_y, self.n_u)

    def blocks(self) -> dict:
        return {name: getattr(self, name) for name in BLOCKS}

    def replace(self, **blocks):
        return dataclasses.replace(self, **blocks)

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, name).ravel() for name in BLOCKS])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        out, pos = {}, 0
        for name, shape in self.shapes().items():
            size = shape[0] * shape[1]
            out[name] = vec[pos : pos + size].reshape(shape).copy()
            pos += size
        if pos != vec.size:
            raise ContractError(f"flat vector has length {vec.size}, expected {pos}")
        return dataclasses.replace(self, **out)

    @property
    def size(self) -> int:
        return sum(r * c for r, c in self.shapes().values())

    def stacked(self) -> np.ndarray:
        """The 3x3 block matrix of parameters, with its structural zero."""
        zero = np.zeros((self.n_phi, self.n_phi))
        return np.block(
            [
                [self.a_k, self.b_k1, self.b_k2],
                [self.c_k1, self.d_k1, self.d_k2],
                [self.c_k2, zero, self.d_k3],
            ]
        )

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "activation": self.activation}
        out["alpha"] = self.sectors.alpha.tolist()
        out["beta"] = self.sectors.beta.tolist()
        for name in BLOCKS:
            out[name] = getattr(self, name).tolist()
        return out

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.activation == other.activation
            and self.sectors == other.sectors
            and all(np.array_equal(getattr(self, n), getattr(other, n)) for n in BLOCKS)
        )


class RnnParams(_Params):
    """Original parameters (theta)."""

    kind = "original"


class TransformedParams(_Params):
    """Loop-transformed parameters (theta tilde)."""

    kind = "transformed"


def params_from_dict(d: dict):
    cls = {"original": RnnParams, "transformed": TransformedParams}.get(d.get("kind"))
    if cls is None:
        raise ContractError(f"unknown parameter kind {d.get('kind')!r}")
    blocks = {}
    for name in BLOCKS:
        arr = np.asarray(d[name], dtype=float)
        blocks[name] = arr
    sectors = SectorBounds(np.asarray(d["alpha"], float), np.asarray(d["beta"], float))
    return cls(**blocks, activation=d["activation"], sectors=sectors)


def save_params(params, path) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, indent=1)


def load_params(path):
    with open(path) as fh:
        return params_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# loop transformation


def loop_transform(theta: RnnParams) -> TransformedParams:
    s = theta.sectors.center
    return TransformedParams(
        a_k=theta.a_k + (theta.b_k1 * s) @ theta.c_k2,
        b_k1=theta.b_k1.copy(),
        b_k2=theta.b_k2 + (theta.b_k1 * s) @ theta.d_k3,
        c_k1=theta.c_k1 + (theta.d_k1 * s) @ theta.c_k2,
        d_k1=theta.d_k1.copy(),
        d_k2=theta.d_k2 + (theta.d_k1 * s) @ theta.d_k3,
        c_k2=theta.c_k2.copy(),
        d_k3=theta.d_k3.copy(),
        activation=theta.activation,
        sectors=theta.sectors,
    )


def inverse_transform(theta_t: TransformedParams) -> RnnParams:
    s = theta_t.sectors.center
    return RnnParams(
        a_k=theta_t.a_k - (theta_t.b_k1 * s) @ theta_t.c_k2,
        b_k1=theta_t.b_k1.copy(),
        b_k2=theta_t.b_k2 - (theta_t.b_k1 * s) @ theta_t.d_k3,
        c_k1=theta_t.c_k1 - (theta_t.d_k1 * s) @ theta_t.c_k2,
        d_k1=theta_t.d_k1.copy(),
        d_k2=theta_t.d_k2 - (theta_t.d_k1 * s) @ theta_t.d_k3,
        c_k2=theta_t.c_k2.copy(),
        d_k3=theta_t.d_k3.copy(),
        activation=theta_t.activation,
        sectors=theta_t.sectors,
    )


# ---------------------------------------------------------------------------
# simulation


class NonFiniteActivation(FloatingPointError):
    pass


def controller_step(params, xi, y):
    """Advance the controller one step on a batch (rows of ``xi`` and ``y``).

    Returns ``(xi_next, u, v, w)`` for original parameters and
    ``(xi_next, u, v, z)`` for transformed ones.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    v = xi @ params.c_k2.T + y @ params.d_k3.T
    if not np.all(np.isfinite(v)):
        raise NonFiniteActivation("non-finite activation input")
    if isinstance(params, TransformedParams):
        z = shifted_activation(v, params.activation, params.sectors)
        wz = z * params.sectors.half_width
        xi_next = xi @ params.a_k.T + wz @ params.b_k1.T + y @ params.b_k2.T
        u = xi @ params.c_k1.T + wz @ params.d_k1.T + y @ params.d_k2.T
        return xi_next, u, v, z
    phi, _ = activation_fn(params.activation)
    w = phi(v)
    xi_next = xi @ params.a_k.T + w @ params.b_k1.T + y @ params.b_k2.T
    u = xi @ params.c_k1.T + w @ params.d_k1.T + y @ params.d_k2.T
    return xi_next, u, v, w


def simulate_controller(params, y_trace):
    """Run the controller from xi(0) = 0 over an output trace (T, n_y)."""
    y_trace = np.atleast_2d(np.asarray(y_trace, dtype=float))
    xi = np.zeros((1, params.n_xi))
    us, xis = [], []
    for y in y_trace:
        xis.append(xi[0].copy())
        xi, u, _, _ = controller_step(params, xi, y[None, :])
        us.append(u[0])
    return np.array(us), np.array(xis)


class DeterministicPolicy:
    """Batch policy adapter (see ``plants.simulate``) for a fixed controller."""

    def __init__(self, params):
        self.params = params

    def start(self, batch):
        return np.zeros((batch, self.params.n_xi))

    def act(self, xi, y):
        xi_next, u, _, _ = controller_step(self.params, xi, y)
        return xi_next, u


# ---------------------------------------------------------------------------
# closed loop


@dataclasses.dataclass(frozen=True)
class ClosedLoop:
    """Closed-loop matrices. Nominal: (a, b, c, d). Robust adds the q/r channels."""

    a: np.ndarray
    b: np.ndarray  # input from z (B, or B_2 in the robust case)
    c: np.ndarray  # output v (C, or C_1)
    d: np.ndarray  # D (or D_2)
    b_q: Optional[np.ndarray] = None  # B_1
    d_vq: Optional[np.ndarray] = None  # D_1
    c_r: Optional[np.ndarray] = None  # C_2
    d_rq: Optional[np.ndarray] = None  # D_3
    d_rz: Optional[np.ndarray] = None  # D_4

    @property
    def n_zeta(self) -> int:
        return self.a.shape[0]

    @property
    def robust(self) -> bool:
        return self.b_q is not None


def _check_dims(theta_t, n_y, n_u):
    if theta_t.n_y != n_y or theta_t.n_u != n_u:
        raise ContractError(
            f"controller expects n_y={theta_t.n_y}, n_u={theta_t.n_u}; plant has n_y={n_y}, n_u={n_u}"
        )


def assemble_closed_loop(theta_t: TransformedParams, plant) -> ClosedLoop:
    ag, bg, cg = plant.a_g, plant.b_g, plant.c_g
    _check_dims(theta_t, cg.shape[0], bg.shape[1])
    hw = theta_t.sectors.half_width
    a = np.block(
        [
            [ag + bg @ theta_t.d_k2 @ cg, bg @ theta_t.c_k1],
            [theta_t.b_k2 @ cg, theta_t.a_k],
        ]
    )
    b = np.vstack([bg @ theta_t.d_k1 * hw, theta_t.b_k1 * hw])
    c = np.hstack([theta_t.d_k3 @ cg, theta_t.c_k2])
    d = np.zeros((theta_t.n_phi, theta_t.n_phi))
    return ClosedLoop(a, b, c, d)


def assemble_closed_loop_robust(theta_t: TransformedParams, ext) -> ClosedLoop:
    ae, be1, be2, ce1, de1, ce2 = ext.a_e, ext.b_e1, ext.b_e2, ext.c_e1, ext.d_e1, ext.c_e2
    _check_dims(theta_t, ce2.shape[0], be2.shape[1])
    hw = theta_t.sectors.half_width
    n_xi, n_phi = theta_t.n_xi, theta_t.n_phi
    n_q, n_r = be1.shape[1], ce1.shape[0]
    a = np.block(
        [
            [ae + be2 @ theta_t.d_k2 @ ce2, be2 @ theta_t.c_k1],
            [theta_t.b_k2 @ ce2, theta_t.a_k],
        ]
    )
    b_q = np.vstack([be1, np.zeros((n_xi, n_q))])
    b_z = np.vstack([be2 @ theta_t.d_k1 * hw, theta_t.b_k1 * hw])
    c_v = np.hstack([theta_t.d_k3 @ ce2, theta_t.c_k2])
    c_r = np.hstack([ce1, np.zeros((n_r, n_xi))])
    return ClosedLoop(
        a=a,
        b=b_z,
        c=c_v,
        d=np.zeros((n_phi, n_phi)),
        b_q=b_q,
        d_vq=np.zeros((n_phi, n_q)),
        c_r=c_r,
        d_rq=de1.copy(),
        d_rz=np.zeros((n_r, n_phi)),
    )
