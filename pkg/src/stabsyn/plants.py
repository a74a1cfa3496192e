"""Plant models and the benchmark environments.

Two plant flavours exist: a nominal LTI plant ``x+ = A x + B u, y = C x``
and an uncertain plant with an extra channel ``q = Delta(p)``. The six
registered environments wrap a plant with a reward, observation limits,
an output normalizer, a horizon cap and an initial-state distribution.

Simulation is vectorized over a leading batch axis so the trainer can run a
wave of episodes at once; ``rollout`` is the single-episode convenience.
"""

from __future__ import annotations

import dataclasses
import json
import math
from importlib import resources
from typing import Callable, Optional, Protocol

import numpy as np
import scipy.linalg as sla

from . import matkit

GRAVITY = 9.81
# sector [0, PENDULUM_SECTOR] of x - sin(x) on |x| <= 1.4 (the chord slope there is about 0.30)
PENDULUM_SECTOR = 0.41

ENV_NAMES = (
    "pendulum-linear",
    "pendulum-nonlinear",
    "cartpole",
    "pendubot",
    "vehicle",
    "power39",
)

HORIZON, LIMIT = "horizon", "limit-violation"


class ContractError(ValueError):
    pass


class UnknownEnvironment(ContractError):
    pass


class UnsupportedModel(NotImplementedError):
    pass


def _as2d(m, rows=None, cols=None) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(rows if rows is not None else -1, cols if cols is not None else 1)
    return m


@dataclasses.dataclass(frozen=True)
class PlantLti:
    a_g: np.ndarray
    b_g: np.ndarray
    c_g: np.ndarray

    def __post_init__(self):
        a = _as2d(self.a_g)
        b = _as2d(self.b_g, rows=a.shape[0])
        c = _as2d(self.c_g, cols=a.shape[0])
        object.__setattr__(self, "a_g", a)
        object.__setattr__(self, "b_g", b)
        object.__setattr__(self, "c_g", c)
        n = a.shape[0]
        if a.shape != (n, n) or b.shape[0] != n or c.shape[1] != n:
            raise ContractError(f"inconsistent plant shapes A{a.shape} B{b.shape} C{c.shape}")

    @property
    def n_x(self) -> int:
        return self.a_g.shape[0]

    @property
    def n_u(self) -> int:
        return self.b_g.shape[1]

    @property
    def n_y(self) -> int:
        return self.c_g.shape[0]

    def check_assumptions(self) -> None:
        """Stabilizability of (A, B) and detectability of (A, C), via DARE gains."""
        _check_stab_detect(self.a_g, self.b_g, self.c_g)

    def with_output_scale(self, scale) -> "PlantLti":
        """Plant as seen by a controller receiving ``y / scale``."""
        scale = np.asarray(scale, dtype=float).reshape(-1)
        return PlantLti(self.a_g, self.b_g, self.c_g / scale[:, None])


@dataclasses.dataclass(frozen=True)
class UncertainPlant:
    a_g: np.ndarray
    b_g1: np.ndarray
    b_g2: np.ndarray
    c_g1: np.ndarray
    d_g1: np.ndarray
    c_g2: np.ndarray
    delta: Callable[[np.ndarray], np.ndarray]
    memoryless: bool = True

    def __post_init__(self):
        a = _as2d(self.a_g)
        n = a.shape[0]
        b1 = _as2d(self.b_g1, rows=n)
        b2 = _as2d(self.b_g2, rows=n)
        c1 = _as2d(self.c_g1, cols=n)
        c2 = _as2d(self.c_g2, cols=n)
        d1 = _as2d(self.d_g1, rows=c1.shape[0], cols=b1.shape[1])
        for name, val in (("a_g", a), ("b_g1", b1), ("b_g2", b2), ("c_g1", c1), ("d_g1", d1), ("c_g2", c2)):
            object.__setattr__(self, name, val)
        if a.shape != (n, n) or d1.shape != (c1.shape[0], b1.shape[1]):
            raise ContractError("inconsistent uncertain-plant block shapes")

    @property
    def n_x(self) -> int:
        return self.a_g.shape[0]

    @property
    def n_u(self) -> int:
        return self.b_g2.shape[1]

    @property
    def n_y(self) -> int:
        return self.c_g2.shape[0]

    @property
    def n_p(self) -> int:
        return self.c_g1.shape[0]

    @property
    def n_q(self) -> int:
        return self.b_g1.shape[1]

    def nominal(self) -> PlantLti:
        """The plant with Delta removed (q = 0)."""
        return PlantLti(self.a_g, self.b_g2, self.c_g2)

    def check_assumptions(self) -> None:
        _check_stab_detect(self.a_g, self.b_g2, self.c_g2)

    def with_output_scale(self, scale) -> "UncertainPlant":
        scale = np.asarray(scale, dtype=float).reshape(-1)
        return dataclasses.replace(self, c_g2=self.c_g2 / scale[:, None])


def _check_stab_detect(a, b, c) -> None:
    n = a.shape[0]
    try:
        matkit.dare_gain(a, b, np.eye(n), np.eye(b.shape[1]))
    except matkit.SolverFailure as exc:
        raise ContractError(f"(A, B) not stabilizable: {exc}") from exc
    try:
        matkit.dare_gain(a.T, c.T, np.eye(n), np.eye(c.shape[0]))
    except matkit.SolverFailure as exc:
        raise ContractError(f"(A, C) not detectable: {exc}") from exc


def step_lti(plant: PlantLti, x, u):
    """One step of the nominal plant; y is read from the pre-step state."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != plant.n_x or u.shape[-1] != plant.n_u:
        raise ContractError(f"state/control sizes {x.shape}/{u.shape} do not match plant")
    y = x @ plant.c_g.T
    x_next = x @ plant.a_g.T + u @ plant.b_g.T
    return x_next, y


def step_uncertain(plant: UncertainPlant, x, u, p_history=None):
    """One step of the uncertain plant. Returns ``(x_next, y, p, q)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != plant.n_x or u.shape[-1] != plant.n_u:
        raise ContractError(f"state/control sizes {x.shape}/{u.shape} do not match plant")
    if np.any(plant.d_g1 != 0.0):
        raise UnsupportedModel("algebraic loop: D_G1 != 0 needs an implicit Delta solve")
    p = x @ plant.c_g1.T
    if plant.memoryless:
        q = np.asarray(plant.delta(p), dtype=float)
    else:
        hist = [] if p_history is None else list(p_history)
        q = np.asarray(plant.delta(hist + [p]), dtype=float)
    y = x @ plant.c_g2.T
    x_next = x @ plant.a_g.T + q @ plant.b_g1.T + u @ plant.b_g2.T
    return x_next, y, p, q


# ---------------------------------------------------------------------------
# environments


@dataclasses.dataclass(frozen=True)
class Environment:
    name: str
    plant: object  # PlantLti | UncertainPlant
    reward: Callable[[np.ndarray, np.ndarray], np.ndarray]
    obs_low: np.ndarray
    obs_high: np.ndarray
    obs_normalizer: np.ndarray
    init_low: np.ndarray
    init_high: np.ndarray
    horizon_cap: int = 200
    rho: float = 1.0
    n_xi: int = 16
    n_phi: int = 16
    seed: int = 0
    sector_region: Optional[tuple] = None

    @property
    def uncertain(self) -> bool:
        return isinstance(self.plant, UncertainPlant)

    @property
    def n_x(self) -> int:
        return self.plant.n_x

    @property
    def n_u(self) -> int:
        return self.plant.n_u

    @property
    def n_y(self) -> int:
        return self.plant.n_y

    def output(self, x) -> np.ndarray:
        c = self.plant.c_g2 if self.uncertain else self.plant.c_g
        return np.asarray(x) @ c.T

    def step(self, x, u) -> np.ndarray:
        if self.uncertain:
            return step_uncertain(self.plant, x, u)[0]
        return step_lti(self.plant, x, u)[0]

    def in_limits(self, y) -> np.ndarray:
        y = np.asarray(y)
        return np.all((y >= self.obs_low) & (y <= self.obs_high), axis=-1)

    def normalize(self, y) -> np.ndarray:
        return np.asarray(y) / self.obs_normalizer

    def controller_plant(self):
        """Plant with the output normalizer folded into its output matrix."""
        return self.plant.with_output_scale(self.obs_normalizer)

    def sample_init(self, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
        size = (self.n_x,) if n is None else (n, self.n_x)
        return rng.uniform(self.init_low, self.init_high, size=size)


class BatchPolicy(Protocol):
    def start(self, batch: int):
        ...

    def act(self, state, y_normalized: np.ndarray):
        """Return ``(new_state, u)`` for a batch of normalized outputs."""
        ...


@dataclasses.dataclass
class BatchRollout:
    """Padded episode batch. ``mask[b, k]`` marks rewarded steps."""

    x: np.ndarray  # (B, T+1, n_x)
    y: np.ndarray  # (B, T, n_y), raw outputs
    u: np.ndarray  # (B, T, n_u)
    r: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T) bool
    length: np.ndarray  # (B,)
    violated: np.ndarray  # (B,) bool
    diverged: np.ndarray  # (B,) bool


@dataclasses.dataclass
class Trajectory:
    states: np.ndarray
    outputs: np.ndarray
    controls: np.ndarray
    rewards: np.ndarray
    termination: str
    diverged: bool = False

    def __len__(self) -> int:
        return len(self.rewards)


def simulate(env: Environment, policy: BatchPolicy, x0: np.ndarray, horizon: Optional[int] = None) -> BatchRollout:
    """Run a batch of episodes from initial states ``x0`` (shape (B, n_x)).

    A step k is rewarded only if y(k) is inside the observation limits; the
    first out-of-limit output ends the episode without a reward for that
    step. Non-finite states end the episode and set the divergence flag.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    bsz = x0.shape[0]
    horizon = env.horizon_cap if horizon is None else horizon
    xs = np.zeros((bsz, horizon + 1, env.n_x))
    ys = np.zeros((bsz, horizon, env.n_y))
    us = np.zeros((bsz, horizon, env.n_u))
    rs = np.zeros((bsz, horizon))
    mask = np.zeros((bsz, horizon), dtype=bool)
    alive = np.ones(bsz, dtype=bool)
    violated = np.zeros(bsz, dtype=bool)
    diverged = np.zeros(bsz, dtype=bool)
    length = np.zeros(bsz, dtype=int)
    x = x0.copy()
    xs[:, 0] = x
    state = policy.start(bsz)
    for k in range(horizon):
        finite = np.all(np.isfinite(x), axis=1)
        newly_div = alive & ~finite
        diverged |= newly_div
        alive &= finite
        x = np.where(finite[:, None], x, 0.0)
        y = env.output(x)
        ok = env.in_limits(y)
        violated |= alive & ~ok
        alive &= ok
        if not alive.any():
            break
        state, u = policy.act(state, env.normalize(y))
        u = np.asarray(u, dtype=float).reshape(bsz, env.n_u)
        with np.errstate(over="ignore", invalid="ignore"):
            r = env.reward(x, u)
            x_next = env.step(x, u)
        ys[:, k] = y
        us[:, k] = u
        rs[:, k] = np.where(alive, r, 0.0)
        mask[:, k] = alive
        length += alive
        x = np.where(alive[:, None], x_next, x)
        xs[:, k + 1] = x
    return BatchRollout(xs, ys, us, rs, mask, length, violated, diverged)


def rollout(env: Environment, policy: BatchPolicy, rng: np.random.Generator, x0=None) -> Trajectory:
    """Single episode; the controller hidden state starts at zero."""
    if x0 is None:
        x0 = env.sample_init(rng)
    batch = simulate(env, policy, np.asarray(x0, dtype=float)[None, :])
    n = int(batch.length[0])
    term = LIMIT if batch.violated[0] else HORIZON
    if batch.diverged[0]:
        term = LIMIT
    return Trajectory(
        states=batch.x[0, : n + 1].copy(),
        outputs=batch.y[0, :n].copy(),
        controls=batch.u[0, :n].copy(),
        rewards=batch.r[0, :n].copy(),
        termination=term,
        diverged=bool(batch.diverged[0]),
    )


class ZeroPolicy:
    """Always outputs u = 0."""

    def __init__(self, n_u: int):
        self.n_u = n_u

    def start(self, batch):
        return batch

    def act(self, state, y):
        return state, np.zeros((state, self.n_u))


# ---------------------------------------------------------------------------
# registry


def _pendulum_matrices():
    m, l, mu, dt = 0.15, 0.5, 0.5, 0.02
    a = np.array([[1.0, dt], [GRAVITY * dt / l, 1.0 - mu * dt / (m * l * l)]])
    b = np.array([[0.0], [dt / (m * l * l)]])
    c = np.array([[1.0, 0.0]])
    b_q = np.array([[0.0], [-GRAVITY * dt / l]])
    return a, b, c, b_q


def _pendulum_reward(x, u):
    return 1.0 - 100.0 * x[:, 0] ** 2 - 10.0 * x[:, 1] ** 2 + 100.0 * u[:, 0] ** 2


def _cartpole_reward(x, u):
    return 5.0 - x[:, 0] ** 2 - x[:, 1] ** 2 - 0.04 * x[:, 2] ** 2 - 0.1 * x[:, 3] ** 2 - 0.2 * u[:, 0] ** 2


def _pendubot_reward(x, u):
    return 5.0 - x[:, 0] ** 2 - 0.05 * x[:, 1] ** 2 - x[:, 2] ** 2 - 0.05 * x[:, 3] ** 2 - 0.2 * u[:, 0] ** 2


def _vehicle_reward(x, u):
    return (
        5.0
        - 0.01 * x[:, 0] ** 2
        - 0.04 * x[:, 1] ** 2
        - x[:, 2] ** 2
        - 0.04 * x[:, 3] ** 2
        - (72.0 / math.pi**2) * u[:, 0] ** 2
    )


def _power_reward(x, u):
    return 5.0 - np.sum(x**2, axis=1) - 0.2 * np.sum(u**2, axis=1)


def pendulum_delta(p):
    return p - np.sin(p)


# Vehicle parameters (mass, yaw inertia, axle distances, cornering stiffness,
# speed). Stiffness is negative in this sign convention so the lateral
# velocity mode is damped.
VEHICLE_PARAMS = dict(m=1573.0, iz=2873.0, a=1.1, b=1.58, c_af=-80000.0, c_ar=-80000.0, speed=30.0)


def vehicle_continuous(params=VEHICLE_PARAMS):
    m, iz, a, b = params["m"], params["iz"], params["a"], params["b"]
    cf, cr, v = params["c_af"], params["c_ar"], params["speed"]
    ac = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [0.0, (cf + cr) / (m * v), -(cf + cr) / m, (a * cf - b * cr) / (m * v)],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, (a * cf - b * cr) / (iz * v), -(a * cf - b * cr) / iz, (a * a * cf + b * b * cr) / (iz * v)],
        ]
    )
    bc = np.array([[0.0], [-cf / m], [0.0], [-a * cf / iz]])
    return ac, bc


def zoh(ac, bc, dt):
    n, m = bc.shape
    blk = np.zeros((n + m, n + m))
    blk[:n, :n] = ac
    blk[:n, n:] = bc
    e = sla.expm(blk * dt)
    return e[:n, :n], e[:n, n:]


def load_power_data(path=None) -> dict:
    if path is None:
        text = resources.files("stabsyn").joinpath("data/power39.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    raw = json.loads(text)
    data = {k: np.asarray(raw[k], dtype=float) for k in ("Mp", "D", "L")}
    lap = data["L"]
    if not np.allclose(lap, lap.T):
        raise ContractError("power data: L is not symmetric")
    w = np.linalg.eigvalsh(lap)
    if w[0] < -1e-9 or np.sum(np.abs(w) < 1e-9) != 1:
        raise ContractError("power data: L must be PSD with exactly one zero eigenvalue")
    return data


def power_matrices(data: dict, dt: float = 0.2):
    mp, d, lap = data["Mp"], data["D"], data["L"]
    n = mp.shape[0]
    minv = np.linalg.inv(mp)
    a = np.block([[np.eye(n), dt * np.eye(n)], [-dt * minv @ lap, np.eye(n) - dt * minv @ d]])
    b = np.vstack([np.zeros((n, n)), dt * minv])
    c = np.hstack([np.eye(n), np.zeros((n, n))])
    return a, b, c


def _box_env(name, plant, reward, obs_idx, limits, n_x, rho, n_hidden, seed, vel=None, sector_region=None, horizon=200):
    """Build an environment whose observed coordinates are ``obs_idx``."""
    low = np.array([lo for lo, _ in limits], dtype=float)
    high = np.array([hi for _, hi in limits], dtype=float)
    norm = np.maximum(np.abs(low), np.abs(high))
    init_low = np.zeros(n_x)
    init_high = np.zeros(n_x)
    for i, lo, hi in zip(obs_idx, low, high):
        mid, half = 0.5 * (lo + hi), 0.25 * (hi - lo)
        init_low[i], init_high[i] = mid - half, mid + half
    if vel is not None:
        idx, bound = vel
        init_low[idx], init_high[idx] = -bound, bound
    return Environment(
        name=name,
        plant=plant,
        reward=reward,
        obs_low=low,
        obs_high=high,
        obs_normalizer=norm,
        init_low=init_low,
        init_high=init_high,
        horizon_cap=horizon,
        rho=rho,
        n_xi=n_hidden,
        n_phi=n_hidden,
        seed=seed,
        sector_region=sector_region,
    )


def make_env(name: str, seed: int = 0, power_data_path=None) -> Environment:
    if name == "pendulum-linear":
        a, b, c, _ = _pendulum_matrices()
        plant = PlantLti(a, b, c)
        plant.check_assumptions()
        return _box_env(name, plant, _pendulum_reward, [0], [(-0.15, 0.15)], 2, 1.0, 16, seed, vel=(1, 0.05))
    if name == "pendulum-nonlinear":
        a, b, c, b_q = _pendulum_matrices()
        plant = UncertainPlant(a, b_q, b, np.array([[1.0, 0.0]]), np.zeros((1, 1)), c, pendulum_delta)
        plant.check_assumptions()
        return _box_env(
            name, plant, _pendulum_reward, [0], [(-0.15, 0.15)], 2, 1.0, 16, seed, vel=(1, 0.05), sector_region=(-1.4, 1.4)
        )
    if name == "cartpole":
        a = np.array(
            [[1, -0.001, 0.02, 0], [0, 1.005, 0, 0.02], [0, -0.079, 1, -0.001], [0, 0.55, 0, 1.005]], dtype=float
        )
        b = np.array([[0.0], [0.0], [0.04], [-0.04]])
        c = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
        plant = PlantLti(a, b, c)
        plant.check_assumptions()
        return _box_env(name, plant, _cartpole_reward, [0, 1], [(-1, 1), (-math.pi / 2, math.pi / 2)], 4, 0.98, 16, seed)
    if name == "pendubot":
        a = np.array(
            [[1, 0.01, 0, 0], [0.6738, 1, -0.2483, 0], [0, 0, 1, 0.01], [-0.6953, 0, 1.0532, 1]], dtype=float
        )
        b = np.array([[0.0], [0.4487], [0.0], [-0.8509]])
        c = np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]])
        plant = PlantLti(a, b, c)
        plant.check_assumptions()
        return _box_env(name, plant, _pendubot_reward, [0, 2], [(-1, 1), (-1, 1)], 4, 0.98, 16, seed)
    if name == "vehicle":
        ac, bc = vehicle_continuous()
        a, b = zoh(ac, bc, 0.02)
        c = np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]])
        plant = PlantLti(a, b, c)
        plant.check_assumptions()
        return _box_env(name, plant, _vehicle_reward, [0, 2], [(-10, 10), (-1, 1)], 4, 0.98, 16, seed)
    if name == "power39":
        data = load_power_data(power_data_path)
        a, b, c = power_matrices(data)
        plant = PlantLti(a, b, c)
        plant.check_assumptions()
        n = a.shape[0] // 2
        return _box_env(name, plant, _power_reward, list(range(n)), [(-0.5, 0.5)] * n, 2 * n, 0.98, 20, seed)
    raise UnknownEnvironment(f"unknown environment {name!r}; choose from {', '.join(ENV_NAMES)}")
