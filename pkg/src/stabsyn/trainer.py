"""Projected policy gradient for the recurrent controller.

Each epoch samples on-policy episodes, forms the reward-to-go REINFORCE
estimate (gradients back-propagated through the unrolled controller), takes
a clipped Adam step on the transformed parameters and, in projected mode,
projects the result back onto the convexified stability set around the
current certificate.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import conic, iqc, lmi, matkit, plants, rnnctl

log = logging.getLogger(__name__)

MODES = ("projected", "baseline-pg")


class ContractError(ValueError):
    pass


class ProjectionFailure(RuntimeError):
    """The projection was infeasible or returned an uncertified point."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class TrainConfig:
    env: str = "pendulum-linear"
    seed: int = 0
    n_xi: Optional[int] = None  # None: environment default
    n_phi: Optional[int] = None
    rho: Optional[float] = None
    lr: float = 1e-3
    batch_steps: int = 6000
    horizon_cap: int = 200
    epochs: int = 100
    clip: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: str = "projected"
    activation: str = "tanh"
    log_std_init: float = math.log(0.1)
    log_std_bounds: tuple = (math.log(1e-3), math.log(1.0))
    gamma: float = 1.0
    reward_baseline: bool = False
    init: Optional[str] = None  # "certified" | "random" | "zero"; None picks by mode
    init_scale: float = 1.0
    solver_eps_abs: float = 1e-9
    solver_eps_rel: float = 1e-6
    solver_max_iter: int = 50_000
    threads: Optional[int] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.epochs <= 1000:
            raise ContractError("epochs must lie in [0, 1000]")
        if self.batch_steps <= 0 or self.horizon_cap <= 0:
            raise ContractError("batch_steps and horizon_cap must be positive")
        if self.init is None:
            self.init = "certified" if self.mode == "projected" else "random"
        if self.init not in ("certified", "random", "zero"):
            raise ContractError(f"unknown init {self.init!r}")
        if self.mode == "projected" and self.init != "certified":
            raise ContractError("projected mode starts from the certified initial controller")
        self.log_std_bounds = tuple(float(b) for b in self.log_std_bounds)

    def resolved(self, env: plants.Environment) -> "TrainConfig":
        return dataclasses.replace(
            self,
            n_xi=env.n_xi if self.n_xi is None else self.n_xi,
            n_phi=env.n_phi if self.n_phi is None else self.n_phi,
            rho=env.rho if self.rho is None else self.rho,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["log_std_bounds"] = list(self.log_std_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "log_std_bounds" in d:
            d["log_std_bounds"] = tuple(d["log_std_bounds"])
        return cls(**d)


# ---------------------------------------------------------------------------
# policy


class StochasticPolicy:
    """Gaussian exploration around the controller output.

    ``u ~ Normal(mu(theta_t; y history), diag(exp(log_std))^2)``. As a batch
    policy (see ``plants.simulate``) it draws the noise from a pre-sampled
    standard-normal array ``noise`` of shape (B, T, n_u), or acts
    deterministically when ``noise`` is None.
    """

    def __init__(self, theta: rnnctl.TransformedParams, log_std, noise=None):
        self.theta = theta
        self.log_std = np.broadcast_to(np.asarray(log_std, float), (theta.n_u,)).copy()
        self.noise = noise

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def start(self, batch):
        return np.zeros((batch, self.theta.n_xi)), 0

    def act(self, state, y):
        xi, k = state
        xi_next, mu, _, _ = rnnctl.controller_step(self.theta, xi, y)
        if self.noise is not None:
            mu = mu + self.std * self.noise[:, k]
        return (xi_next, k + 1), mu

    def log_prob(self, u, mu) -> np.ndarray:
        e = (np.asarray(u) - mu) / self.std
        return np.sum(-0.5 * e * e - self.log_std - 0.5 * math.log(2 * math.pi), axis=-1)


# ---------------------------------------------------------------------------
# batches and the gradient estimator


@dataclasses.dataclass
class Batch:
    y: np.ndarray  # normalized outputs fed to the controller, (B, T, n_y)
    u: np.ndarray  # applied controls (B, T, n_u)
    r: np.ndarray  # (B, T), zero on masked steps
    mask: np.ndarray  # (B, T) bool
    violated: np.ndarray  # (B,) bool
    diverged: np.ndarray  # (B,) bool

    @property
    def n_steps(self) -> int:
        return int(self.mask.sum())

    @property
    def returns(self) -> np.ndarray:
        return self.r.sum(axis=1)

    @classmethod
    def from_rollout(cls, env: plants.Environment, ro: plants.BatchRollout) -> "Batch":
        m = ro.mask[..., None]
        return cls(env.normalize(ro.y) * m, ro.u * m, ro.r, ro.mask, ro.violated, ro.diverged)

    @classmethod
    def concat(cls, parts) -> "Batch":
        t = max(p.mask.shape[1] for p in parts)

        def pad(a):
            if a.shape[1] == t:
                return a
            widths = [(0, 0), (0, t - a.shape[1])] + [(0, 0)] * (a.ndim - 2)
            return np.pad(a, widths)

        return cls(
            np.concatenate([pad(p.y) for p in parts]),
            np.concatenate([pad(p.u) for p in parts]),
            np.concatenate([pad(p.r) for p in parts]),
            np.concatenate([pad(p.mask) for p in parts]),
            np.concatenate([p.violated for p in parts]),
            np.concatenate([p.diverged for p in parts]),
        )


def reward_to_go(r: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    out = np.zeros_like(r)
    acc = np.zeros(r.shape[0])
    for k in range(r.shape[1] - 1, -1, -1):
        acc = r[:, k] + gamma * acc
        out[:, k] = acc
    return out


def _forward(theta: rnnctl.TransformedParams, y: np.ndarray):
    """Teacher-forced controller pass; returns xi, v, z and mu per step."""
    bsz, t, _ = y.shape
    hw = theta.sectors.half_width
    xi = np.zeros((bsz, theta.n_xi))
    xis = np.zeros((bsz, t, theta.n_xi))
    vs = np.zeros((bsz, t, theta.n_phi))
    zs = np.zeros((bsz, t, theta.n_phi))
    mus = np.zeros((bsz, t, theta.n_u))
    for k in range(t):
        yk = y[:, k]
        xis[:, k] = xi
        v = xi @ theta.c_k2.T + yk @ theta.d_k3.T
        z = rnnctl.shifted_activation(v, theta.activation, theta.sectors)
        wz = z * hw
        vs[:, k] = v
        zs[:, k] = z
        mus[:, k] = xi @ theta.c_k1.T + wz @ theta.d_k1.T + yk @ theta.d_k2.T
        xi = xi @ theta.a_k.T + wz @ theta.b_k1.T + yk @ theta.b_k2.T
    return xis, vs, zs, mus


def _backward(theta: rnnctl.TransformedParams, y, xis, vs, zs, g_mu) -> dict:
    """Back-propagate per-step output sensitivities ``g_mu`` through the unrolled controller."""
    hw = theta.sectors.half_width
    grads = {name: np.zeros_like(getattr(theta, name)) for name in rnnctl.BLOCKS}
    bsz, t, _ = y.shape
    g_next = np.zeros((bsz, theta.n_xi))  # dJ / d xi(k+1)
    for k in range(t - 1, -1, -1):
        xi, yk, gm = xis[:, k], y[:, k], g_mu[:, k]
        wz = zs[:, k] * hw
        grads["c_k1"] += gm.T @ xi
        grads["d_k1"] += gm.T @ wz
        grads["d_k2"] += gm.T @ yk
        grads["a_k"] += g_next.T @ xi
        grads["b_k1"] += g_next.T @ wz
        grads["b_k2"] += g_next.T @ yk
        g_wz = gm @ theta.d_k1 + g_next @ theta.b_k1
        dv = g_wz * hw * rnnctl.shifted_activation_grad(vs[:, k], theta.activation, theta.sectors)
        grads["c_k2"] += dv.T @ xi
        grads["d_k3"] += dv.T @ yk
        g_next = g_next @ theta.a_k + gm @ theta.c_k1 + dv @ theta.c_k2
    return grads


def _weights(batch: Batch, gamma: float, reward_baseline: bool) -> np.ndarray:
    q = reward_to_go(batch.r, gamma)
    if reward_baseline and batch.n_steps:
        q = q - q[batch.mask].mean()
    return np.where(batch.mask, q, 0.0)


def surrogate(theta, log_std, batch: Batch, weights=None, gamma: float = 1.0) -> float:
    """Mean over valid steps of Q_hat * log pi(u | history); its gradient is the estimator."""
    if weights is None:
        weights = _weights(batch, gamma, False)
    _, _, _, mus = _forward(theta, batch.y)
    pol = StochasticPolicy(theta, log_std)
    lp = pol.log_prob(batch.u, mus)
    return float(np.sum(weights * lp * batch.mask) / batch.n_steps)


def estimate_gradient(batch: Batch, policy: StochasticPolicy, gamma: float = 1.0, reward_baseline: bool = False):
    """Reward-to-go REINFORCE estimate of the gradient of the expected return.

    Returns ``(grad_theta, grad_log_std)`` with ``grad_theta`` a
    ``TransformedParams`` holding the per-block gradients.
    """
    n = batch.n_steps
    if n == 0:
        raise ContractError("empty batch")
    theta = policy.theta
    weights = _weights(batch, gamma, reward_baseline)
    xis, vs, zs, mus = _forward(theta, batch.y)
    std = policy.std
    e = (batch.u - mus) / std
    g_mu = (weights[..., None] * e / std) / n
    g_log_std = np.sum(weights[..., None] * (e * e - 1.0), axis=(0, 1)) / n
    grads = _backward(theta, batch.y, xis, vs, zs, g_mu)
    return theta.replace(**grads), g_log_std


# ---------------------------------------------------------------------------
# optimizer


@dataclasses.dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grad, state: AdamState, lr=1e-3, clip=10.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam descent step with per-element gradient clipping to ``|g| <= clip``."""
    params = np.asarray(params, float)
    grad = np.asarray(grad, float)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ContractError(f"shape mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    g = np.clip(grad, -clip, clip)
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# sampling


def _threads(config: TrainConfig) -> int:
    if config.threads is not None:
        return max(1, int(config.threads))
    env_val = os.environ.get("STABSYN_THREADS")
    if env_val:
        try:
            return max(1, int(env_val))
        except ValueError:
            raise ContractError(f"STABSYN_THREADS must be an integer, got {env_val!r}") from None
    return 1


def _episode_draws(env, seed, epoch, first, count, horizon):
    x0 = np.zeros((count, env.n_x))
    noise = np.zeros((count, horizon, env.n_u))
    for j in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, first + j]))
        x0[j] = env.sample_init(rng)
        noise[j] = rng.standard_normal((horizon, env.n_u))
    return x0, noise


def sample_batch(env, theta, log_std, config: TrainConfig, epoch: int, deterministic: bool = False) -> Batch:
    """Episodes in waves until at least ``batch_steps`` valid steps are collected.

    Every episode draws its initial state and noise from its own stream
    ``SeedSequence([seed, epoch, episode])``, so splitting episodes across
    worker threads changes the batch only by floating-point rounding.
    """
    horizon = config.horizon_cap
    threads = _threads(config)
    parts, steps, count = [], 0, 0

    def run(first, size):
        x0, noise = _episode_draws(env, config.seed, epoch, first, size, horizon)
        pol = StochasticPolicy(theta, log_std, None if deterministic else noise)
        ro = plants.simulate(env, pol, x0, horizon)
        return Batch.from_rollout(env, ro)

    while steps < config.batch_steps:
        mean_len = steps / count if count else horizon
        wave = max(1, math.ceil((config.batch_steps - steps) / max(mean_len, 1.0)))
        chunks = []
        per = math.ceil(wave / threads)
        for s in range(0, wave, per):
            chunks.append((count + s, min(per, wave - s)))
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(lambda c: run(*c), chunks))
        else:
            results = [run(*c) for c in chunks]
        for b in results:
            parts.append(b)
            steps += b.n_steps
        count += wave
        if count > 100 * config.batch_steps:  # pragma: no cover - zero-length episodes only
            break
    return Batch.concat(parts)


# ---------------------------------------------------------------------------
# training loop


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    mean_reward: float
    std_reward: float
    violations: int
    diverged: int
    episodes: int
    steps: int
    theta_hash: str
    log_std: list
    residual: float = math.nan
    recursive_ok: Optional[bool] = None
    solve: Optional[dict] = None
    seconds: float = 0.0


@dataclasses.dataclass
class TrainRun:
    config: TrainConfig
    records: list = dataclasses.field(default_factory=list)
    thetas: list = dataclasses.field(default_factory=list)  # theta_t at the start of each epoch, plus the final one
    log_stds: list = dataclasses.field(default_factory=list)
    certificates: list = dataclasses.field(default_factory=list)  # Certificate per accepted iterate
    wall_clock: float = 0.0
    init_info: dict = dataclasses.field(default_factory=dict)

    @property
    def mean_rewards(self) -> np.ndarray:
        return np.array([r.mean_reward for r in self.records])

    @property
    def violations(self) -> np.ndarray:
        return np.array([r.violations for r in self.records], dtype=int)

    @property
    def final_theta(self) -> rnnctl.TransformedParams:
        return self.thetas[-1]


def _env_for(config: TrainConfig, env=None):
    env = plants.make_env(config.env, seed=config.seed) if env is None else env
    if config.horizon_cap != env.horizon_cap:
        env = dataclasses.replace(env, horizon_cap=config.horizon_cap)
    return env


def controller_system(env: plants.Environment):
    """(system, iqc) pair describing the plant as the controller sees it."""
    system = env.controller_plant()
    spec = None
    if env.uncertain:
        spec = pendulum_iqc(env) if env.sector_region is not None else None
        if spec is None:
            raise ContractError(f"environment {env.name} has no IQC description")
    return system, spec


def pendulum_iqc(env: plants.Environment, rho: Optional[float] = None) -> iqc.IqcSpec:
    """Sector IQC for Delta(p) = p - sin(p), valid on the environment's sector region."""
    return iqc.sector_iqc(0.0, plants.PENDULUM_SECTOR, env.rho if rho is None else rho)


def free_rollouts(env: plants.Environment, theta, x0, horizon: Optional[int] = None):
    """Deterministic closed-loop trajectories that ignore the observation limits.

    Returns ``(x, u, inside)`` with shapes (B, T+1, n_x), (B, T, n_u) and
    (B, T+1); ``inside`` flags states whose outputs are within the limits.
    """
    x = np.atleast_2d(np.asarray(x0, float))
    horizon = env.horizon_cap if horizon is None else horizon
    bsz = x.shape[0]
    xs = np.zeros((bsz, horizon + 1, env.n_x))
    us = np.zeros((bsz, horizon, env.n_u))
    xs[:, 0] = x
    xi = np.zeros((bsz, theta.n_xi))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(horizon):
            xi, u, _, _ = rnnctl.controller_step(theta, xi, env.normalize(env.output(x)))
            x = env.step(x, u)
            xs[:, k + 1] = x
            us[:, k] = u
    inside = env.in_limits(env.output(xs))
    return xs, us, inside


def envelope_ratio(env: plants.Environment, theta, rho: float, x0, horizon: Optional[int] = None) -> float:
    """max over rollouts and k of |x(k)| / (rho^k |x(0)|), controller started at rest."""
    xs, _, _ = free_rollouts(env, theta, x0, horizon)
    norms = np.linalg.norm(xs, axis=2)
    k = np.arange(xs.shape[1])
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        ratio = norms / (norms[:, :1] * float(rho) ** k)
    ratio = np.where(np.isfinite(ratio), ratio, np.inf)
    return float(ratio.max())


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1)
    os.replace(tmp, path)


class RunWriter:
    """Run directory: config.json, rewards.csv, certs/epoch_i.json, params/epoch_i.json."""

    HEADER = ("epoch", "mean", "std", "diverged_count")

    def __init__(self, out_dir, config: TrainConfig):
        self.root = Path(out_dir)
        (self.root / "certs").mkdir(parents=True, exist_ok=True)
        (self.root / "params").mkdir(parents=True, exist_ok=True)
        _write_json(self.root / "config.json", config.to_dict())
        with open(self.root / "rewards.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(self.HEADER)

    def reward_row(self, rec: EpochRecord) -> None:
        with open(self.root / "rewards.csv", "a", newline="") as fh:
            csv.writer(fh).writerow(
                [rec.epoch, f"{rec.mean_reward:.17g}", f"{rec.std_reward:.17g}", rec.violations + rec.diverged]
            )

    def params(self, epoch: int, theta, log_std) -> None:
        d = theta.to_dict()
        d["log_std"] = [float(v) for v in log_std]
        _write_json(self.root / "params" / f"epoch_{epoch}.json", d)

    def certificate(self, epoch: int, cert: lmi.Certificate) -> None:
        _write_json(self.root / "certs" / f"epoch_{epoch}.json", cert.to_dict())

    def summary(self, run: TrainRun) -> None:
        _write_json(
            self.root / "run.json",
            {
                "wall_clock": run.wall_clock,
                "init": run.init_info,
                "epochs": [dataclasses.asdict(r) for r in run.records],
            },
        )


def random_params(template: rnnctl.TransformedParams, rng: np.random.Generator, scale: float = 1.0):
    """Gaussian blocks with variance scale^2 / fan_in (fan_in = columns)."""
    blocks = {}
    for name, blk in template.blocks().items():
        fan_in = max(blk.shape[1], 1)
        blocks[name] = rng.standard_normal(blk.shape) * (scale / math.sqrt(fan_in))
    return template.replace(**blocks)


def initial_controller(env, config: TrainConfig, system=None, spec=None):
    """Starting point: the certified observer design, or zeros for baseline runs."""
    if system is None:
        system, spec = controller_system(env)
    if config.init in ("zero", "random"):
        theta = rnnctl.TransformedParams.zeros(config.n_xi, config.n_phi, env.n_y, env.n_u, activation=config.activation)
        if config.init == "random":
            theta = random_params(theta, np.random.default_rng(np.random.SeedSequence([config.seed, 2**31 - 1])), config.init_scale)
        return theta, None
    boot = lmi.initial_certificate(
        system,
        config.n_xi,
        config.n_phi,
        config.rho,
        iqc=spec,
        activation=config.activation,
        eps_abs=config.solver_eps_abs,
        eps_rel=config.solver_eps_rel,
        max_iter=config.solver_max_iter,
    )
    return boot.theta, boot


def train(config: TrainConfig, out_dir=None, env=None, progress=None) -> TrainRun:
    """Projected policy gradient training (or the unprojected baseline when mode is baseline-pg)."""
    t_start = time.perf_counter()
    env = _env_for(config, env)
    config = config.resolved(env)
    system, spec = controller_system(env)
    writer = RunWriter(out_dir, config) if out_dir is not None else None
    run = TrainRun(config)

    try:
        theta, boot = initial_controller(env, config, system, spec)
    except lmi.InitializationFailure:
        raise
    projected = config.mode == "projected"
    log_std = np.full(env.n_u, config.log_std_init)
    prev = inst = None
    warm = None
    if boot is not None:
        prev = boot.solution
        cert = lmi.Certificate.from_solution(prev, boot.instance(), plant=system)
        run.certificates.append(cert)
        run.init_info = {"rounds": boot.rounds, "cond_P": cert.cond_p, "epsilon": boot.epsilon}
        if writer:
            writer.certificate(0, cert)
    run.thetas.append(theta)
    run.log_stds.append(log_std.copy())
    if writer:
        writer.params(0, theta, log_std)

    solver_kw = dict(eps_abs=config.solver_eps_abs, eps_rel=config.solver_eps_rel, max_iter=config.solver_max_iter)
    adam = AdamState.zeros(theta.size + env.n_u)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        batch = sample_batch(env, theta, log_std, config, epoch)
        returns = batch.returns
        policy = StochasticPolicy(theta, log_std)
        g_theta, g_ls = estimate_gradient(batch, policy, config.gamma, config.reward_baseline)
        flat = np.concatenate([theta.flat(), log_std])
        grad = np.concatenate([g_theta.flat(), g_ls])
        # Adam descends, so feed the negative reward gradient
        new_flat, adam = adam_step(flat, -grad, adam, config.lr, config.clip, config.beta1, config.beta2, config.adam_eps)
        theta_prime = theta.with_flat(new_flat[: theta.size])
        log_std = np.clip(new_flat[theta.size :], *config.log_std_bounds)

        rec = EpochRecord(
            epoch=epoch,
            mean_reward=float(returns.mean()),
            std_reward=float(returns.std()),
            violations=int(np.sum(batch.violated & ~batch.diverged)),
            diverged=int(np.sum(batch.diverged)),
            episodes=int(returns.size),
            steps=batch.n_steps,
            theta_hash=lmi.theta_hash(theta),
            log_std=[float(v) for v in log_std],
        )
        if projected:
            inst = (
                boot.instance()
                if epoch == 0
                else lmi.next_instance(inst, prev, eps=boot.epsilon)
            )
            rec.recursive_ok = bool(lmi.recursive_feasibility_check(prev, inst))
            try:
                res = lmi.project(inst, theta_prime, lam_target=prev.lam if prev.lam.size else None, anchor=prev, warm=warm, **solver_kw)
            except conic.InfeasibleSuspected as exc:
                raise ProjectionFailure(f"epoch {epoch}: {exc}", {"report": exc.report.to_dict() if exc.report else None}) from exc
            if not res.feasible:
                raise ProjectionFailure(
                    f"epoch {epoch}: projection returned an uncertified point (residual {res.residual:.3g})",
                    {"report": res.report.to_dict(), "residual": res.residual, "side": res.side},
                )
            warm = res.warm
            prev = res.solution
            theta = res.solution.theta
            rec.residual = res.residual
            rec.solve = res.report.to_dict()
            cert = lmi.Certificate.from_solution(prev, inst, plant=system)
            run.certificates.append(cert)
            if writer:
                writer.certificate(epoch + 1, cert)
        else:
            theta = theta_prime
        rec.seconds = time.perf_counter() - t0
        run.records.append(rec)
        run.thetas.append(theta)
        run.log_stds.append(log_std.copy())
        if writer:
            writer.reward_row(rec)
            writer.params(epoch + 1, theta, log_std)
        if progress is not None:
            progress(rec)
        log.info("epoch %d reward %.4g violations %d", epoch, rec.mean_reward, rec.violations)
    run.wall_clock = time.perf_counter() - t_start
    if writer:
        writer.summary(run)
    return run
