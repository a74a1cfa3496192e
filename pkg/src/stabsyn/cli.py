"""Command-line interface: train, eval, verify, list-envs, export-cert.

Exit codes: 0 success, 1 usage error, 2 initialization or projection
failure, 3 verification failure (no certificate found).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, lmi, plants, rnnctl, trainer

EXIT_OK, EXIT_USAGE, EXIT_FAILURE, EXIT_UNVERIFIED = 0, 1, 2, 3
ENVELOPE_TOL = 1e-6

log = logging.getLogger("stabsyn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad input; the contract reserves 2 for solver failures
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _f(v: float) -> str:
    return f"{float(v):.17g}"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def _manifest(out: Path, command: str, resolved: dict) -> None:
    _write_json(out / "manifest.json", {"command": command, "version": __version__, "resolved": resolved})


def _make_env(name: str, seed: int) -> plants.Environment:
    try:
        return plants.make_env(name, seed=seed)
    except plants.UnknownEnvironment as exc:
        raise UsageError(str(exc)) from exc


def _load_controller(spec: str, env: plants.Environment):
    """Parameters from a JSON file, or the zero controller for ``zero``.

    Returns ``(theta_t, log_std or None)``.
    """
    if spec == "zero":
        theta = rnnctl.TransformedParams.zeros(env.n_xi, env.n_phi, env.n_y, env.n_u)
        return theta, None
    try:
        with open(spec) as fh:
            d = json.load(fh)
        theta = rnnctl.params_from_dict(d)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read parameters from {spec}: {exc}") from exc
    if isinstance(theta, rnnctl.RnnParams):
        theta = rnnctl.loop_transform(theta)
    if theta.n_y != env.n_y or theta.n_u != env.n_u:
        raise UsageError(f"parameters are for n_y={theta.n_y}, n_u={theta.n_u}; {env.name} has n_y={env.n_y}, n_u={env.n_u}")
    log_std = d.get("log_std")
    return theta, (np.asarray(log_std, float) if log_std is not None else None)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    for key in ("env", "seed", "mode", "epochs"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    try:
        config = trainer.TrainConfig.from_dict(cfg)
    except (trainer.ContractError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    env = _make_env(config.env, config.seed)
    out = Path(args.out or f"runs/{config.env}-{config.mode}-seed{config.seed}")
    _manifest(out, "train", config.resolved(env).to_dict())

    def progress(rec):
        print(f"epoch {rec.epoch:4d}  reward {rec.mean_reward:12.6g}  violations {rec.violations}", flush=True)

    try:
        run = trainer.train(config, out_dir=out, progress=None if args.quiet else progress)
    except lmi.InitializationFailure as exc:
        print(f"initialization failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except trainer.ProjectionFailure as exc:
        print(f"projection failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (lmi.ContractError, rnnctl.ContractError, trainer.ContractError) as exc:
        # inconsistent sizes in the configuration
        raise UsageError(str(exc)) from exc
    print(f"run written to {out} ({len(run.records)} epochs, {len(run.certificates)} certificates, {run.wall_clock:.1f}s)")
    return EXIT_OK


def _envelope_rollouts(env, theta, rho, n, seed, horizon=None) -> float:
    x0 = env.sample_init(np.random.default_rng(np.random.SeedSequence([seed, 7919])), n)
    return trainer.envelope_ratio(env, theta, rho, x0, horizon)


def cmd_verify(args) -> int:
    env = _make_env(args.env, args.seed)
    theta, _ = _load_controller(args.params, env)
    rho = env.rho if args.rho is None else args.rho
    if not rho > 0:
        raise UsageError("--rho must be positive")
    out = Path(args.out)
    _manifest(out, "verify", {"params": args.params, "env": env.name, "rho": rho, "rollouts": args.rollouts, "seed": args.seed})
    system, spec = trainer.controller_system(env)
    if spec is not None:
        spec = trainer.pendulum_iqc(env, rho)
    result = lmi.verify_controller(theta, system, rho, iqc=spec)
    if isinstance(result, lmi.InfeasibleReport):
        _write_json(out / "verify.json", {"certified": False, **result.to_dict()})
        print(f"no certificate found at rho={rho:g}: {result.reason}")
        return EXIT_UNVERIFIED
    cert = result
    cert.save(out / "certificate.json")
    slack = lmi.certificate_slack(cert, theta, system, spec)
    ratio = _envelope_rollouts(env, theta, rho, args.rollouts, args.seed)
    envelope_ok = ratio <= cert.envelope * (1 + ENVELOPE_TOL)
    summary = {
        "certified": True,
        "rho": rho,
        "cond_P": cert.cond_p,
        "min_eig_residual": -slack,
        "envelope": cert.envelope,
        "max_envelope_ratio": ratio,
        "envelope_ok": bool(envelope_ok),
    }
    _write_json(out / "verify.json", summary)
    print(f"rho {rho:g}  cond(P) {cert.cond_p:.6g}  min-eig residual {-slack:.3e}")
    print(f"envelope sqrt(cond P) {cert.envelope:.6g}  worst rollout ratio {ratio:.6g}")
    if not envelope_ok:
        print("rollout envelope check failed")
        return EXIT_UNVERIFIED
    return EXIT_OK


TRAJ_HEADER_FIXED = ("episode", "k")


def cmd_eval(args) -> int:
    env = _make_env(args.env, args.seed)
    theta, log_std = _load_controller(args.params, env)
    if args.episodes < 0:
        raise UsageError("--episodes must be non-negative")
    out = Path(args.out)
    _manifest(
        out,
        "eval",
        {"params": args.params, "env": env.name, "episodes": args.episodes, "deterministic": args.deterministic, "seed": args.seed},
    )
    header = list(TRAJ_HEADER_FIXED) + [f"x{i}" for i in range(env.n_x)] + [f"u{i}" for i in range(env.n_u)] + ["r"]
    n = args.episodes
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 104729]))
    if n:
        x0 = env.sample_init(rng, n)
        noise = None if args.deterministic else rng.standard_normal((n, env.horizon_cap, env.n_u))
        ls = np.full(env.n_u, math.log(0.1)) if log_std is None else log_std
        batch = plants.simulate(env, trainer.StochasticPolicy(theta, ls, noise), x0)
    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for b in range(n):
            for k in range(int(batch.length[b])):
                w.writerow([b, k, *map(_f, batch.x[b, k]), *map(_f, batch.u[b, k]), _f(batch.r[b, k])])
    returns = batch.r.sum(axis=1) if n else np.zeros(0)
    ratio = math.nan
    if n:
        norms = np.linalg.norm(batch.x, axis=2)
        k = np.arange(norms.shape[1])
        valid = k[None, :] <= batch.length[:, None]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            r = norms / (norms[:, :1] * env.rho**k)
        r = np.where(valid & np.isfinite(r), r, 0.0)
        ratio = float(r.max())
    failed = batch.violated | batch.diverged if n else np.zeros(0, bool)
    summary = {
        "episodes": n,
        "mean_reward": float(returns.mean()) if n else math.nan,
        "diverged_count": int(failed.sum()),
        "max_envelope_ratio": ratio,
        "rho": env.rho,
    }
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_list_envs(args) -> int:
    print(f"{'name':20s} {'n_x':>4s} {'n_u':>4s} {'n_y':>4s} {'rho':>6s}  model")
    for name in plants.ENV_NAMES:
        env = plants.make_env(name)
        kind = "uncertain" if env.uncertain else "linear"
        print(f"{name:20s} {env.n_x:4d} {env.n_u:4d} {env.n_y:4d} {env.rho:6g}  {kind}")
    return EXIT_OK


def cmd_export_cert(args) -> int:
    run = Path(args.run)
    certs = run / "certs"
    if not certs.is_dir():
        raise UsageError(f"{run} has no certs/ directory")
    if args.epoch is None:
        epochs = sorted(int(p.stem.split("_")[1]) for p in certs.glob("epoch_*.json"))
        if not epochs:
            raise UsageError(f"{certs} is empty")
        epoch = epochs[-1]
    else:
        epoch = args.epoch
    src = certs / f"epoch_{epoch}.json"
    if not src.exists():
        raise UsageError(f"no certificate for epoch {epoch}")
    cert = lmi.Certificate.load(src)
    dest = Path(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    cert.save(dest)
    print(f"epoch {epoch}: rho {cert.rho:g}, cond(P) {cert.cond_p:.6g} -> {dest}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stabsyn", description="Projected policy gradient with LMI stability certificates")
    p.add_argument("--version", action="version", version=f"stabsyn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a controller")
    t.add_argument("--env")
    t.add_argument("--config", help="JSON file with training configuration fields")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=trainer.MODES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="run directory")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a controller")
    e.add_argument("--params", required=True, help="parameter JSON, or 'zero'")
    e.add_argument("--env", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--deterministic", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="eval-out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="search a stability certificate for a controller")
    v.add_argument("--params", required=True, help="parameter JSON, or 'zero'")
    v.add_argument("--env", required=True)
    v.add_argument("--rho", type=float)
    v.add_argument("--rollouts", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default="verify-out")
    v.set_defaults(func=cmd_verify)

    sub.add_parser("list-envs", help="list environments").set_defaults(func=cmd_list_envs)

    x = sub.add_parser("export-cert", help="copy a run's certificate to a file")
    x.add_argument("--run", required=True)
    x.add_argument("--epoch", type=int)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_cert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if "STABSYN_THREADS" in os.environ:
            log.info("sampler threads capped at %s", os.environ["STABSYN_THREADS"])
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
