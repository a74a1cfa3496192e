import csv
import json
import math

import numpy as np
import pytest

from stabsyn import lmi, plants, rnnctl, trainer


def random_batch(rng, bsz=3, t=5, n_y=2, n_u=2, ragged=True):
    y = rng.standard_normal((bsz, t, n_y))
    u = rng.standard_normal((bsz, t, n_u))
    r = rng.standard_normal((bsz, t))
    mask = np.ones((bsz, t), bool)
    if ragged:
        mask[0, 3:] = False
    r = np.where(mask, r, 0.0)
    y = y * mask[..., None]
    return trainer.Batch(y, u, r, mask, np.zeros(bsz, bool), np.zeros(bsz, bool))


def random_theta(rng, n_xi=3, n_phi=3, n_y=2, n_u=2, scale=0.5):
    t = rnnctl.TransformedParams.zeros(n_xi, n_phi, n_y, n_u)
    return t.with_flat(scale * rng.standard_normal(t.size))


def test_reward_to_go():
    r = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(trainer.reward_to_go(r), [[6.0, 5.0, 3.0]])
    np.testing.assert_allclose(trainer.reward_to_go(r, 0.5), [[1 + 0.5 * 2 + 0.25 * 3, 2 + 1.5, 3.0]])


def test_zero_rewards_zero_gradient(rng):
    batch = random_batch(rng)
    batch.r[:] = 0.0
    g, g_ls = trainer.estimate_gradient(batch, trainer.StochasticPolicy(random_theta(rng), np.log(0.1)))
    assert not g.flat().any() and not g_ls.any()


def test_single_step_closed_form(rng):
    theta = rnnctl.TransformedParams.zeros(1, 1, 1, 1).replace(d_k2=np.array([[0.7]]))
    s = 0.3
    y = rng.standard_normal((4, 1, 1))
    u = rng.standard_normal((4, 1, 1))
    r = rng.standard_normal((4, 1))
    batch = trainer.Batch(y, u, r, np.ones((4, 1), bool), np.zeros(4, bool), np.zeros(4, bool))
    g, _ = trainer.estimate_gradient(batch, trainer.StochasticPolicy(theta, np.log(s)))
    expected = np.mean(r[:, 0] * (u[:, 0, 0] - 0.7 * y[:, 0, 0]) * y[:, 0, 0] / s**2)
    assert g.d_k2[0, 0] == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("tag", ["tanh", "leaky-relu(0.2)"])
def test_gradient_matches_finite_differences(tag):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        theta = rnnctl.TransformedParams.zeros(3, 3, 2, 2, activation=tag)
        theta = theta.with_flat(0.5 * rng.standard_normal(theta.size))
        log_std = rng.uniform(-1, 0, 2)
        batch = random_batch(rng)
        g, g_ls = trainer.estimate_gradient(batch, trainer.StochasticPolicy(theta, log_std))
        analytic = np.concatenate([g.flat(), g_ls])
        base = np.concatenate([theta.flat(), log_std])
        h = 1e-6
        fd = np.zeros_like(base)
        for i in range(base.size):
            e = np.zeros_like(base)
            e[i] = h
            plus, minus = base + e, base - e
            fp = trainer.surrogate(theta.with_flat(plus[: theta.size]), plus[theta.size :], batch)
            fm = trainer.surrogate(theta.with_flat(minus[: theta.size]), minus[theta.size :], batch)
            fd[i] = (fp - fm) / (2 * h)
        worst = max(worst, np.linalg.norm(analytic - fd) / np.linalg.norm(fd))
    assert worst <= 1e-4


def test_empty_batch_rejected(rng):
    batch = random_batch(rng)
    batch.mask[:] = False
    with pytest.raises(trainer.ContractError):
        trainer.estimate_gradient(batch, trainer.StochasticPolicy(random_theta(rng), 0.0))


def test_log_prob_finite():
    pol = trainer.StochasticPolicy(rnnctl.TransformedParams.zeros(1, 1, 1, 2), np.log(0.1))
    lp = pol.log_prob(np.array([[1e3, -1e3]]), np.zeros((1, 2)))
    assert np.all(np.isfinite(lp))


def test_adam_zero_gradient():
    state = trainer.AdamState(np.ones(3), np.ones(3), 5)
    params = np.arange(3.0)
    new, st = trainer.adam_step(params, np.zeros(3), state)
    np.testing.assert_allclose(st.m, 0.9)
    np.testing.assert_allclose(st.v, 0.999)
    # the update follows the decayed first moment, not the zero gradient
    assert st.t == 6
    new0, _ = trainer.adam_step(params, np.zeros(3), trainer.AdamState.zeros(3))
    np.testing.assert_array_equal(new0, params)


def test_adam_first_step():
    new, st = trainer.adam_step(np.zeros(2), np.ones(2), trainer.AdamState.zeros(2), lr=1e-3)
    np.testing.assert_allclose(new, -1e-3, rtol=1e-7)


def test_adam_clip():
    a, sa = trainer.adam_step(np.zeros(2), np.full(2, 100.0), trainer.AdamState.zeros(2), clip=10.0)
    b, sb = trainer.adam_step(np.zeros(2), np.full(2, 10.0), trainer.AdamState.zeros(2), clip=10.0)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(sa.v, sb.v)


def test_adam_shape_mismatch():
    with pytest.raises(trainer.ContractError):
        trainer.adam_step(np.zeros(2), np.zeros(3), trainer.AdamState.zeros(2))


def test_config_validation():
    cfg = trainer.TrainConfig()
    assert (cfg.lr, cfg.batch_steps, cfg.horizon_cap, cfg.clip) == (1e-3, 6000, 200, 10.0)
    assert cfg.log_std_init == pytest.approx(math.log(0.1))
    with pytest.raises(trainer.ContractError):
        trainer.TrainConfig(epochs=1001)
    with pytest.raises(trainer.ContractError):
        trainer.TrainConfig(mode="ppo")
    with pytest.raises(trainer.ContractError):
        trainer.TrainConfig(mode="projected", init="random")
    with pytest.raises(trainer.ContractError):
        trainer.TrainConfig.from_dict({"bogus": 1})
    back = trainer.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


def small_config(**kw):
    base = dict(env="pendulum-linear", n_xi=4, n_phi=4, batch_steps=300, epochs=2, seed=3)
    base.update(kw)
    return trainer.TrainConfig(**base)


def test_zero_epochs_keeps_initial_controller(tmp_path):
    run = trainer.train(small_config(epochs=0), out_dir=tmp_path)
    assert len(run.records) == 0 and len(run.thetas) == 1 and len(run.certificates) == 1
    assert (tmp_path / "certs" / "epoch_0.json").exists()
    assert (tmp_path / "params" / "epoch_0.json").exists()
    with open(tmp_path / "rewards.csv") as fh:
        assert list(csv.reader(fh)) == [["epoch", "mean", "std", "diverged_count"]]


def test_projected_run_is_certified_and_deterministic(tmp_path):
    cfg = small_config(epochs=3)
    a = trainer.train(cfg, out_dir=tmp_path)
    b = trainer.train(cfg)
    assert [r.theta_hash for r in a.records] == [r.theta_hash for r in b.records]
    assert np.array_equal(a.mean_rewards, b.mean_rewards)
    assert np.array_equal(a.final_theta.flat(), b.final_theta.flat())
    assert len(a.certificates) == 4
    env = plants.make_env("pendulum-linear")
    # certificates refer to the plant with normalized outputs
    system, _ = trainer.controller_system(env)
    rng = np.random.default_rng(0)
    for rec, theta, cert in zip(a.records, a.thetas[1:], a.certificates[1:]):
        assert rec.recursive_ok and rec.residual >= -1e-7
        assert rec.solve["kkt_residual"] <= 1e-5
        assert lmi.certificate_slack(cert, theta, system) <= 1e-9
        x0 = env.sample_init(rng, 20)
        assert trainer.envelope_ratio(env, theta, cert.rho, x0) <= cert.envelope * (1 + 1e-6)
    rows = list(csv.reader(open(tmp_path / "rewards.csv")))
    assert len(rows) == 4
    assert len(list((tmp_path / "certs").glob("*.json"))) == 4


def test_batch_independent_of_threads():
    env = plants.make_env("cartpole")
    theta = rnnctl.TransformedParams.zeros(4, 4, env.n_y, env.n_u)
    one = trainer.sample_batch(env, theta, np.log(0.1) * np.ones(1), trainer.TrainConfig(env="cartpole", threads=1, batch_steps=500, mode="baseline-pg"), 0)
    two = trainer.sample_batch(env, theta, np.log(0.1) * np.ones(1), trainer.TrainConfig(env="cartpole", threads=3, batch_steps=500, mode="baseline-pg"), 0)
    # same episodes; only BLAS rounding differs with the batch split
    assert np.array_equal(one.mask, two.mask)
    np.testing.assert_allclose(one.u, two.u, atol=1e-12)
    np.testing.assert_allclose(one.r, two.r, atol=1e-12)
    assert one.n_steps >= 500


def bandit_env():
    # one step, y = 1, reward peaks at u = 0.5
    plant = plants.PlantLti([[0.0]], [[0.0]], [[1.0]])
    return plants.Environment(
        name="bandit",
        plant=plant,
        reward=lambda x, u: -((u[:, 0] - 0.5) ** 2),
        obs_low=np.array([-10.0]),
        obs_high=np.array([10.0]),
        obs_normalizer=np.array([1.0]),
        init_low=np.array([1.0]),
        init_high=np.array([1.0]),
        horizon_cap=1,
        n_xi=1,
        n_phi=1,
    )


def test_bandit_moves_toward_optimum():
    env = bandit_env()
    cfg = trainer.TrainConfig(env="bandit", mode="baseline-pg", init="zero", epochs=50, batch_steps=200, horizon_cap=1, lr=1e-2)
    run = trainer.train(cfg, env=env)

    def mean_action(theta):
        _, u, _, _ = rnnctl.controller_step(theta, np.zeros(1), np.ones(1))
        return u[0, 0]

    assert mean_action(run.thetas[0]) == 0.0
    assert abs(mean_action(run.final_theta) - 0.5) < 0.5 - 0.2
    assert run.mean_rewards[-5:].mean() > run.mean_rewards[:5].mean()


def test_baseline_run_records_violations():
    run = trainer.train(small_config(mode="baseline-pg", epochs=2))
    assert run.certificates == []
    assert all(r.recursive_ok is None for r in run.records)
    assert run.violations.sum() > 0
