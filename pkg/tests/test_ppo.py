import numpy as np
import pytest
from scipy.stats import norm

from lqpkit.blocks import FormatError
from lqpkit.envs import double_integrator
from lqpkit.ppo import (Adam, DenseNet, GaussianHead, TrainConfig, ValueNorm, clip_grads,
                        gae_advantages, initial_state, mlp_dumps, mlp_loads, parse_arch,
                        ppo_losses, train)
from oracles import naive_gae


class TestGaussian:
    def test_log_prob_closed_form(self):
        head = GaussianHead(np.log([0.3, 2.0]))
        rng = np.random.default_rng(0)
        mean, a = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        ref = norm.logpdf(a, mean, [0.3, 2.0]).sum(axis=1)
        assert head.log_prob(a, mean) == pytest.approx(ref, abs=1e-12)

    def test_entropy(self):
        head = GaussianHead(np.log([0.3, 2.0]))
        assert head.entropy() == pytest.approx(norm(0, 0.3).entropy() + norm(0, 2.0).entropy())

    def test_ratio_is_one_on_fresh_data(self):
        head = GaussianHead(np.log([0.15]))
        rng = np.random.default_rng(1)
        mean = rng.normal(size=(50, 1))
        a = head.sample(mean, rng)
        lp = head.log_prob(a, mean)
        _, _, ratio = ppo_losses(lp, lp.copy(), rng.normal(size=50), 0.2)
        assert np.array_equal(ratio, np.ones(50))


class TestSurrogate:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        old = rng.normal(size=20)
        new = old + rng.normal(scale=0.3, size=20)
        adv = rng.normal(size=20)
        _, g, _ = ppo_losses(new, old, adv, 0.2)
        h = 1e-7
        for i in range(20):
            e = np.zeros(20)
            e[i] = h
            fd = (ppo_losses(new + e, old, adv, 0.2)[0] - ppo_losses(new - e, old, adv, 0.2)[0]) / (2 * h)
            assert g[i] == pytest.approx(fd, abs=1e-6)

    def test_clipped_value(self):
        loss, g, _ = ppo_losses(np.log([2.0]), np.zeros(1), np.array([1.0]), 0.2)
        assert loss == pytest.approx(-1.2) and g[0] == 0.0


class TestDenseNet:
    def test_backward_finite_differences(self):
        net = DenseNet([3, 5, 4, 2], rng=0)
        rng = np.random.default_rng(3)
        x, w = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
        out, cache = net.forward(x)
        grads = net.backward(cache, w)
        h = 1e-6
        for k, p in net.params.items():
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                p[idx] += h
                up = np.sum(w * net(x))
                p[idx] -= 2 * h
                dn = np.sum(w * net(x))
                p[idx] += h
                fd[idx] = (up - dn) / (2 * h)
            assert np.abs(grads[k] - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())

    def test_counts(self):
        net = DenseNet([2, 8, 1])
        assert net.n_params() == 2 * 8 + 8 + 8 + 1
        assert net.flops() == (2 * 2 * 8 + 8 + 8) + (2 * 8 + 1)


class TestGae:
    def test_against_naive_sums(self):
        rng = np.random.default_rng(4)
        T, n = 12, 3
        r, v, nv = rng.normal(size=(T, n)), rng.normal(size=(T, n)), rng.normal(size=(T, n))
        dones = rng.random((T, n)) < 0.2
        terms = dones & (rng.random((T, n)) < 0.5)
        adv, ret = gae_advantages(r, v, nv, dones, terms, 0.99, 0.95)
        assert adv == pytest.approx(naive_gae(r, v, nv, dones, terms, 0.99, 0.95), abs=1e-12)
        assert ret == pytest.approx(adv + v)

    def test_terminal_single_step(self):
        adv, _ = gae_advantages(np.array([[3.0]]), np.array([[1.0]]), np.array([[100.0]]),
                                np.array([[True]]), np.array([[True]]), 0.99, 0.95)
        assert adv[0, 0] == pytest.approx(2.0)

    def test_time_limit_bootstraps(self):
        adv, _ = gae_advantages(np.array([[3.0]]), np.array([[1.0]]), np.array([[10.0]]),
                                np.array([[True]]), np.array([[False]]), 0.5, 0.95)
        assert adv[0, 0] == pytest.approx(3.0 + 5.0 - 1.0)


class TestOptim:
    def test_adam_first_step_is_sign(self):
        p = {"w": np.array([1.0, -2.0])}
        Adam().step(p, {"w": np.array([0.3, -4.0])}, 0.1)
        assert p["w"] == pytest.approx([0.9, -1.9], abs=1e-6)

    def test_clip_grads(self):
        g, nrm = clip_grads({"a": np.array([3.0, 4.0])}, 1.0)
        assert nrm == pytest.approx(5.0) and np.linalg.norm(g["a"]) == pytest.approx(1.0)

    def test_value_norm_matches_pooled_stats(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(3, 2, 500), rng.normal(-1, 1, 300)
        vn = ValueNorm()
        vn.update(a)
        vn.update(b)
        both = np.concatenate([a, b])
        assert vn.mean == pytest.approx(both.mean(), rel=1e-5)
        assert vn.std == pytest.approx(both.std(), rel=1e-4)

    def test_lr_schedule_endpoints(self):
        cfg = TrainConfig(epochs=11)
        assert cfg.lr("actor", 0) == 5e-4 and cfg.lr("actor", 10) == pytest.approx(1e-6)
        assert cfg.lr("critic", 5) == pytest.approx(0.5 * (1e-3 + 2e-6))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(gamma=1.5)
        assert TrainConfig().batch_size == 8192


class TestTrain:
    def test_parse_arch(self):
        assert parse_arch("lqp:4,24") == ("lqp", (4, 24))
        assert parse_arch("mlp:32") == ("mlp", (32,))
        with pytest.raises(ValueError):
            parse_arch("lqp:4")

    def test_zero_epochs_returns_initial_state(self):
        task = double_integrator()
        cfg = TrainConfig(epochs=0)
        res = train(task, "lqp:4,24", cfg, 3)
        _, actor, head, _ = initial_state(task, "lqp:4,24", cfg, 3)
        for k, v in actor.params.blocks().items():
            assert np.array_equal(getattr(res.actor.params, k), v)
        assert np.array_equal(res.head.log_std, head.log_std)
        assert res.log == []

    def test_deterministic_and_logged(self, tmp_path):
        task = double_integrator()
        cfg = TrainConfig(epochs=3, n_envs=16, horizon_length=8, minibatch_size=64, eval_every=2,
                          eval_trials=5)
        a = train(task, "lqp:2,6", cfg, 0, log_path=tmp_path / "a.csv")
        b = train(task, "lqp:2,6", cfg, 0)
        for k, v in a.actor.params.blocks().items():
            assert np.array_equal(getattr(b.actor.params, k), v)
        rows = (tmp_path / "a.csv").read_text().splitlines()
        assert rows[0] == "epoch,mean_reward,res_loss,eval_fail_pct,eval_cost" and len(rows) == 4
        assert rows[1].split(",")[3] != "" and rows[2].split(",")[3] == ""

    def test_mlp_smoke(self):
        cfg = TrainConfig(epochs=2, n_envs=8, horizon_length=4, minibatch_size=32, eval_every=0)
        res = train(double_integrator(), "mlp:8", cfg, 1)
        assert res.actor.kind == "mlp" and len(res.log) == 2


class TestMlpFormat:
    def test_round_trip_bit_exact(self):
        net = DenseNet([2, 8, 4, 1], rng=7)
        text = mlp_dumps(net)
        back = mlp_loads(text)
        assert mlp_dumps(back) == text
        for k, v in net.params.items():
            assert np.array_equal(back.params[k], v)

    @pytest.mark.parametrize("text", ["", "LQPv1 1", "MLPv1 3 2 8 1 relu\n", "MLPv1 3 2 8 1 elu\n"])
    def test_malformed(self, text):
        with pytest.raises(FormatError):
            mlp_loads(text)
