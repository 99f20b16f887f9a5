import numpy as np
import pytest

from lqpkit.blocks import FormatError
from lqpkit.mpc import MpcConfig, condense_structure, mpc_control
from lqpkit.envs import double_integrator
from lqpkit.policy import (PolicyParams, backward, dumps, flops, forward, from_condensed,
                           from_matrices, init_params, load_checkpoint, loads, materialize,
                           residual_loss, save_checkpoint, solve_policy_batch, solve_policy_qp)
from lqpkit.qp import (PdhgState, QpValidationError, SlackConfig, assemble_operator,
                       oracle_active_set, pdhg_step, recover_primal, slacken)
from oracles import finite_difference_errors


def random_policy(seed, n_qp=3, m_qp=8, n_sys=2, m_sys=1, n_iter=5, alpha=0.9, rho_eps=10.0,
                  symmetric_mode=False):
    rng = np.random.default_rng(seed)
    p = init_params(n_sys, m_sys, n_qp, m_qp, n_iter=n_iter, alpha=alpha, rho_eps=rho_eps,
                    rng=rng, symmetric_mode=symmetric_mode)
    L = np.tril(rng.normal(0, 0.5, (n_qp, n_qp)))
    W_q = rng.normal(0, 1.0, p.W_q.shape)
    b_b = rng.uniform(0.2, 1.0, p.b_b.shape)
    return p.copy(L_P_raw=L, W_q=W_q, b_b=b_b)


class TestMaterialize:
    def test_P_is_LLt_with_softplus_diagonal(self):
        p = random_policy(0, rho_eps=0.0)
        fam = materialize(p)[0]
        L = np.tril(p.L_P_raw, -1) + np.diag(np.log1p(np.exp(np.diag(p.L_P_raw))))
        assert fam.P == pytest.approx(L @ L.T, abs=1e-12)

    def test_slack_appended(self):
        p = random_policy(1, rho_eps=10.0)
        fam = materialize(p)[0]
        base = materialize(p.copy(rho_eps=0.0))[0]
        obs = np.array([0.3, -0.2])
        ref = slacken(base.standard_qp(obs), SlackConfig(10.0))
        got = fam.standard_qp(obs)
        for a, b in ((got.P, ref.P), (got.H, ref.H), (got.q, ref.q), (got.b, ref.b)):
            assert a == pytest.approx(b, abs=1e-12)

    def test_symmetric_mode_expansion(self):
        p = random_policy(2, m_qp=6, symmetric_mode=True, rho_eps=0.0)
        fam = materialize(p)[0]
        assert fam.H == pytest.approx(np.vstack([p.H, -p.H]))
        assert fam.bb == pytest.approx(np.ones(6)) and not fam.Wb.any()
        assert p.m_qp == 6 and p.H.shape == (3, 3)

    def test_validation(self):
        with pytest.raises(QpValidationError):
            PolicyParams(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((2, 2)), np.zeros((3, 2)),
                         np.zeros(4), n_sys=2, m_sys=1)
        with pytest.raises(ValueError):
            init_params(2, 1, 3, 4, init="nope")


class TestForward:
    def test_matches_explicit_iteration(self):
        p = random_policy(3)
        fam, _ = materialize(p)
        obs = np.array([0.7, -1.1])
        qp = fam.standard_qp(obs)
        op = assemble_operator(qp, alpha=p.alpha, beta=1.0)
        s = PdhgState.zeros(qp.m_qp)
        for _ in range(p.n_iter):
            s = pdhg_step(op, s)
        y = recover_primal(qp, op, s.z)
        u, tr = forward(p, obs)
        assert tr.y[0] == pytest.approx(y, abs=1e-12)
        assert u == pytest.approx(y[:1], abs=1e-12)

    def test_clipping_and_batch(self):
        p = random_policy(4)
        obs = np.random.default_rng(0).normal(size=(5, 2)) * 3
        u, tr = forward(p, obs, -0.1, 0.1)
        assert u.shape == (5, 1) and np.all(np.abs(u) <= 0.1)
        assert tr.u_raw == pytest.approx(tr.y[:, :1])
        for i in range(5):
            ui, _ = forward(p, obs[i], -0.1, 0.1)
            assert ui == pytest.approx(u[i], abs=1e-14)

    def test_residual_loss_definition(self):
        p = random_policy(5)
        fam = materialize(p)[0]
        obs = np.random.default_rng(1).normal(size=(4, 2))
        _, tr = forward(p, obs, family=fam)
        tot = 0.0
        for i in range(4):
            qp = fam.standard_qp(obs[i])
            rp = qp.H @ tr.y[i] + qp.b - tr.z[i]
            rd = qp.P @ tr.y[i] + qp.q - qp.H.T @ tr.lam[i]
            tot += rp @ rp + rd @ rd
        assert residual_loss(fam, tr) == pytest.approx(tot / 4, rel=1e-12)

    def test_wrong_obs_size(self):
        with pytest.raises(QpValidationError):
            forward(random_policy(0), np.zeros(3))


class TestBackward:
    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        p = random_policy(seed)
        rng = np.random.default_rng(100 + seed)
        obs = rng.normal(size=(3, 2))
        g = rng.normal(size=(3, 1))
        errs = finite_difference_errors(p, obs, g, res_scale=0.0)
        assert max(errs.values()) <= 1e-4, errs

    def test_finite_differences_with_residual_term(self):
        p = random_policy(7)
        rng = np.random.default_rng(7)
        obs = rng.normal(size=(3, 2))
        errs = finite_difference_errors(p, obs, rng.normal(size=(3, 1)), res_scale=0.5)
        assert max(errs.values()) <= 1e-4, errs

    def test_finite_differences_symmetric_mode(self):
        p = random_policy(8, m_qp=6, symmetric_mode=True)
        rng = np.random.default_rng(8)
        obs = rng.normal(size=(2, 2))
        errs = finite_difference_errors(p, obs, rng.normal(size=(2, 1)))
        assert max(errs.values()) <= 1e-4, errs

    def test_clip_blocks_gradient(self):
        p = random_policy(9)
        obs = np.array([[5.0, 5.0]])
        _, tr = forward(p, obs, -1e-6, 1e-6)
        assert not tr.clip_mask.any()
        g = backward(p, tr, np.ones((1, 1)))
        assert all(not v.any() for v in g.values())
        g2 = backward(p, tr, np.ones((1, 1)), through_clip=False)
        assert any(v.any() for v in g2.values())

    def test_rejects_foreign_trace(self):
        p = random_policy(0)
        _, tr = forward(p, np.zeros(2))
        with pytest.raises(ValueError):
            backward(p.copy(n_iter=3), tr, np.ones(1))


class TestConvergence:
    def test_batch_matches_oracle(self):
        p = random_policy(11, n_iter=10)
        fam = materialize(p)[0]
        obs = np.random.default_rng(2).normal(size=(6, 2))
        y, z, lam, conv, iters = solve_policy_batch(p, obs, tol=1e-11)
        assert conv.all()
        for i in range(6):
            y_ref, mu_ref = oracle_active_set(fam.standard_qp(obs[i]))
            assert y[i] == pytest.approx(y_ref, abs=1e-7)
            assert lam[i] == pytest.approx(mu_ref, abs=1e-7)

    def test_single_solve_agrees(self):
        p = random_policy(12)
        obs = np.array([0.4, 0.9])
        res = solve_policy_qp(p, obs, tol=1e-11)
        y = solve_policy_batch(p, obs, tol=1e-11)[0]
        assert res.y == pytest.approx(y[0], abs=1e-8)

    def test_alpha_range(self):
        with pytest.raises(QpValidationError):
            solve_policy_batch(random_policy(0), np.zeros(2), alpha=1.0)

    def test_from_condensed_contains_mpc(self):
        task = double_integrator().linear
        cfg = MpcConfig(3, solver="dual-active-set")
        p = from_condensed(condense_structure(task, cfg))
        assert materialize(p)[0].P == pytest.approx(condense_structure(task, cfg).P, abs=1e-10)
        x = np.array([[1.0, -0.5], [-3.0, 1.2]])
        y = solve_policy_batch(p, x, tol=1e-11)[0]
        for i in range(2):
            assert y[i, 0] == pytest.approx(mpc_control(task, cfg, x[i])[0], abs=1e-6)


class TestFlops:
    def test_count_formula(self):
        p = init_params(2, 1, 4, 24, n_iter=10)
        n, m, d = 5, 25, 2
        maps = 2 * n * d + 2 * (2 * m * d + m)
        it = 2 * m * m + 7 * m
        rec = m + 2 * n * m + 2 * n * n + n
        assert flops(p) == maps + 10 * it + rec

    def test_n_params(self):
        p = init_params(2, 1, 4, 24)
        assert p.n_params() == 4 * 2 + 10 + 24 * 4 + 24 * 2 + 24


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        p = random_policy(13, symmetric_mode=False)
        f = tmp_path / "p.ckpt"
        save_checkpoint(p, f)
        q = load_checkpoint(f)
        for k, v in p.blocks().items():
            assert np.array_equal(getattr(q, k), v)
        assert dumps(q) == f.read_text()
        assert (q.alpha, q.rho_eps, q.n_iter, q.m_sys) == (p.alpha, p.rho_eps, p.n_iter, p.m_sys)

    def test_symmetric_round_trip(self):
        p = random_policy(14, m_qp=6, symmetric_mode=True)
        assert dumps(loads(dumps(p))) == dumps(p)

    @pytest.mark.parametrize("text", ["", "MLPv1 1 2", "LQPv1 3 8 2 0 5 0.9 10 0\n"])
    def test_malformed(self, text):
        with pytest.raises(FormatError):
            loads(text)

    def test_dimension_mismatch(self):
        p = random_policy(15)
        bad = dumps(p).replace("LQPv1 3 8", "LQPv1 3 9", 1)
        with pytest.raises(FormatError):
            loads(bad)

    def test_from_matrices(self):
        P = np.array([[2.0, 0.3], [0.3, 1.0]])
        p = from_matrices(P, np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)), np.ones(2), 2, 1)
        assert materialize(p)[0].P == pytest.approx(P, abs=1e-12)
