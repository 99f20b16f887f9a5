import numpy as np
import pytest

from lqpkit.blocks import FormatError
from lqpkit.envs import double_integrator
from lqpkit.golden import PROBES, golden_params, invariant_set
from lqpkit.mpc import MpcConfig, condense_structure, lqr_gain
from lqpkit.policy import from_condensed, from_matrices, init_params
from lqpkit.polytope import from_vertices
from lqpkit.verify import (PreconditionError, StabilityConfig, assemble_feasibility,
                           assemble_stability, certificate_point, dumps_qcqp, export_qcqp,
                           kkt_block, linearize_policy, loads_qcqp, parse_qcqp, sample_falsify,
                           shrink)


def tags(q):
    out = {}
    for c in q.constraints:
        out[(c.tag, c.kind)] = out.get((c.tag, c.kind), 0) + 1
    return out


def small_box():
    return from_vertices([[-1, -1], [1, -1], [1, 1], [-1, 1]])


def broken_policy():
    """Inner QP min y^2/2 s.t. y - 0.5 >= 0, so the policy always outputs 0.5."""
    return from_matrices(np.eye(1), np.ones((1, 1)), np.zeros((1, 2)), np.zeros((1, 2)),
                         np.array([-0.5]), n_sys=2, m_sys=1, rho_eps=0.0)


@pytest.fixture(scope="module")
def di():
    return double_integrator()


class TestAssembly:
    def test_kkt_counts_with_slack(self):
        p = init_params(2, 1, 4, 24, rng=0)
        q = kkt_block(p)
        assert q.n_vars == 2 + 5 + 25
        assert tags(q) == {("stationarity", "EQ"): 5, ("primal", "GE"): 25, ("dual", "GE"): 25,
                           ("complementarity", "EQ"): 1}

    def test_kkt_satisfied_by_converged_solution(self, di):
        p = init_params(2, 1, 3, 6, rng=1)
        q = kkt_block(p)
        res = sample_falsify("feasibility", p, di, small_box(), n_samples=20)
        for i in range(20):
            v = q.pack(x0=res.samples[i], y=res.y[i], mu=res.mu[i])
            assert q.max_violation(v) <= 1e-8

    def test_kkt_rejects_wrong_point(self):
        p = init_params(2, 1, 3, 6, rng=1)
        q = kkt_block(p)
        v = q.pack(x0=np.array([1.0, 0.0]), y=np.ones(4), mu=np.ones(7))
        assert q.max_violation(v) > 1e-3

    def test_golden_sizes(self, di):
        p = golden_params()
        f = assemble_feasibility(p, di, invariant_set())
        s = assemble_stability(p, di, invariant_set(), StabilityConfig(np.eye(2)))
        assert (f.n_vars, f.n_cons) == (42, 78)
        assert (s.n_vars, s.n_cons) == (26, 61)

    def test_feasibility_objective_closed_form(self, di):
        """At a certificate point the QCQP objective is the margin of the binding row."""
        p = golden_params()
        X0 = invariant_set()
        q = assemble_feasibility(p, di, X0)
        res = sample_falsify("feasibility", p, di, X0, n_samples=50)
        for i in range(0, 50, 7):
            v = certificate_point(q, res, i, "feasibility", X0, di)
            x, u = res.samples[i], res.y[i, :1]
            nxt = di.linear.A @ x + di.linear.B @ u
            assert q.objective(v) == pytest.approx(np.min(X0.c - X0.G @ nxt), abs=1e-10)
            assert q.max_violation(v) <= 1e-8

    def test_objective_is_min_over_simplex(self, di):
        """Over nu in the simplex the bilinear objective is minimized at a vertex."""
        p = golden_params()
        X0 = invariant_set()
        q = assemble_feasibility(p, di, X0)
        res = sample_falsify("feasibility", p, di, X0, n_samples=5)
        rng = np.random.default_rng(0)
        base = certificate_point(q, res, 0, "feasibility", X0, di)
        best = q.objective(base)
        for _ in range(200):
            nu = rng.dirichlet(np.ones(len(X0.c)))
            v = base.copy()
            s, k = q.names["nu"]
            v[s:s + k] = nu
            assert q.objective(v) >= best - 1e-12

    def test_stability_objective_closed_form(self, di):
        p = golden_params()
        Pf = np.array([[5.0, 1.0], [1.0, 9.0]])
        cfg = StabilityConfig(Pf, epsilon=1e-3)
        q = assemble_stability(p, di, invariant_set(), cfg)
        x = np.array([0.3, -0.7])
        y = np.zeros(q.names["y"][1])
        y[:2] = [0.2, 0.1]
        v = q.pack(x0=x, y=y)
        nxt = di.linear.A @ x + di.linear.B @ y[:1]
        assert q.objective(v) == pytest.approx(x @ Pf @ x - nxt @ Pf @ nxt - 1e-3 * x @ x)

    def test_stability_horizon_one(self, di):
        p = golden_params()
        Xf = small_box()
        q = assemble_stability(p, di, invariant_set(), StabilityConfig(np.eye(2), N=1, X_f=Xf))
        assert q.names["ubar"][1] == 2
        assert tags(q)[("terminal-set", "GE")] == 4
        # J1 - J2 + l(x0, u0) at ubar = (u0, 0) is the cost gap of the second input
        x, u0 = np.array([0.5, 0.2]), 0.1
        lin = di.linear
        v = q.pack(x0=x, y=np.r_[u0, np.zeros(q.names["y"][1] - 1)], ubar=np.array([u0, 0.0]))
        assert q.objective(v) == pytest.approx(x @ lin.Q @ x + 100 * u0 ** 2 - 1e-4 * x @ x)

    def test_stability_requires_terminal_set(self):
        with pytest.raises(ValueError):
            StabilityConfig(np.eye(2), N=2)
        with pytest.raises(np.linalg.LinAlgError):
            StabilityConfig(-np.eye(2))

    def test_bb_negative_rejected(self, di):
        with pytest.raises(PreconditionError, match="b_b-negative"):
            assemble_stability(broken_policy(), di, small_box(), StabilityConfig(np.eye(2)))
        with pytest.raises(PreconditionError):
            sample_falsify("stability", broken_policy(), di, small_box(), StabilityConfig(np.eye(2)))


class TestFalsify:
    def test_broken_policy_counterexample(self, di):
        res = sample_falsify("feasibility", broken_policy(), di, invariant_set(), n_samples=500)
        assert res.counterexample and res.min_value < 0
        assert res.y[:, 0] == pytest.approx(np.full(len(res.y), 0.5), abs=1e-8)

    def test_monotone_in_samples(self, di):
        p = golden_params()
        X0 = invariant_set()
        vals = [sample_falsify("feasibility", p, di, X0, n_samples=n, include_vertices=False).min_value
                for n in (50, 200, 800)]
        assert vals[0] >= vals[1] >= vals[2]

    def test_seed_reproducible(self, di):
        p = golden_params()
        a = sample_falsify("feasibility", p, di, small_box(), n_samples=100, seed=3)
        b = sample_falsify("feasibility", p, di, small_box(), n_samples=100, seed=3)
        assert np.array_equal(a.samples, b.samples) and a.min_value == b.min_value

    def test_general_horizon_not_sampled(self, di):
        with pytest.raises(NotImplementedError):
            sample_falsify("stability", golden_params(), di, small_box(),
                           StabilityConfig(np.eye(2), N=1, X_f=small_box()))

    def test_unknown_kind(self, di):
        with pytest.raises(ValueError):
            sample_falsify("roa", golden_params(), di, small_box())


class TestLinearize:
    def test_mpc_policy_gives_lqr_gain_near_origin(self, di):
        """Condensed unconstrained MPC with the Riccati terminal cost is exactly LQR."""
        import scipy.linalg as sla
        lin = di.linear
        X = sla.solve_discrete_are(lin.A, lin.B, lin.Q, lin.R)
        cfg = MpcConfig(3, terminal=X, replace_last_stage=True)
        p = from_condensed(condense_structure(lin, cfg))
        K = linearize_policy(p, 1e-3 * np.eye(2), tol=1e-12)
        assert K == pytest.approx(lqr_gain(lin), abs=1e-8)

    def test_probe_scaling_invariant(self):
        p = golden_params()
        K1 = linearize_policy(p, PROBES, tol=1e-12)
        K2 = linearize_policy(p, 0.5 * PROBES, tol=1e-12)
        assert K1 == pytest.approx(K2, abs=1e-8)

    def test_dependent_probes(self):
        with pytest.raises(ValueError):
            linearize_policy(golden_params(), np.array([[1.0, 1.0], [2.0, 2.0]]))


class TestQcqpFormat:
    def test_round_trip(self, di, tmp_path):
        p = init_params(2, 1, 3, 6, rng=2)
        q = assemble_feasibility(p, di, small_box())
        text = dumps_qcqp(q)
        back = loads_qcqp(text)
        assert dumps_qcqp(back) == text
        v = np.random.default_rng(0).normal(size=q.n_vars)
        assert back.objective(v) == q.objective(v)
        for a, b in zip(q.constraints, back.constraints):
            assert a.kind == b.kind and a.form(v) == pytest.approx(b.form(v), rel=1e-15)
        export_qcqp(q, tmp_path / "f.qcqp")
        assert parse_qcqp(tmp_path / "f.qcqp").structural_hash() == q.structural_hash()

    def test_upper_triangle_storage(self):
        from lqpkit.verify import Qcqp
        q = Qcqp({"a": (0, 2)})
        q.objective = q.form(Q=np.array([[1.0, 2.0], [0.0, 3.0]]))
        body = dumps_qcqp(q).splitlines()
        assert body[3:] == ["OBJ 3 0 0", "0 0 1", "0 1 1", "1 1 3"]
        assert loads_qcqp(dumps_qcqp(q)).objective(np.array([1.0, 1.0])) == pytest.approx(6.0)

    @pytest.mark.parametrize("mutate", [
        lambda t: t.replace("QCQPv1", "QCQPv2", 1),
        lambda t: t.replace("VARS", "VAR", 1),
        lambda t: t + "junk\n",
        lambda t: "\n".join(t.splitlines()[:-3]),
    ])
    def test_malformed(self, mutate):
        p = init_params(2, 1, 2, 3, rng=0)
        text = dumps_qcqp(kkt_block(p))
        with pytest.raises(FormatError):
            loads_qcqp(mutate(text))

    def test_bad_index(self):
        text = "QCQPv1 2 0\nVARS 1\na 0 2\nOBJ 1 0 0\n1 0 2.0\n"
        with pytest.raises(FormatError):
            loads_qcqp(text)


class TestShrink:
    def test_margin_zero_is_identity(self):
        box = small_box()
        s = shrink(box, 0.0)
        assert np.array_equal(s.G, box.G) and np.array_equal(s.c, box.c)

    def test_shrunk_set_is_subset(self):
        X0 = invariant_set()
        s = shrink(X0, 0.2)
        v = s.vertices()
        assert X0.contains(v, tol=1e-12).all()
        assert np.all(X0.c - v @ X0.G.T >= 0.2 - 1e-9)
