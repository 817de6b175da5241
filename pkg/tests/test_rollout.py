"""Moment-matched rollouts, long-term cost, multi-task objective + gradient."""

import numpy as np
import pytest

from mtpolicy import cost as cm, gp, policy as pm
from mtpolicy.errors import DimensionError, NumericalDegeneracyError
from mtpolicy.gaussian import FeatureMap, GaussianDist, Relation, TaskSpec
from mtpolicy.gp import GPFitOptions, TransitionDataset
from mtpolicy.rollout import (
    expected_long_term_cost,
    multi_task_objective,
    regularization,
    rollout,
)


def small_instance(seed, n_points=5, d=2, n_basis=3, task_rel=Relation.IDENTITY):
    """Random D=2 instance: GP, RBF policy, two tasks, x0."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_points, d + 1))
    y = 0.2 * rng.normal(size=(n_points, d))
    model = gp.fit(
        TransitionDataset(x, y, d, 1), GPFitOptions(seed=seed, restarts=1, max_iters=30)
    )
    fm = FeatureMap.identity(d + 1)
    shape = pm.PolicyShape("rbf", fm, 1, n_basis, (2.0,))
    x0 = GaussianDist(rng.normal(size=d) * 0.3, 0.05 * np.eye(d))
    tasks = [
        TaskSpec(np.array([0.4]), np.array([[0.01]]), task_rel,
                 mask=(0,) if task_rel is Relation.DIFFERENCE else None),
        TaskSpec(np.array([-0.6]), np.array([[0.01]]), task_rel,
                 mask=(0,) if task_rel is Relation.DIFFERENCE else None),
    ]
    policy = pm.init_random(shape, rng, pm.PolicyInit(x0, tuple(tasks)))
    cost_builder = lambda t: cm.target_cost(np.concatenate([t.eta, np.zeros(d - 1)]))
    return model, policy, tasks, cost_builder, x0


class TestRollout:
    def test_zero_signal_gp_noise_only(self):
        # degenerate model: successor = x0 shifted by 0 with noise covariance
        x = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        y = np.zeros((2, 2))
        model = gp.with_hyperparameters(
            TransitionDataset(x, y, 2, 1), (), np.zeros((2, 3)),
            np.log([1e-14, 1e-14]), np.log([0.04, 0.09]),
        )
        shape = pm.PolicyShape("affine", FeatureMap.identity(3), 1, 0, (1.0,))
        policy = pm.unpack(np.zeros(4), shape)
        task = TaskSpec(np.zeros(1), np.zeros((1, 1)), Relation.IDENTITY)
        x0 = GaussianDist(np.array([0.3, -0.2]), np.zeros((2, 2)))
        rr = rollout(model, policy, task, x0, 1)
        np.testing.assert_allclose(rr.states[1].mean, x0.mean, atol=1e-7)
        np.testing.assert_allclose(rr.states[1].cov, np.diag([0.04, 0.09]), atol=1e-7)

    def test_deterministic(self):
        model, policy, tasks, cb, x0 = small_instance(1)
        r1 = rollout(model, policy, tasks[0], x0, 4, cost=cb(tasks[0]))
        r2 = rollout(model, policy, tasks[0], x0, 4, cost=cb(tasks[0]))
        for a, b in zip(r1.states, r2.states):
            assert np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov)
        assert r1.per_step_cost == r2.per_step_cost

    def test_linear_system_oracle(self):
        # x' = 0.9 x + 0.1 u learned densely; affine policy with a huge
        # saturation bound so the squash is linear (slope measured from eval)
        rng = np.random.default_rng(0)
        n = 60
        xs = rng.uniform(-2, 2, size=(n, 1))
        us = rng.uniform(-2, 2, size=(n, 1))
        nxt = 0.9 * xs + 0.1 * us
        ds = TransitionDataset(np.column_stack([xs, us]), nxt - xs, 1, 1)
        model = gp.fit(ds, GPFitOptions(seed=0, restarts=2))
        u_cap = 1e4
        shape = pm.PolicyShape("affine", FeatureMap.identity(2), 1, 0, (u_cap,))
        a_gain, b_gain = -0.4, 0.15
        policy = pm.unpack(np.array([a_gain, 0.0, b_gain]), shape)
        # measure the squash slope at 0 with a unit-gain probe policy
        probe = pm.unpack(np.array([1.0, 0.0, 0.0]), shape)
        h = 1e-5
        slope = float(
            (pm.eval_policy(probe, np.array([h, 0.0]))
             - pm.eval_policy(probe, np.array([-h, 0.0]))) / (2 * h)
        )
        task = TaskSpec(np.zeros(1), np.zeros((1, 1)), Relation.IDENTITY)
        x0 = GaussianDist(np.array([1.2]), np.array([[0.04]]))
        rr = rollout(model, policy, task, x0, 10, episode_task_noise=False)
        # exact linear-Gaussian recursion with the effective gain
        a_eff = 0.9 + 0.1 * slope * a_gain
        b_eff = 0.1 * slope * b_gain
        mean, var = 1.2, 0.04
        sn2 = np.exp(model.log_sn2[0])
        for t in range(1, 11):
            mean = a_eff * mean + b_eff
            var = a_eff**2 * var + sn2
            got_m = rr.states[t].mean[0]
            got_v = rr.states[t].cov[0, 0]
            assert abs(got_m - mean) <= 0.02 * max(abs(mean), 0.05)
            assert abs(got_v - var) <= 0.02 * max(var, 1e-4) + 2e-4

    def test_degenerate_model_raises_with_step(self):
        x = np.array([[0.0, 0.0], [1.0, 1.0]])
        y = np.array([[0.5], [-0.5]])
        # absurd lengthscales underflow the kernel into NaN territory
        model = gp.with_hyperparameters(
            TransitionDataset(x, y, 1, 1), (), np.full((1, 2), -400.0),
            np.array([600.0]), np.array([-600.0]),
        )
        shape = pm.PolicyShape("affine", FeatureMap.identity(2), 1, 0, (1.0,))
        policy = pm.unpack(np.array([1.0, 0.0, 0.0]), shape)
        task = TaskSpec(np.zeros(1), np.zeros((1, 1)), Relation.IDENTITY)
        x0 = GaussianDist(np.zeros(1), np.array([[0.5]]))
        with pytest.raises(NumericalDegeneracyError) as exc:
            rollout(model, policy, task, x0, 3)
        assert exc.value.step is not None

    def test_horizon_validation(self):
        model, policy, tasks, cb, x0 = small_instance(2)
        with pytest.raises(DimensionError):
            rollout(model, policy, tasks[0], x0, 0)


class TestExpectedLongTermCost:
    def test_at_target_near_zero(self):
        # zero-signal dynamics, start exactly at the cost target
        x = np.array([[0.1, 0.0, 0.0], [0.9, 1.0, 1.0]])
        model = gp.with_hyperparameters(
            TransitionDataset(x, np.zeros((2, 2)), 2, 1), (), np.zeros((2, 3)),
            np.log([1e-14, 1e-14]), np.log([1e-12, 1e-12]),
        )
        shape = pm.PolicyShape("affine", FeatureMap.identity(3), 1, 0, (1.0,))
        policy = pm.unpack(np.zeros(4), shape)
        task = TaskSpec(np.zeros(1), np.zeros((1, 1)), Relation.IDENTITY)
        x0 = GaussianDist(np.array([0.5, -0.3]), np.zeros((2, 2)))
        cost = cm.target_cost(np.array([0.5, -0.3]))
        val = expected_long_term_cost(model, policy, task, cost, x0, 6)
        assert 0.0 <= val <= 1e-6

    def test_diffuse_states_saturate(self):
        model, policy, tasks, cb, _ = small_instance(3)
        x0 = GaussianDist(np.zeros(2), 1e8 * np.eye(2))
        val = expected_long_term_cost(model, policy, tasks[0], cb(tasks[0]), x0, 5)
        assert val >= 5 - 1e-3

    def test_matches_quadrature_on_rollout_states(self):
        from numpy.polynomial.hermite_e import hermegauss

        model, policy, tasks, cb, x0 = small_instance(4)
        cost = cb(tasks[0])
        rr = rollout(model, policy, tasks[0], x0, 5, cost=cost)
        val = expected_long_term_cost(model, policy, tasks[0], cost, x0, 5)
        nodes, wts = hermegauss(50)
        total = 0.0
        for st in rr.states[1:]:
            chol = np.linalg.cholesky(st.cov + 1e-14 * np.eye(2))
            acc = 0.0
            for i, xi in enumerate(nodes):
                for j, xj in enumerate(nodes):
                    x = st.mean + chol @ np.array([xi, xj])
                    acc += wts[i] * wts[j] * cm.immediate(cost, x)
            total += acc / (2 * np.pi)
        assert abs(val - total) <= 1e-6


class TestMultiTaskObjective:
    def test_single_task_reduction_exact(self):
        model, policy, tasks, cb, x0 = small_instance(5)
        single = multi_task_objective(model, policy, [tasks[0]], cb, x0, 3)
        direct = expected_long_term_cost(model, policy, tasks[0], cb(tasks[0]), x0, 3)
        pen, _ = regularization(policy.shape, pm.pack(policy), 1e-4)
        assert single.value == direct + pen

    def test_duplicated_task_mean_invariance(self):
        model, policy, tasks, cb, x0 = small_instance(6)
        one = multi_task_objective(model, policy, [tasks[0]], cb, x0, 3)
        two = multi_task_objective(model, policy, [tasks[0], tasks[0]], cb, x0, 3)
        assert one.value == two.value

    def test_task_permutation_invariance(self):
        model, policy, tasks, cb, x0 = small_instance(7)
        ab = multi_task_objective(model, policy, tasks, cb, x0, 3)
        ba = multi_task_objective(model, policy, tasks[::-1], cb, x0, 3)
        assert abs(ab.value - ba.value) <= 1e-12
        assert np.max(np.abs(ab.grad - ba.grad)) <= 1e-12

    def test_value_is_mean_of_per_task_plus_penalty(self):
        model, policy, tasks, cb, x0 = small_instance(8)
        obj = multi_task_objective(model, policy, tasks, cb, x0, 3)
        pen, _ = regularization(policy.shape, pm.pack(policy), 1e-4)
        mean = np.mean([j for _, j in obj.per_task])
        assert abs(obj.value - (mean + pen)) <= 1e-12

    def test_gradient_matches_finite_differences(self):
        model, policy, tasks, cb, x0 = small_instance(9)
        obj = multi_task_objective(model, policy, tasks, cb, x0, 3)
        theta = pm.pack(policy)
        h = 1e-5
        for j in range(0, theta.size, 3):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            vp = multi_task_objective(model, pm.unpack(tp, policy.shape), tasks, cb, x0, 3).value
            vm = multi_task_objective(model, pm.unpack(tm, policy.shape), tasks, cb, x0, 3).value
            fd = (vp - vm) / (2 * h)
            if abs(fd) > 1e-7:
                assert abs(obj.grad[j] - fd) / abs(fd) <= 1e-4
            else:
                assert abs(obj.grad[j] - fd) <= 1e-7

    def test_monotone_horizon(self):
        model, policy, tasks, cb, x0 = small_instance(10)
        v3 = multi_task_objective(model, policy, tasks, cb, x0, 3).value
        v4 = multi_task_objective(model, policy, tasks, cb, x0, 4).value
        assert v4 >= v3 - 1e-12

    def test_identity_task_folds_into_policy(self):
        # a deterministic IDENTITY task equals baking the constant into
        # the RBF policy and rolling out with an empty task block
        model, policy, tasks, cb, x0 = small_instance(11)
        task = TaskSpec(np.array([0.4]), np.zeros((1, 1)), Relation.IDENTITY)
        cost = cb(task)
        full = expected_long_term_cost(model, policy, task, cost, x0, 3)

        # fold: absorb the eta coordinate of each basis into its weight
        d = 2
        eta = 0.4
        w_g = np.exp(policy.log_widths[d])
        scale = np.exp(-0.5 * (eta - policy.centers[:, d]) ** 2 / w_g**2)
        folded = pm.RbfPolicy(
            centers=policy.centers[:, :d],
            weights=policy.weights * scale[:, None],
            log_widths=policy.log_widths[:d],
            u_max=policy.u_max,
            feature_map=FeatureMap.identity(d),
        )
        empty_task = TaskSpec(np.zeros(0), np.zeros((0, 0)), Relation.IDENTITY)
        folded_val = expected_long_term_cost(model, folded, empty_task, cost, x0, 3)
        assert abs(full - folded_val) <= 1e-12

    def test_empty_task_list_rejected(self):
        model, policy, tasks, cb, x0 = small_instance(12)
        with pytest.raises(DimensionError):
            multi_task_objective(model, policy, [], cb, x0, 3)

    def test_difference_relation_instance(self):
        model, policy, tasks, cb, x0 = small_instance(13, task_rel=Relation.DIFFERENCE)
        obj = multi_task_objective(model, policy, tasks, cb, x0, 3)
        assert np.isfinite(obj.value)
        assert obj.grad.shape == pm.pack(policy).shape

    def test_episode_task_noise_mode(self):
        model, policy, tasks, cb, x0 = small_instance(14, task_rel=Relation.DIFFERENCE)
        per_step = multi_task_objective(model, policy, tasks, cb, x0, 3)
        episode = multi_task_objective(
            model, policy, tasks, cb, x0, 3, episode_task_noise=True
        )
        assert np.isfinite(episode.value)
        # with zero task covariance the two modes coincide
        t0 = [TaskSpec(t.eta, np.zeros((1, 1)), t.relation, mask=t.mask) for t in tasks]
        a = multi_task_objective(model, policy, t0, cb, x0, 3)
        b = multi_task_objective(model, policy, t0, cb, x0, 3, episode_task_noise=True)
        assert abs(a.value - b.value) <= 1e-12
        assert np.max(np.abs(a.grad - b.grad)) <= 1e-10
