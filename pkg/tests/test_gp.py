"""GP dynamics model: fitting, marginal likelihood, prediction, persistence."""

import numpy as np
import pytest

from mtpolicy import gp, optim
from mtpolicy.errors import DimensionError, ModelFitError
from mtpolicy.gp import GPFitOptions, TransitionDataset, _lml_and_grad, _sqdists


@pytest.fixture(scope="module")
def linear_model():
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, size=(30, 3))
    w = np.array([[0.5, -0.3, 0.2], [0.1, 0.9, -0.4]])
    ds = TransitionDataset(x, x @ w.T, state_dim=2, control_dim=1)
    return gp.fit(ds, GPFitOptions(seed=0)), w


class TestDataset:
    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            TransitionDataset(np.zeros((3, 4)), np.zeros((3, 2)), state_dim=2, control_dim=1)

    def test_non_finite_rejected(self):
        x = np.zeros((2, 3))
        y = np.zeros((2, 2))
        y[0, 0] = np.inf
        with pytest.raises(DimensionError):
            TransitionDataset(x, y, state_dim=2, control_dim=1)

    def test_extend(self):
        ds = TransitionDataset(np.zeros((2, 3)), np.zeros((2, 2)), 2, 1)
        ds2 = ds.extend(np.ones((1, 3)), np.ones((1, 2)))
        assert ds2.n == 3 and ds.n == 2


class TestFit:
    def test_noiseless_linear_function(self, linear_model):
        model, w = linear_model
        rng = np.random.default_rng(99)
        z = rng.uniform(-1.5, 1.5, size=(20, 3))
        pred = np.array([gp.predict_point(model, zi)[0] for zi in z])
        rmse = np.sqrt(np.mean((pred - z @ w.T) ** 2))
        assert rmse <= 1e-3
        assert np.all(np.exp(model.log_sn2) <= 1e-3)

    def test_two_points_interpolated(self):
        ds = TransitionDataset(
            np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([[0.3], [0.9]]), 1, 1
        )
        model = gp.fit(ds, GPFitOptions(seed=1))
        for z, y in (([0.0, 0.0], 0.3), ([1.0, 1.0], 0.9)):
            mean, _ = gp.predict_point(model, np.array(z))
            assert abs(mean[0] - y) <= 3 * np.exp(0.5 * model.log_sn2[0])

    def test_duplicate_inputs_identify_noise(self):
        rng = np.random.default_rng(5)
        base = rng.uniform(-1, 1, size=(10, 2))
        x = np.repeat(base, 2, axis=0)
        y = 0.5 * x[:, :1] + rng.normal(scale=0.3, size=(20, 1))
        model = gp.fit(TransitionDataset(x, y, 1, 1), GPFitOptions(seed=2))
        dup_var = np.mean([np.var(y[2 * i : 2 * i + 2, 0], ddof=1) for i in range(10)])
        assert np.exp(model.log_sn2[0]) >= 0.5 * dup_var

    def test_needs_two_points(self):
        ds = TransitionDataset(np.zeros((1, 2)), np.zeros((1, 1)), 1, 1)
        with pytest.raises(ModelFitError):
            gp.fit(ds)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(8)
        ds = TransitionDataset(rng.normal(size=(8, 2)), rng.normal(size=(8, 1)), 1, 1)
        m1 = gp.fit(ds, GPFitOptions(seed=4))
        m2 = gp.fit(ds, GPFitOptions(seed=4))
        assert np.array_equal(m1.log_ell, m2.log_ell)
        assert np.array_equal(m1.beta, m2.beta)


class TestLogMarginalLikelihood:
    def test_single_point_closed_form(self):
        # K + sn2 = 2 with y = 0: -0.5*log(2) - 0.5*log(2*pi)
        sqd = np.zeros((1, 1, 1))
        val, _ = _lml_and_grad(sqd, np.array([0.0]), np.array([0.0, 0.0, 0.0]))
        assert abs(val - (-0.5 * np.log(2.0) - 0.5 * np.log(2 * np.pi))) <= 1e-12

    def test_dense_solve_oracle(self, rng):
        x = rng.normal(size=(5, 2))
        y = rng.normal(size=(5, 1))
        ds = TransitionDataset(x, y, 1, 1)
        model = gp.fit(ds, GPFitOptions(seed=1, restarts=1, max_iters=25))
        val, _ = gp.log_marginal_likelihood(model, 0)
        lam = np.exp(2 * model.log_ell[0])
        diff = x[:, None, :] - x[None, :, :]
        k = np.exp(model.log_sf2[0]) * np.exp(-0.5 * np.sum(diff**2 / lam, axis=2))
        kn = k + np.exp(model.log_sn2[0]) * np.eye(5)
        direct = (
            -0.5 * y[:, 0] @ np.linalg.solve(kn, y[:, 0])
            - 0.5 * np.linalg.slogdet(kn)[1]
            - 2.5 * np.log(2 * np.pi)
        )
        assert abs(val - direct) <= 1e-10

    def test_gradient_matches_finite_differences(self, rng):
        x = rng.normal(size=(10, 2))
        y = rng.normal(size=10)
        sqd = _sqdists(x)
        hyp = np.array([0.3, -0.2, 0.5, -1.0])
        _, grad = _lml_and_grad(sqd, y, hyp)
        h = 1e-6
        for j in range(hyp.size):
            hp, hm = hyp.copy(), hyp.copy()
            hp[j] += h
            hm[j] -= h
            fd = (_lml_and_grad(sqd, y, hp)[0] - _lml_and_grad(sqd, y, hm)[0]) / (2 * h)
            assert abs(grad[j] - fd) <= 1e-5 * max(abs(fd), 1e-3)

    def test_monotone_under_optimizer(self, rng):
        # marginal likelihood never decreases across accepted iterations
        x = rng.normal(size=(12, 2))
        y = np.sin(x[:, 0]) + 0.1 * rng.normal(size=12)
        sqd = _sqdists(x)
        res = optim.minimize(
            lambda h: tuple(-v for v in _lml_and_grad(sqd, y, h)),
            np.zeros(4),
            max_iters=30,
        )
        vals = [t.value for t in res.trace]
        assert all(b <= a for a, b in zip(vals, vals[1:]))


class TestPredictPoint:
    def test_training_point_recovered(self, linear_model):
        model, w = linear_model
        z = model.dataset.inputs[4]
        mean, _ = gp.predict_point(model, z)
        target = model.dataset.targets[4]
        assert np.all(np.abs(mean - target) <= 3 * np.exp(0.5 * model.log_sn2) + 1e-6)

    def test_prior_reversion_far_away(self, linear_model):
        model, _ = linear_model
        # >= 10 lengthscales away from all data in every direction
        z = np.full(3, 1e7)
        mean, var = gp.predict_point(model, z)
        prior = np.exp(model.log_sf2) + np.exp(model.log_sn2)
        assert np.all(np.abs(var / prior - 1.0) <= 0.01)
        assert np.all(np.abs(mean) <= 0.01 * np.sqrt(prior))

    def test_hand_kernel_oracle_1d(self):
        x = np.array([[-0.5], [0.2], [0.9]])
        y = np.array([[0.1], [-0.3], [0.5]])
        model = gp.with_hyperparameters(
            TransitionDataset(x, y, 1, 0),
            (),
            np.array([[np.log(0.4)]]),
            np.array([np.log(1.5)]),
            np.array([np.log(0.01)]),
        )
        z = np.array([0.3])
        k = 1.5 * np.exp(-0.5 * (x[:, 0] - 0.3) ** 2 / 0.4**2)
        kn = 1.5 * np.exp(-0.5 * (x[:, 0, None] - x[None, :, 0]) ** 2 / 0.4**2) + 0.01 * np.eye(3)
        mean_direct = k @ np.linalg.solve(kn, y[:, 0])
        var_direct = 1.5 - k @ np.linalg.solve(kn, k) + 0.01
        mean, var = gp.predict_point(model, z)
        assert abs(mean[0] - mean_direct) <= 1e-10
        assert abs(var[0] - var_direct) <= 1e-10

    def test_variance_floor(self, linear_model, rng):
        model, _ = linear_model
        for _ in range(50):
            z = rng.uniform(-3, 3, size=3)
            _, var = gp.predict_point(model, z)
            assert np.all(var >= np.exp(model.log_sn2) - 1e-9)

    def test_refit_continuity_far_away(self, linear_model):
        model, w = linear_model
        # add one datum; a point >= 10 lengthscales from it barely moves
        new_x = np.full((1, 3), 5.0)
        new_y = new_x @ w.T
        ds2 = model.dataset.extend(new_x, new_y)
        model2 = gp.condition(model, ds2)
        ell_min = np.exp(model.log_ell).min()
        z = np.full(3, 5.0 - 12.0 * max(ell_min, 1.0))
        m1, _ = gp.predict_point(model, z)
        m2, _ = gp.predict_point(model2, z)
        sf = np.exp(0.5 * model.log_sf2)
        assert np.all(np.abs(m1 - m2) <= 1e-3 * sf)


class TestSerialization:
    def test_round_trip_bit_faithful(self, linear_model):
        model, _ = linear_model
        text = gp.to_json(model)
        again = gp.from_json(text)
        assert gp.to_json(again) == text
        assert np.array_equal(again.beta, model.beta)
        assert np.array_equal(again.chol, model.chol)

    def test_version_check(self, linear_model):
        import json

        doc = json.loads(gp.to_json(linear_model[0]))
        doc["format_version"] = 99
        with pytest.raises(ModelFitError):
            gp.from_json(json.dumps(doc))


class TestSubsetSelection:
    def test_farthest_point_deterministic(self, rng):
        x = rng.normal(size=(40, 2))
        a = gp.farthest_point_subset(x, 10)
        b = gp.farthest_point_subset(x, 10)
        assert np.array_equal(a, b)
        assert len(set(a.tolist())) == 10

    def test_small_input_passthrough(self, rng):
        x = rng.normal(size=(5, 2))
        assert np.array_equal(gp.farthest_point_subset(x, 10), np.arange(5))
