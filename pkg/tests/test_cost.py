"""Saturating cost: pointwise values, exact expectations, gradients."""

import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from mtpolicy import cost as cm
from mtpolicy.errors import DimensionError
from mtpolicy.gaussian import GaussianDist


class TestImmediate:
    def test_zero_at_target(self):
        c = cm.target_cost(np.array([0.3, -0.7]))
        assert cm.immediate(c, np.array([0.3, -0.7])) == 0.0

    def test_saturates_to_one(self):
        c = cm.target_cost(np.zeros(2))
        assert abs(cm.immediate(c, np.array([50.0, 50.0])) - 1.0) <= 1e-12

    def test_cartpole_upright_offset_band(self):
        # pendulum upright, cart offset 0.20 m: published per-step cost "about 0.4"
        c = cm.cartpole_cost(eta=0.0, pole_length=0.6)
        v = cm.immediate(c, np.array([0.2, 0.0, np.pi, 0.0]))
        assert 0.25 <= v <= 0.45

    def test_cartpole_zero_exactly_at_goal(self):
        c = cm.cartpole_cost(eta=0.4, pole_length=0.6)
        for k in (-1, 0, 1, 2):
            assert cm.immediate(c, np.array([0.4, 0.0, np.pi + 2 * np.pi * k, 0.0])) <= 1e-12

    def test_range(self, rng):
        c = cm.cartpole_cost(eta=0.0, pole_length=0.6)
        for _ in range(100):
            v = cm.immediate(c, rng.normal(size=4) * 3)
            assert 0.0 <= v <= 1.0

    def test_dim_check(self):
        with pytest.raises(DimensionError):
            cm.immediate(cm.target_cost(np.zeros(2)), np.zeros(3))


def gauss_hermite_expected(c, state, order=60):
    nodes, wts = hermegauss(order)
    d = state.dim
    chol = np.linalg.cholesky(state.cov + 1e-300 * np.eye(d))
    if d == 1:
        xs = state.mean[0] + chol[0, 0] * nodes
        vals = np.array([cm.immediate(c, np.array([x])) for x in xs])
        return float(np.sum(wts * vals) / np.sqrt(2 * np.pi))
    total = 0.0
    for i, xi in enumerate(nodes):
        for j, xj in enumerate(nodes):
            x = state.mean + chol @ np.array([xi, xj])
            total += wts[i] * wts[j] * cm.immediate(c, x)
    return float(total / (2 * np.pi))


class TestExpected:
    def test_deterministic_reduction(self, rng):
        c = cm.target_cost(rng.normal(size=2))
        m = rng.normal(size=2)
        val = cm.expected(c, GaussianDist(m, np.zeros((2, 2))))
        assert abs(val - cm.immediate(c, m)) <= 1e-12

    def test_scalar_closed_form(self):
        # mu at target: 1 - (1 + 2 a s)^(-1/2)
        a = 8.0
        for s in (0.01, 0.3, 2.0):
            c = cm.target_cost(np.array([0.0]))
            v = cm.expected(c, GaussianDist(np.array([0.0]), np.array([[s]])))
            assert abs(v - (1 - (1 + 2 * a * s) ** -0.5)) <= 1e-12

    def test_matches_quadrature(self, rng):
        for _ in range(10):
            d = int(rng.integers(1, 3))
            q = np.diag(rng.uniform(0.5, 4.0, size=d))
            c = cm.target_cost(rng.normal(size=d), q)
            a = rng.normal(size=(d, d)) * 0.6
            state = GaussianDist(rng.normal(size=d), a @ a.T + 0.01 * np.eye(d))
            val = cm.expected(c, state)
            assert abs(val - gauss_hermite_expected(c, state)) <= 1e-8

    def test_total_uncertainty_saturates(self):
        c = cm.target_cost(np.zeros(2))
        v = cm.expected(c, GaussianDist(np.zeros(2), 1e6 * np.eye(2)))
        assert v >= 1.0 - 1e-3

    def test_monotone_in_variance_at_target(self):
        c = cm.target_cost(np.array([0.5]))
        prev = -1.0
        for s in np.linspace(0.0, 5.0, 30):
            v = cm.expected(c, GaussianDist(np.array([0.5]), np.array([[s]])))
            assert v >= prev - 1e-12
            prev = v

    def test_gradients(self, rng):
        c = cm.target_cost(rng.normal(size=2), np.diag(rng.uniform(1, 3, 2)))
        m = rng.normal(size=2)
        a = rng.normal(size=(2, 2)) * 0.4
        s = a @ a.T + 0.05 * np.eye(2)
        val, grads = cm.expected(c, GaussianDist(m, s), with_grads=True)
        assert np.array_equal(grads.dcov, grads.dcov.T)
        h = 1e-6
        for k in range(2):
            mp, mm = m.copy(), m.copy()
            mp[k] += h
            mm[k] -= h
            fd = (cm.expected(c, GaussianDist(mp, s)) - cm.expected(c, GaussianDist(mm, s))) / (2 * h)
            assert abs(grads.dmean[k] - fd) <= 1e-5 * max(abs(fd), 1e-3)
        for i in range(2):
            for j in range(2):
                sp, sm = s.copy(), s.copy()
                sp[i, j] += h
                sp[j, i] += h if i != j else 0.0
                sm[i, j] -= h
                sm[j, i] -= h if i != j else 0.0
                fd = (cm.expected(c, GaussianDist(m, sp)) - cm.expected(c, GaussianDist(m, sm))) / (2 * h)
                an = grads.dcov[i, j] + (grads.dcov[j, i] if i != j else 0.0)
                assert abs(an - fd) <= 1e-5 * max(abs(fd), 1e-3)

    def test_range_bounds(self, rng):
        c = cm.cartpole_cost(eta=0.3, pole_length=0.6)
        for _ in range(30):
            a = rng.normal(size=(4, 4)) * 0.5
            state = GaussianDist(rng.normal(size=4), a @ a.T)
            v = cm.expected(c, state)
            assert 0.0 <= v <= 1.0

    def test_trig_feature_moments_match_monte_carlo(self, rng):
        # the (sin, cos) block of the extended state carries the exact
        # first two moments of the true distribution
        import jax.numpy as jnp

        from mtpolicy import _mm

        m = np.array([0.1, 0.0, 2.5, 0.0])
        a = rng.normal(size=(4, 4)) * 0.3
        s = a @ a.T + 0.01 * np.eye(4)
        me, se = _mm.extend_trig(jnp.asarray(m), jnp.asarray(s), (2,))
        me, se = np.asarray(me), np.asarray(se)
        n = 1_000_000
        xs = GaussianDist(m, s).sample(rng, n)
        ext = np.column_stack([xs, np.sin(xs[:, 2]), np.cos(xs[:, 2])])
        b_mean = ext.reshape(100, -1, 6).mean(axis=1)
        assert np.all(np.abs(me - b_mean.mean(axis=0)) <= 4 * b_mean.std(axis=0, ddof=1) / 10 + 1e-12)
        b_cov = np.stack([np.cov(chunk.T) for chunk in ext.reshape(100, -1, 6)])
        assert np.all(np.abs(se - b_cov.mean(axis=0)) <= 4 * b_cov.std(axis=0, ddof=1) / 10 + 1e-12)

    def test_trig_cost_closed_form_on_feature_gaussian(self, rng):
        # given the trig-extended Gaussian, the determinant-scaled
        # exponential is exact: cross-check with 2-D quadrature on the
        # feature distribution
        import jax.numpy as jnp

        from mtpolicy import _mm

        c = cm.cartpole_cost(eta=0.2, pole_length=0.6)
        m = np.array([0.1, 0.0, 2.5, 0.0])
        a = rng.normal(size=(4, 4)) * 0.3
        s = a @ a.T + 0.01 * np.eye(4)
        val = cm.expected(c, GaussianDist(m, s))
        me, se = _mm.extend_trig(jnp.asarray(m), jnp.asarray(s), (2,))
        md = c.feat_lin @ np.asarray(me) + c.feat_off
        sd = c.feat_lin @ np.asarray(se) @ c.feat_lin.T
        nodes, wts = hermegauss(160)
        chol = np.linalg.cholesky(sd)
        total = 0.0
        for i, xi in enumerate(nodes):
            for j, xj in enumerate(nodes):
                d = md + chol @ np.array([xi, xj])
                total += wts[i] * wts[j] * (1 - np.exp(-0.5 * d @ c.weight @ d))
        quad = total / (2 * np.pi)
        assert abs(val - quad) <= 1e-8
