"""Controller banks: nearest-neighbor selection and gating-network weights."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtpolicy import baselines, policy as pm
from mtpolicy.gaussian import FeatureMap, GaussianDist, Relation, TaskSpec

PAPER_KAPPA = 0.0068  # m^2, the published grid-search optimum


def make_bank(etas, rng=None, kappa=PAPER_KAPPA):
    rng = rng or np.random.default_rng(0)
    fm = FeatureMap.identity(3)
    shape = pm.PolicyShape("rbf", fm, 1, 3, (2.0,))
    entries = []
    for eta in etas:
        task = TaskSpec(np.array([eta]), np.zeros((1, 1)), Relation.DIFFERENCE, mask=(0,))
        init = pm.PolicyInit(GaussianDist(np.zeros(2), 0.1 * np.eye(2)), (task,))
        entries.append((task, pm.init_random(shape, rng, init)))
    return baselines.LocalPolicyBank(tuple(entries), kappa=kappa)


class TestNnSelect:
    def test_paper_tasks_nearest(self):
        bank = make_bank([1.0, -1.0, 0.5, -0.5, 0.0])
        idx = baselines.nn_select(bank, np.array([0.7]))
        assert bank.entries[idx][0].eta[0] == 0.5

    def test_exact_training_task(self):
        bank = make_bank([1.0, -1.0, 0.5, -0.5, 0.0])
        idx = baselines.nn_select(bank, np.array([-0.5]))
        assert bank.entries[idx][0].eta[0] == -0.5

    def test_tie_breaks_to_lowest_index(self):
        bank = make_bank([0.5, 1.0])
        assert baselines.nn_select(bank, np.array([0.75])) == 0


class TestGatingWeights:
    def test_training_task_dominates(self):
        bank = make_bank([1.0, -1.0, 0.5, -0.5, 0.0])
        w = baselines.gating_weights(bank, np.array([0.5]))
        assert w[2] > 0.99

    def test_symmetric_midpoint(self):
        bank = make_bank([-0.5, 0.5])
        w = baselines.gating_weights(bank, np.array([0.0]))
        np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-12)

    def test_large_kappa_uniform(self):
        bank = make_bank([-1.0, 0.0, 1.0], kappa=1e12)
        w = baselines.gating_weights(bank, np.array([0.3]))
        np.testing.assert_allclose(w, np.full(3, 1 / 3), atol=1e-9)

    @given(st.integers(0, 2**32 - 1))
    def test_sum_to_one_positive(self, seed):
        r = np.random.default_rng(seed)
        bank = make_bank(sorted(r.uniform(-1.5, 1.5, size=4)), rng=r,
                         kappa=float(r.uniform(1e-3, 1.0)))
        w = baselines.gating_weights(bank, r.uniform(-2, 2, size=1))
        assert np.all(w > 0)
        assert abs(w.sum() - 1.0) <= 1e-12

    def test_shift_invariance(self):
        # tasks in 2-D on a line; moving eta off the line adds the same
        # constant to every squared distance and must not change weights
        fm = FeatureMap.identity(4)
        shape = pm.PolicyShape("rbf", fm, 1, 2, (2.0,))
        rng = np.random.default_rng(1)
        entries = []
        for eta in ([-1.0, 0.0], [0.4, 0.0], [1.2, 0.0]):
            task = TaskSpec(np.array(eta), np.zeros((2, 2)), Relation.IDENTITY)
            init = pm.PolicyInit(GaussianDist(np.zeros(2), 0.1 * np.eye(2)), (task,))
            entries.append((task, pm.init_random(shape, rng, init)))
        bank = baselines.LocalPolicyBank(tuple(entries), kappa=0.05)
        w0 = baselines.gating_weights(bank, np.array([0.3, 0.0]))
        w1 = baselines.gating_weights(bank, np.array([0.3, 0.8]))
        np.testing.assert_allclose(w0, w1, atol=1e-12)


class TestCombinedControl:
    def test_single_entry_equals_policy(self, rng):
        bank = make_bank([0.3])
        x = rng.normal(size=2)
        task, pol = bank.entries[0]
        expected = pm.eval_policy(pol, np.concatenate([x, [0.7 - x[0]]]))
        got = baselines.combined_control(bank, x, np.array([0.7]), mode="gating")
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_one_hot_weights_select_policy(self, rng):
        bank = make_bank([-1.0, 1.0], kappa=1e-6)
        x = rng.normal(size=2) * 0.1
        got = baselines.combined_control(bank, x, np.array([1.0]), mode="gating")
        nn = baselines.combined_control(bank, x, np.array([1.0]), mode="nn")
        np.testing.assert_allclose(got, nn, atol=1e-9)

    def test_convex_hull(self, rng):
        bank = make_bank([-1.0, 0.0, 1.0], kappa=0.5)
        for _ in range(20):
            x = rng.normal(size=2)
            eta = rng.uniform(-1.2, 1.2, size=1)
            outs = [
                pm.eval_policy(p, baselines._augmented_input(t, x, eta))[0]
                for t, p in bank.entries
            ]
            u = baselines.combined_control(bank, x, eta, mode="gating")[0]
            assert min(outs) - 1e-12 <= u <= max(outs) + 1e-12

    def test_kappa_to_zero_converges_to_nn(self, rng):
        x = rng.normal(size=2) * 0.2
        eta = np.array([0.62])  # away from decision boundaries
        small = make_bank([-1.0, 0.5, 1.0], kappa=1e-5)
        nn_u = baselines.combined_control(small, x, eta, mode="nn")
        gate_u = baselines.combined_control(small, x, eta, mode="gating")
        np.testing.assert_allclose(gate_u, nn_u, atol=1e-8)


class TestSerialization:
    def test_round_trip(self):
        bank = make_bank([-0.5, 0.5])
        text = baselines.to_json(bank)
        again = baselines.from_json(text)
        assert baselines.to_json(again) == text
        assert again.kappa == bank.kappa
