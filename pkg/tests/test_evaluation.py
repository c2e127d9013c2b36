import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from virl.evaluation import (DefensiveProposal, MetricSnapshot, aggregate_trials, estimate_log_normalizer,
                             explored_modes, mode_representation, neg_elbo, reverse_kl_estimate,
                             task_log_normalizer)
from virl.policy import GmmPolicy
from virl.prob import Gaussian, Mixture, RngStream, gaussian_kl, kde_fit
from virl.tasks import GridWalkerTask, random_gaussians_make

N = 20_000


def gauss1(mean, var):
    return Gaussian.from_covariance(np.array([mean]), np.array([[var]]))


def policy_of(*comps, weights=None):
    weights = np.full(len(comps), 1.0 / len(comps)) if weights is None else np.asarray(weights)
    return GmmPolicy(Mixture(np.log(weights), tuple(comps)))


class TestReverseKl:
    @pytest.mark.parametrize("q, p", [
        (gauss1(0.0, 1.0), gauss1(1.0, 1.0)),
        (gauss1(0.0, 0.25), gauss1(0.0, 1.0)),
        (Gaussian.from_covariance(np.zeros(2), np.diag([0.5, 2.0])), Gaussian.standard(2, 1.3)),
    ])
    def test_closed_form_oracle(self, q, p):
        kl, se = reverse_kl_estimate(policy_of(q), p.log_pdf, N, RngStream(0), log_normalizer=0.0,
                                     return_stderr=True)
        np.testing.assert_allclose(kl, gaussian_kl(q, p), atol=4 * se + 1e-12)

    def test_documented_values(self):
        np.testing.assert_allclose(gaussian_kl(gauss1(0.0, 1.0), gauss1(1.0, 1.0)), 0.5, rtol=1e-12)
        np.testing.assert_allclose(gaussian_kl(gauss1(0.0, 0.25), gauss1(0.0, 1.0)),
                                   0.5 * (0.25 - 1 - math.log(0.25)), rtol=1e-12)
        np.testing.assert_allclose(0.5 * (0.25 - 1 - math.log(0.25)), 0.318, atol=5e-4)

    def test_policy_equals_target(self):
        task = random_gaussians_make(3, seed=1)
        pol = GmmPolicy(task.target)
        kl, se = reverse_kl_estimate(pol, task.log_density, N, RngStream(0), log_normalizer=0.0,
                                     return_stderr=True)
        assert abs(kl) <= 3 * se + 1e-12

    @pytest.mark.parametrize("offset", [-40.0, 0.0, 7.5])
    def test_constant_offset_absorbed_by_normalizer(self, offset):
        q, p = gauss1(0.0, 0.25), gauss1(0.3, 1.0)
        kde = kde_fit(p.sample(RngStream(2), 2000))
        kl = reverse_kl_estimate(policy_of(q), lambda x: p.log_pdf(x) + offset, N, RngStream(1), kde=kde)
        np.testing.assert_allclose(kl, gaussian_kl(q, p), atol=0.03)

    def test_offset_invariance_is_exact_for_shared_samples(self):
        q, p = gauss1(0.0, 0.5), gauss1(0.3, 1.0)
        a = reverse_kl_estimate(policy_of(q), p.log_pdf, 2000, RngStream(3))
        b = reverse_kl_estimate(policy_of(q), lambda x: p.log_pdf(x) - 12.0, 2000, RngStream(3))
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_rejects_small_n(self):
        with pytest.raises(ValueError):
            reverse_kl_estimate(policy_of(gauss1(0, 1)), gauss1(0, 1).log_pdf, 999, RngStream(0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError):
            reverse_kl_estimate(policy_of(gauss1(0, 1)), lambda x: np.full(len(x), -np.inf), 1000,
                                RngStream(0), log_normalizer=0.0)


class TestNegElbo:
    def test_reward_is_log_policy(self):
        pol = policy_of(gauss1(-1.0, 0.5), gauss1(2.0, 1.0))
        np.testing.assert_allclose(neg_elbo(pol, pol.log_pdf, 1000, RngStream(0)), 0.0, atol=1e-12)

    def test_constant_shift(self):
        pol = policy_of(gauss1(0.0, 1.0))
        np.testing.assert_allclose(neg_elbo(pol, lambda x: pol.log_pdf(x) + 5.0, 1000, RngStream(0)), -5.0,
                                   atol=1e-12)

    def test_gaussian_cross_entropy(self):
        # -E_q[log p] - H(q) with q = N(0.5, 0.4), p = N(0, 2)
        q, p = gauss1(0.5, 0.4), gauss1(0.0, 2.0)
        cross = 0.5 * math.log(2 * math.pi * 2.0) + (0.4 + 0.25) / (2 * 2.0)
        expected = cross - q.entropy()
        value, se = neg_elbo(policy_of(q), p.log_pdf, N, RngStream(0), return_stderr=True)
        np.testing.assert_allclose(value, expected, atol=4 * se)
        np.testing.assert_allclose(expected, gaussian_kl(q, p), rtol=1e-12)

    def test_rejects_small_n(self):
        with pytest.raises(ValueError):
            neg_elbo(policy_of(gauss1(0, 1)), gauss1(0, 1).log_pdf, 10, RngStream(0))

    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError):
            neg_elbo(policy_of(gauss1(0, 1)), lambda x: np.full(len(x), np.nan), 1000, RngStream(0))


class TestLogNormalizer:
    def test_recovers_known_constant(self):
        p = Gaussian.standard(2, 0.7)
        proposal = DefensiveProposal(kde_fit(p.sample(RngStream(0), 500)), Gaussian.standard(2, 2.0))
        log_z, se = estimate_log_normalizer(lambda x: p.log_pdf(x) + 3.0, proposal, N, RngStream(1))
        np.testing.assert_allclose(log_z, 3.0, atol=max(4 * se, 1e-3))

    def test_random_gaussians_are_normalized(self):
        task = random_gaussians_make(5, seed=0)
        assert task_log_normalizer(task, np.zeros((3, 2)), RngStream(0)) == 0.0

    def test_grid_walker_matches_quadrature(self):
        task = GridWalkerTask(d=1)
        signs = np.where(RngStream(0).uniform(size=(2000, 1)) < 0.5, -1.0, 1.0)
        expert = signs * task.mode_angle + 0.01 * RngStream(1).normal((2000, 1))
        grid = np.linspace(-math.pi, math.pi, 400_001)
        vals = np.exp(task.expert_log_density(grid[:, None]))
        oracle = math.log(integrate.trapezoid(vals, grid))
        np.testing.assert_allclose(task_log_normalizer(task, expert, RngStream(1), 50_000), oracle, atol=0.02)


class TestMetricSnapshot:
    def test_flags_small_negative(self):
        assert MetricSnapshot(0, -0.01, 0.0, 1.0, 0.0).flagged
        assert not MetricSnapshot(0, 0.01, 0.0, 1.0, 0.0).flagged

    def test_rejects_large_negative(self):
        with pytest.raises(ValueError):
            MetricSnapshot(0, -0.2, 0.0, 1.0, 0.0)


class TestModeRepresentation:
    def test_shapes_for_five_steps(self):
        task = GridWalkerTask(d=5)
        rep = mode_representation(task.log_density, task, 100, RngStream(0))
        assert rep.mode_center_scores.shape == (32,)
        assert rep.negative_sample_scores.shape == (100,)

    @pytest.mark.parametrize("d", [2, 3, 5])
    def test_true_density_scores_every_center_one(self, d):
        task = GridWalkerTask(d=d)
        rep = mode_representation(task.log_density, task, 100, RngStream(0))
        np.testing.assert_allclose(rep.mode_center_scores, 1.0, atol=1e-12)
        assert not rep.degenerate

    def test_negatives_drawn_from_angle_box(self):
        task = GridWalkerTask(d=3)
        seen = []
        mode_representation(lambda x: seen.append(x) or np.zeros(len(x)), task, 100, RngStream(0))
        lo = -1.2 * math.acos(0.8)
        np.testing.assert_allclose(task.angle_box, (lo, -lo))
        assert np.all((seen[1] >= lo) & (seen[1] <= -lo))

    def test_constant_reward_is_degenerate(self):
        task = GridWalkerTask(d=2)
        rep = mode_representation(lambda x: np.full(len(x), 3.0), task, 100, RngStream(0))
        assert rep.degenerate
        scores = np.concatenate([rep.mode_center_scores, rep.negative_sample_scores])
        assert np.all(scores == scores[0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_union_spans_unit_interval(self, seed):
        task = GridWalkerTask(d=2)
        w = RngStream(seed).normal(2)
        rep = mode_representation(lambda x: np.sin(x @ w), task, 30, RngStream(seed))
        scores = np.concatenate([rep.mode_center_scores, rep.negative_sample_scores])
        assert scores.min() == 0.0
        assert scores.max() == 1.0

    def test_to_dict(self):
        task = GridWalkerTask(d=2)
        out = mode_representation(task.log_density, task, 10, RngStream(0)).to_dict()
        assert len(out["mode_center_scores"]) == 4
        assert len(out["negative_sample_scores"]) == 10


class TestExploredModes:
    def test_marks_nearest_centers_of_heavy_components(self):
        task = GridWalkerTask(d=2)
        centers = task.mode_centers()
        comps = [Gaussian(centers[0] + 0.05, 0.1 * np.eye(2)), Gaussian(centers[3], 0.1 * np.eye(2)),
                 Gaussian(centers[1], 0.1 * np.eye(2))]
        pol = policy_of(*comps, weights=[0.6, 0.39, 0.01])
        np.testing.assert_array_equal(explored_modes(pol, task), [True, False, False, True])


class TestAggregateTrials:
    def test_documented_example(self):
        assert aggregate_trials([[3, 1, 2]])["mean"] == 1.5

    def test_monotone_trace_gives_final_value(self):
        out = aggregate_trials([[5.0, 4.0, 2.5]])
        assert out["mean"] == 2.5
        assert out["std"] == 0.0

    def test_mean_and_std_over_trials(self):
        out = aggregate_trials([[3, 1, 2], [1.0], [4, 3]])
        np.testing.assert_allclose(out["per_trial"], [1.5, 1.0, 3.0])
        np.testing.assert_allclose(out["mean"], np.mean([1.5, 1.0, 3.0]), rtol=1e-15)
        np.testing.assert_allclose(out["std"], np.std([1.5, 1.0, 3.0], ddof=1), rtol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), min_size=1, max_size=5),
           st.randoms(use_true_random=False))
    def test_permutation_invariant(self, traces, rnd):
        shuffled = list(traces)
        rnd.shuffle(shuffled)
        a, b = aggregate_trials(traces), aggregate_trials(shuffled)
        assert a["mean"] == b["mean"]
        assert a["std"] == b["std"]

    @pytest.mark.parametrize("traces", [[], [[]]])
    def test_rejects_empty(self, traces):
        with pytest.raises(ValueError):
            aggregate_trials(traces)

    def test_every_permutation_of_three(self):
        traces = [[0.3, 0.1], [2.0, 1.0, 1.5], [0.7]]
        results = {aggregate_trials(list(p))["mean"] for p in itertools.permutations(traces)}
        assert len(results) == 1
