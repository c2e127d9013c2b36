import inspect
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from virl.prob import DimensionError, Gaussian, RngStream
from virl.tasks import (ExpertSet, GridWalkerTask, RandomGaussiansTask, ess_sample, grid_walker_log_density,
                        grid_walker_positions, make_expert_set, random_gaussians_make, task_from_spec)

MODE_ANGLE = math.acos(0.8)


def local_precision(f, x, h=1e-4):
    """Negative Hessian of ``f`` at ``x`` by central differences."""
    d = len(x)
    H = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            ei, ej = np.eye(d)[i] * h, np.eye(d)[j] * h
            H[i, j] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return -H


def within_three_sigma(task, samples):
    """Mask of samples inside the Mahalanobis 3-sigma ellipse of their nearest mode."""
    centers = task.mode_centers()
    P = local_precision(task.expert_log_density, centers[0])
    # all modes share the same curvature up to the angle prior's tiny asymmetry
    diff = samples - centers[task.nearest_mode(samples)]
    return np.einsum("ni,ij,nj->n", diff, P, diff) <= 9.0


def rejection_sample(task, n_proposals, rng):
    lo, hi = task.angle_box
    x = rng.uniform(lo, hi, (n_proposals, task.d))
    # upper bound: every step at its best height, plus the log count of heights, plus the prior mode
    bound = sum(-0.5 * math.log(2 * math.pi * task.waypoint_variance) + math.log(i + 1)
                for i in range(1, task.d + 1))
    bound += float(task.angle_prior().log_pdf(np.zeros(task.d)))
    log_acc = task.expert_log_density(x) - bound
    assert np.all(log_acc <= 0)
    return x[np.log(rng.uniform(size=n_proposals)) < log_acc]


class TestRandomGaussians:
    def test_thirty_components(self):
        assert random_gaussians_make(30).target.n_components == 30

    def test_single_component_is_gaussian(self):
        task = RandomGaussiansTask(1, seed=4)
        comp = task.target.components[0]
        x = RngStream(0).normal((20, 2))
        np.testing.assert_allclose(task.log_density(x), comp.log_pdf(x), rtol=1e-12)

    def test_same_seed_same_target(self):
        a, b = RandomGaussiansTask(7, seed=3), RandomGaussiansTask(7, seed=3)
        np.testing.assert_array_equal(a.target.log_weights, b.target.log_weights)
        for ca, cb in zip(a.target.components, b.target.components):
            np.testing.assert_array_equal(ca.mean, cb.mean)
            np.testing.assert_array_equal(ca.covariance_factor, cb.covariance_factor)

    def test_different_seed_differs(self):
        assert not np.allclose(RandomGaussiansTask(5, seed=0).target.means, RandomGaussiansTask(5, seed=1).target.means)

    def test_zero_components_raise(self):
        with pytest.raises(ValueError):
            RandomGaussiansTask(0)

    @pytest.mark.parametrize("m", [1, 5, 10, 50])
    def test_standardized_moments(self, m):
        task = RandomGaussiansTask(m, seed=2)
        mu, cov = task.target.moments()
        np.testing.assert_allclose(mu, 0.0, atol=1e-12)
        np.testing.assert_allclose(np.mean(np.sqrt(np.diag(cov))), task.scale, rtol=1e-12)

    def test_weights_normalized(self):
        lw = RandomGaussiansTask(12, seed=5).target.log_weights
        np.testing.assert_allclose(np.exp(lw).sum(), 1.0, atol=1e-10)

    def test_condition_number_bounded(self):
        task = RandomGaussiansTask(20, seed=1)
        ratio = task.eigenvalue_range[1] / task.eigenvalue_range[0]
        for comp in task.target.components:
            eig = np.linalg.eigvalsh(comp.covariance)
            assert eig.max() / eig.min() <= ratio * (1 + 1e-9)

    def test_spec_round_trip(self):
        task = RandomGaussiansTask(6, seed=9)
        again = task_from_spec(task.spec())
        np.testing.assert_array_equal(again.target.means, task.target.means)


class TestGridWalkerPositions:
    def test_zero_angles(self):
        pos = grid_walker_positions(GridWalkerTask(4), np.zeros(4))
        np.testing.assert_allclose(pos, [[0, 0], [1, 0], [2, 0], [3, 0], [4, 0]], atol=1e-15)

    def test_quarter_turn(self):
        np.testing.assert_allclose(grid_walker_positions(GridWalkerTask(1), [math.pi / 2]), [[0, 0], [0, 1]],
                                   atol=1e-15)

    def test_up_then_down(self):
        pos = grid_walker_positions(GridWalkerTask(2), [MODE_ANGLE, -MODE_ANGLE])
        np.testing.assert_allclose(pos[1], [0.8, 0.6], atol=1e-12)
        np.testing.assert_allclose(pos[2], [1.6, 0.0], atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            grid_walker_positions(GridWalkerTask(3), np.zeros(2))

    def test_batch_shape(self):
        assert GridWalkerTask(3).positions(np.zeros((5, 3))).shape == (5, 4, 2)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-math.pi, math.pi, allow_nan=False), min_size=1, max_size=8))
    def test_unit_steps(self, angles):
        pos = GridWalkerTask(len(angles)).positions(np.array(angles))
        np.testing.assert_allclose(np.linalg.norm(np.diff(pos, axis=0), axis=1), 1.0, atol=1e-12)


class TestGridWalkerDensity:
    @pytest.mark.parametrize("d", [1, 2, 3, 5])
    def test_mode_center_value(self, d):
        task = GridWalkerTask(d)
        expected = d * (-0.5 * math.log(2 * math.pi * 1e-3))
        np.testing.assert_allclose(task.log_density(task.mode_centers()), expected, rtol=1e-12)

    def test_thirty_two_modes_for_five_steps(self):
        assert len(GridWalkerTask(5).mode_centers()) == 32

    def test_mode_centers_are_local_maxima(self):
        task = GridWalkerTask(3)
        rng = RngStream(2)
        for c in task.mode_centers():
            nearby = c + 0.02 * rng.normal((50, 3))
            assert np.all(task.log_density(nearby) < task.log_density(c))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            grid_walker_log_density(GridWalkerTask(2), np.zeros(3))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1.2, 1.2, allow_nan=False), min_size=1, max_size=6))
    def test_sign_flip_symmetry(self, angles):
        task = GridWalkerTask(len(angles))
        x = np.array(angles)
        np.testing.assert_allclose(task.log_density(-x), task.log_density(x), rtol=1e-12, atol=1e-9)

    def test_single_and_batch_agree(self):
        task = GridWalkerTask(3)
        x = RngStream(0).uniform(-1, 1, (4, 3))
        np.testing.assert_allclose([task.log_density(row) for row in x], task.log_density(x), rtol=1e-14)


class TestEllipticalSlice:
    def test_flat_likelihood_reproduces_prior(self):
        prior = Gaussian.from_covariance([1.0, -2.0], [[2.0, 0.6], [0.6, 1.0]])
        x = ess_sample(prior.log_pdf, prior, RngStream(0), 10_000, burn_in=100, thinning=5, n_chains=50)
        se = np.sqrt(np.diag(prior.covariance) / 10_000)
        # thinned draws are close to independent; 6 standard errors leaves room for residual correlation
        assert np.all(np.abs(x.mean(axis=0) - prior.mean) < 6 * se)
        np.testing.assert_allclose(np.cov(x.T), prior.covariance, rtol=0.1, atol=0.05)

    def test_conjugate_posterior(self):
        prior = Gaussian.standard(2, 2.0)
        lik = Gaussian.from_covariance([1.0, 0.5], [[0.5, 0.2], [0.2, 0.3]])
        post_prec = prior.precision + lik.precision
        post_cov = np.linalg.inv(post_prec)
        post_mean = post_cov @ (lik.precision @ lik.mean)
        x = ess_sample(lambda z: prior.log_pdf(z) + lik.log_pdf(z), prior, RngStream(1), 10_000,
                       burn_in=200, thinning=10, n_chains=20)
        emp = np.cov(x.T)
        assert np.linalg.norm(emp - post_cov) / np.linalg.norm(post_cov) < 0.1
        np.testing.assert_allclose(x.mean(axis=0), post_mean, atol=0.05)

    def test_returns_exact_count(self):
        prior = Gaussian.standard(1)
        assert ess_sample(prior.log_pdf, prior, RngStream(0), 7, burn_in=5, thinning=2, n_chains=3).shape == (7, 1)

    def test_non_finite_start_raises(self):
        prior = Gaussian.standard(1)
        with pytest.raises(ValueError, match="not finite"):
            ess_sample(lambda z: np.where(np.abs(z[:, 0]) < 1, -np.inf, 0.0), prior, RngStream(0), 5)

    def test_invalid_count_raises(self):
        prior = Gaussian.standard(1)
        with pytest.raises(ValueError):
            ess_sample(prior.log_pdf, prior, RngStream(0), 0)


class TestExpertSet:
    def test_default_size(self):
        assert inspect.signature(make_expert_set).parameters["M"].default == 8000

    def test_single_sample(self):
        task = GridWalkerTask(2)
        e = make_expert_set(task, 1, RngStream(0), burn_in=50)
        assert e.samples.shape == (1, 2)
        assert np.isfinite(task.expert_log_density(e.samples[0]))

    @pytest.mark.parametrize("task", [RandomGaussiansTask(5, seed=1), GridWalkerTask(2)], ids=["gaussians", "walker"])
    def test_bit_reproducible(self, task):
        a = make_expert_set(task, 300, RngStream(11), burn_in=100)
        b = make_expert_set(task, 300, RngStream(11), burn_in=100)
        assert a.samples.tobytes() == b.samples.tobytes()
        assert a.provenance == b.provenance

    def test_provenance_records_task_and_seed(self):
        e = make_expert_set(RandomGaussiansTask(3, seed=2), 10, RngStream(5))
        assert e.provenance["task"]["m"] == 3
        assert e.provenance["rng_seed"] == 5
        assert e.provenance["sampler"]["name"] == "ancestral"

    def test_save_load_round_trip(self, tmp_path):
        e = make_expert_set(RandomGaussiansTask(4, seed=0), 50, RngStream(0))
        e.save(tmp_path / "experts.csv")
        back = ExpertSet.load(tmp_path / "experts.csv")
        np.testing.assert_array_equal(back.samples, e.samples)
        assert back.provenance == e.provenance

    def test_sidecar_shape_mismatch(self, tmp_path):
        e = ExpertSet(np.ones((3, 2)), {"task": {"kind": "x"}})
        e.save(tmp_path / "e.csv")
        np.savetxt(tmp_path / "e.csv", np.ones((4, 2)), delimiter=",")
        with pytest.raises(ValueError, match="sidecar"):
            ExpertSet.load(tmp_path / "e.csv")

    def test_walker_two_steps_against_rejection_oracle(self):
        task = GridWalkerTask(2)
        experts = make_expert_set(task, 4000, RngStream(0)).samples
        oracle = rejection_sample(task, 2_000_000, RngStream(1))
        assert len(oracle) > 1000
        ess_frac = within_three_sigma(task, experts).mean()
        oracle_frac = within_three_sigma(task, oracle).mean()
        assert ess_frac >= 0.95
        assert abs(ess_frac - oracle_frac) < 0.03

    def test_walker_three_steps_mode_masses_match_oracle(self):
        task = GridWalkerTask(3)
        experts = make_expert_set(task, 4000, RngStream(0)).samples
        oracle = rejection_sample(task, 4_000_000, RngStream(2))
        p_ess = np.bincount(task.nearest_mode(experts), minlength=8) / len(experts)
        p_oracle = np.bincount(task.nearest_mode(oracle), minlength=8) / len(oracle)
        # binomial noise of both estimates at the observed sample sizes
        se = np.sqrt(p_oracle * (1 - p_oracle) * (1 / len(experts) + 1 / len(oracle)))
        assert np.all(np.abs(p_ess - p_oracle) < 4 * se + 0.02)

    def test_walker_five_steps_covers_all_modes(self):
        task = GridWalkerTask(5)
        experts = make_expert_set(task, 8000, RngStream(0)).samples
        frac = np.bincount(task.nearest_mode(experts), minlength=32) / len(experts)
        assert frac.min() >= 0.01
