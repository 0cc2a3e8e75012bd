import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from otbayes.errors import SingleClass, UnsupportedPrior
from otbayes.inference import (CredibleRegion, DecisionProblem, auc_pair_count, bayes_action,
                               class_posterior, conditional_expectation,
                               credible_region_pushforward, enumerate_bayes_action,
                               map_action, marginal_credible_intervals,
                               prior_confidence_radius, roc_curve, threshold_loss,
                               threshold_problem)
from otbayes.models import (GammaPrior, GaussianPrior, LaplacePrior, LogisticLikelihood,
                            PosteriorTarget)
from otbayes.polybasis import BasisSpec, Family
from otbayes.samples import SampleSet
from otbayes.solver import FitOptions, fit
from otbayes.transportmap import identity_init, push_samples


def _grid_posterior_draws(target, n, seed, half_width=60.0, points=1201):
    """Draws from a 2-d density by cell sampling on a fine grid."""
    g = np.linspace(-half_width, half_width, points)
    h = g[1] - g[0]
    XX, YY = np.meshgrid(g, g)
    P = np.column_stack([XX.ravel(), YY.ravel()])
    lp = target.log_density(P)
    w = np.exp(lp - lp.max())
    w /= w.sum()
    rng = np.random.default_rng(seed)
    idx = rng.choice(w.size, n, p=w)
    return P[idx] + rng.uniform(-h / 2, h / 2, size=(n, 2))


class TestConditionalExpectation:
    def test_gamma_mean(self, gp_fitted, gp_eval):
        Z = push_samples(gp_fitted[0], gp_eval)
        mean, se = conditional_expectation(Z, lambda X: X[:, 0])
        assert abs(mean - 1.0) < 3 * se

    def test_constant(self, gp_eval):
        mean, se = conditional_expectation(gp_eval, lambda X: np.ones(X.shape[0]))
        assert mean == 1.0 and se == 0.0

    def test_tail_probability(self, gp_exact):
        X = gp_exact.sample(20_000, seed=3)
        tau = 2.0
        mean, se = conditional_expectation(X, lambda Z: (Z[:, 0] > tau).astype(float))
        exact = special.gammaincc(3.0, tau / (1.0 / 3.0))
        assert abs(mean - exact) < 3 * se

    def test_vector_valued(self):
        X = np.random.default_rng(0).normal(size=(400, 2))
        mean, se = conditional_expectation(X, lambda Z: Z)
        assert mean.shape == (2,) and se.shape == (2,)

    def test_too_few(self):
        with pytest.raises(ValueError):
            conditional_expectation(np.zeros((1, 1)), lambda Z: Z)


class TestConfidenceRadius:
    def test_two_d(self):
        r = prior_confidence_radius(GaussianPrior.standard(2, var=100.0), 0.05)
        assert math.isclose(r * r, 100 * -2 * math.log(0.05), rel_tol=1e-12)
        assert abs(r - 24.48) < 5e-3

    def test_one_sigma(self):
        alpha = 2 * stats.norm.sf(1.0)
        assert math.isclose(prior_confidence_radius(GaussianPrior.standard(1), alpha), 1.0,
                            rel_tol=1e-10)

    @pytest.mark.parametrize("d", [1, 3, 6])
    def test_chi2_quantile(self, d):
        r = prior_confidence_radius(GaussianPrior.standard(d, var=2.0), 0.1)
        assert math.isclose(r * r / 2.0, stats.chi2.ppf(0.9, d), rel_tol=1e-10)

    def test_alpha_to_one(self):
        r = prior_confidence_radius(GaussianPrior.standard(2), 1 - 1e-12)
        assert r < 1e-5

    def test_non_gaussian_rejected(self):
        with pytest.raises(UnsupportedPrior):
            prior_confidence_radius(LaplacePrior(1.0, dim=2), 0.05)

    def test_anisotropic_rejected(self):
        with pytest.raises(UnsupportedPrior):
            prior_confidence_radius(GaussianPrior(np.zeros(2), np.diag([1.0, 2.0])), 0.05)


class TestPushforwardRegion:
    def test_identity_is_circle(self):
        prior = GaussianPrior.standard(2, var=4.0)
        reg = credible_region_pushforward(identity_init(BasisSpec.from_families(
            [Family.hermite()] * 2, 2)), prior, 0.05, 128)
        r = prior_confidence_radius(prior, 0.05)
        np.testing.assert_allclose(np.linalg.norm(reg.boundary, axis=1), r, rtol=1e-12)
        assert reg.level == pytest.approx(0.95)

    def test_linear_map_is_ellipse(self):
        spec = BasisSpec.from_families([Family.hermite()] * 2, 1)
        base = identity_init(spec)
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        W = np.zeros_like(base.W)
        # identity has unit weight on each x_j column
        cols = [spec.indices.index(tuple(int(i == j) for i in range(2))) for j in range(2)]
        for j, c in enumerate(cols):
            W[:, c] = A[:, j]
        tmap = base.with_weights(W)
        prior = GaussianPrior.standard(2)
        reg = credible_region_pushforward(tmap, prior, 0.05, 64)
        circle = credible_region_pushforward(base, prior, 0.05, 64).boundary
        np.testing.assert_allclose(reg.boundary, circle @ A.T, atol=1e-10)

    def test_logistic_containment(self):
        rng = np.random.default_rng(0)
        mean = np.array([1.0, 0.5])
        F = np.vstack([mean + 1.5 * rng.standard_normal((5, 2)),
                       -mean + 1.5 * rng.standard_normal((5, 2))])
        c = np.r_[np.ones(5), np.zeros(5)].astype(int)
        prior = GaussianPrior.standard(2, var=100.0)
        target = PosteriorTarget(prior, LogisticLikelihood(F, c))
        tmap, _ = fit(target, prior.sample(2000, seed=1), degree=3,
                      opts=FitOptions(strict=False, max_iters=1000))
        reg = credible_region_pushforward(tmap, prior, 0.05, 512)
        oracle = _grid_posterior_draws(target, 10_000, seed=5)
        assert reg.contains(oracle).mean() >= 0.93


class TestEvenOdd:
    SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])

    def test_square(self):
        reg = CredibleRegion("PushforwardBoundary", 0.9, boundary=self.SQUARE)
        pts = np.array([[0.5, 0.5], [1.5, 0.5], [-0.1, 0.2], [0.2, 0.99]])
        np.testing.assert_array_equal(reg.contains(pts), [True, False, False, True])

    def test_concave(self):
        # U shape: the notch is outside
        U = np.array([[0, 0], [3, 0], [3, 3], [2, 3], [2, 1], [1, 1], [1, 3], [0, 3]], float)
        reg = CredibleRegion("PushforwardBoundary", 0.9, boundary=U)
        np.testing.assert_array_equal(reg.contains([[1.5, 2.0], [0.5, 2.0], [2.5, 2.0]]),
                                      [False, True, True])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 5.0), st.floats(-3, 3), st.floats(-3, 3))
    def test_circle_matches_radius(self, r, px, py):
        theta = 2 * np.pi * np.arange(2000) / 2000
        poly = r * np.column_stack([np.cos(theta), np.sin(theta)])
        reg = CredibleRegion("PushforwardBoundary", 0.5, boundary=poly)
        d = math.hypot(px, py)
        if abs(d - r) > 1e-2 * r:
            assert reg.contains([[px, py]])[0] == (d < r)

    def test_bad_level(self):
        with pytest.raises(ValueError):
            CredibleRegion("MarginalIntervals", 1.0, intervals=np.zeros((1, 2)))


class TestMarginalIntervals:
    def test_fifty_per_tail(self):
        X = np.random.default_rng(2).normal(size=(2000, 3))
        reg = marginal_credible_intervals(X, 0.05)
        for j in range(3):
            lo, hi = reg.intervals[j]
            assert lo < hi
            assert np.sum(X[:, j] < lo) == 50 and np.sum(X[:, j] > hi) == 50

    def test_symmetric(self):
        h = np.random.default_rng(3).normal(size=1000)
        X = np.r_[h, -h][:, None]
        lo, hi = marginal_credible_intervals(X).intervals[0]
        assert abs(lo + hi) < 2 / math.sqrt(X.shape[0])

    def test_gamma_quantiles(self, gp_exact):
        X = gp_exact.sample(100_000, seed=11)
        lo, hi = marginal_credible_intervals(X, 0.05).intervals[0]
        q = special.gammaincinv(3.0, [0.025, 0.975]) / 3.0
        np.testing.assert_allclose([lo, hi], q, atol=0.03)

    def test_conjugate_coverage(self):
        # x ~ N(0,1), y | x ~ N(x, 0.5): posterior N(y/1.5, 1/3)
        rng = np.random.default_rng(12)
        hits = 0
        for _ in range(1000):
            x = rng.standard_normal()
            y = x + math.sqrt(0.5) * rng.standard_normal()
            post = y / 1.5 + math.sqrt(1 / 3) * rng.standard_normal((2000, 1))
            hits += bool(marginal_credible_intervals(post).contains([[x]])[0])
        assert abs(hits / 1000 - 0.95) <= 0.03

    def test_csv(self, tmp_path):
        X = np.random.default_rng(2).normal(size=(200, 2))
        p = marginal_credible_intervals(X).to_csv(tmp_path / "ci.csv")
        assert p.read_text().splitlines()[0] == "dim,lo,hi"

    def test_too_few(self):
        with pytest.raises(ValueError):
            marginal_credible_intervals(np.zeros((10, 1)))


class TestDecisions:
    def test_constant_loss_first_action(self):
        prob = DecisionProblem(["a", "b", "c"], loss=lambda a, X: np.ones(X.shape[0]))
        X = np.random.default_rng(0).normal(size=(10, 1))
        assert bayes_action(prob, X)[0] == "a"
        assert map_action(prob, [0.0]) == "a"

    def test_zero_one_loss_mode(self):
        edges = np.array([-np.inf, -1.0, 0.0, 1.0, np.inf])
        X = np.random.default_rng(1).normal(0.4, 0.6, size=(3000, 1))
        cells = np.digitize(X[:, 0], edges[1:-1])
        prob = DecisionProblem(range(4), loss=lambda a, Z: (
            np.digitize(Z[:, 0], edges[1:-1]) != a).astype(float))
        assert bayes_action(prob, X)[0] == np.bincount(cells).argmax()

    def test_threshold_componentwise(self):
        tau = 1.0
        prob = threshold_problem(3, tau)
        X = np.random.default_rng(2).normal([0.3, 1.5, -1.1], 0.5, size=(2000, 3))
        a, el = bayes_action(prob, X)
        expected = tuple(int(v) for v in (np.abs(X) > tau).mean(axis=0) > 0.5)
        assert a == expected
        assert a == enumerate_bayes_action(prob, X)
        assert len(el) == 8

    def test_map_threshold(self):
        prob = threshold_problem(2, 1.0)
        assert map_action(prob, [1.2, -0.4]) == (1, 0)
        assert map_action(prob, [1.0, -1.0]) == (0, 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_matches_enumeration(self, d, seed):
        rng = np.random.default_rng(seed)
        prob = threshold_problem(d, float(rng.uniform(0.2, 2.0)))
        X = rng.normal(scale=rng.uniform(0.5, 2), size=(60, d))
        assert bayes_action(prob, X)[0] == enumerate_bayes_action(prob, X)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 16), st.integers(0, 2**31 - 1))
    def test_loss_matrix_matches_enumeration(self, k, seed):
        rng = np.random.default_rng(seed)
        L = rng.uniform(0, 3, size=(k, 3))

        def label_model(X):
            e = np.exp(X[:, :3])
            return e / e.sum(axis=1, keepdims=True)

        prob = DecisionProblem(list(range(k)), loss_matrix=L, label_model=label_model)
        X = rng.normal(size=(40, 3))
        assert bayes_action(prob, X)[0] == enumerate_bayes_action(prob, X)

    def test_threshold_loss_boundary(self):
        loss = threshold_loss(1.0)
        # exactly at tau is neither big nor small: no loss either way
        assert loss((0,), np.array([[1.0]]))[0] == 0 == loss((1,), np.array([[1.0]]))[0]

    def test_problem_validation(self):
        with pytest.raises(ValueError):
            DecisionProblem([], loss=lambda a, X: X)
        with pytest.raises(ValueError):
            DecisionProblem([0], loss=lambda a, X: X, loss_matrix=np.ones((1, 1)),
                            label_model=lambda X: X)
        with pytest.raises(ValueError):
            DecisionProblem([0], loss_matrix=np.ones((1, 2)))
        with pytest.raises(ValueError):
            DecisionProblem([0, 1], loss_matrix=np.ones((3, 2)), label_model=lambda X: X)


class TestClassPosterior:
    def test_constant(self):
        X = np.random.default_rng(0).normal(size=(100, 2))
        assert class_posterior(X, lambda Z: np.full(Z.shape[0], 0.7)) == 0.7

    def test_logistic_at_zero(self):
        lik = LogisticLikelihood(np.ones((1, 2)), [1])
        f = np.array([[0.3, -1.2]])
        p = class_posterior(np.zeros((50, 2)), lambda Z: lik.predict(Z, f)[:, 0])
        assert p == 0.5

    def test_through_map(self):
        spec = BasisSpec.from_families([Family.hermite()], 1)
        m = identity_init(spec)
        m2 = m.with_weights(2 * m.W)
        X = np.full((20, 1), 0.5)
        assert class_posterior(X, lambda Z: Z[:, 0], tmap=m2) == pytest.approx(1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
    def test_bounded_and_monotone(self, seed, shift):
        X = np.random.default_rng(seed).normal(size=(50, 2))

        def base(Z):
            return special.expit(Z[:, 0])

        def larger(Z):
            return np.minimum(1.0, base(Z) + shift)

        p, q = class_posterior(X, base), class_posterior(X, larger)
        assert 0.0 <= p <= q <= 1.0

    def test_stage_rows_sum_to_one(self):
        from otbayes.experiments import STAGE_TEMPLATES, stage_probabilities, subband_bin_counts
        X = np.array([STAGE_TEMPLATES[s] for s in "WLDR"])
        P = stage_probabilities(X, subband_bin_counts())
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


class TestROC:
    def test_hand_case(self):
        roc = roc_curve([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0])
        assert roc.auc == pytest.approx(0.75, abs=1e-15)
        assert roc.fpr[0] == roc.tpr[0] == 0.0 and roc.fpr[-1] == roc.tpr[-1] == 1.0

    def test_perfect(self):
        assert roc_curve([3, 2, 1, 0], [1, 1, 0, 0]).auc == 1.0

    def test_all_ties(self):
        roc = roc_curve(np.zeros(6), [1, 0, 1, 0, 0, 1])
        assert roc.auc == 0.5
        np.testing.assert_array_equal(roc.fpr, [0, 1])
        np.testing.assert_array_equal(roc.tpr, [0, 1])

    def test_single_class(self):
        with pytest.raises(SingleClass):
            roc_curve([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            roc_curve([0.1, 0.2], [1])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
    def test_equals_pair_count(self, pairs):
        s = np.array([p[0] for p in pairs], dtype=float)
        y = np.array([p[1] for p in pairs])
        if y.all() or not y.any():
            return
        assert abs(roc_curve(s, y).auc - auc_pair_count(s, y)) <= 1e-12

    def test_pair_count_oracle_explicit(self):
        s = [0.9, 0.8, 0.3, 0.1, 0.8]
        y = [1, 0, 1, 0, 1]
        pos = [a for a, b in zip(s, y) if b]
        neg = [a for a, b in zip(s, y) if not b]
        u = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
        assert roc_curve(s, y).auc == pytest.approx(u / (len(pos) * len(neg)), abs=1e-15)

    def test_csv(self, tmp_path):
        p = roc_curve([0.9, 0.1], [1, 0]).to_csv(tmp_path / "roc.csv")
        assert p.read_text().splitlines()[0] == "threshold,fpr,tpr"
