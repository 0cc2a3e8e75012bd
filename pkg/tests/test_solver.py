import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, optimize, stats

from otbayes.errors import FitError, LineSearchStall, MaxIterationsReached
from otbayes.models import (GammaPrior, GaussianLinearLikelihood, GaussianPrior, LaplacePrior,
                            PosteriorTarget, UniformBoxPrior)
from otbayes.polybasis import BasisSpec, Family
from otbayes.samples import SampleSet
from otbayes.solver import (FitOptions, build_cache, feasible_start, fit, fit_chain, gradient,
                            gradient_map_subspace,
                            hessian, objective)
from otbayes.transportmap import identity_init, load, save

from conftest import LOG_BETA_GP


def _gp_cache(gp_target, n=300, seed=1):
    train = gp_target.prior.sample(n, seed=seed)
    spec = BasisSpec.from_families(gp_target.prior.basis_families(), 5)
    return spec, build_cache(spec, train, gp_target.prior)


def _random_feasible(spec, cache, target, rng, scale=0.05):
    W0 = identity_init(spec).W
    while True:
        W = W0 * rng.uniform(0.6, 1.4) + scale * rng.normal(size=W0.shape)
        if np.isfinite(objective(W, cache, target)):
            return W


def _fd_grad(f, W, h=1e-6):
    G = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        E = np.zeros_like(W)
        E[idx] = h
        G[idx] = (f(W + E) - f(W - E)) / (2 * h)
    return G


class TestObjective:
    def test_identity_same_density(self):
        p = GaussianPrior.standard(2)
        s = p.sample(500, seed=0)
        spec = BasisSpec.from_families(p.basis_families(), 3)
        cache = build_cache(spec, s, p)
        val = objective(identity_init(spec).W, cache, p)
        np.testing.assert_allclose(val, np.mean(p.log_density(s.values)), rtol=1e-13)
        assert abs(objective(identity_init(spec).W, cache, p, t_form=True)) < 1e-13

    def test_negative_slope_infeasible(self, gp_target):
        spec, cache = _gp_cache(gp_target)
        assert objective(-identity_init(spec).W, cache, gp_target) == -np.inf

    def test_t_form_at_optimum(self, gp_target, gp_fitted):
        tmap, _, train = gp_fitted
        cache = build_cache(tmap.spec, train, gp_target.prior)
        val = objective(tmap.W, cache, gp_target, t_form=True)
        assert abs(val - LOG_BETA_GP) < 0.02

    def test_t_form_needs_source(self, gp_target):
        spec = BasisSpec.from_families(gp_target.prior.basis_families(), 2)
        cache = build_cache(spec, gp_target.prior.sample(10, seed=0))
        with pytest.raises(ValueError):
            objective(identity_init(spec).W, cache, gp_target, t_form=True)

    def test_concave_midpoints(self, gp_target):
        spec, cache = _gp_cache(gp_target)
        rng = np.random.default_rng(2)
        for _ in range(100):
            W1 = _random_feasible(spec, cache, gp_target, rng)
            W2 = _random_feasible(spec, cache, gp_target, rng)
            mid = objective(0.5 * (W1 + W2), cache, gp_target)
            avg = 0.5 * (objective(W1, cache, gp_target) + objective(W2, cache, gp_target))
            assert mid >= avg - 1e-9


class TestGradient:
    def test_finite_differences(self, gp_target):
        spec, cache = _gp_cache(gp_target)
        rng = np.random.default_rng(3)
        for _ in range(20):
            W = _random_feasible(spec, cache, gp_target, rng)
            G = gradient(W, cache, gp_target)
            fd = _fd_grad(lambda V: objective(V, cache, gp_target), W)
            assert np.linalg.norm(G - fd) <= 1e-5 * np.linalg.norm(fd)

    def test_finite_differences_2d(self, g2_target):
        p = g2_target.prior
        spec = BasisSpec.from_families(p.basis_families(), 2)
        cache = build_cache(spec, p.sample(300, seed=4), p)
        rng = np.random.default_rng(4)
        W = _random_feasible(spec, cache, g2_target, rng, scale=0.02)
        fd = _fd_grad(lambda V: objective(V, cache, g2_target), W)
        np.testing.assert_allclose(gradient(W, cache, g2_target), fd, rtol=1e-5, atol=1e-7)

    def test_hessian_matches_gradient_differences(self, g2_target):
        p = g2_target.prior
        spec = BasisSpec.from_families(p.basis_families(), 2)
        cache = build_cache(spec, p.sample(300, seed=5), p)
        W = _random_feasible(spec, cache, g2_target, np.random.default_rng(5), scale=0.02)
        H = hessian(W, cache, g2_target)
        h = 1e-6
        fd = np.empty_like(H)
        for j in range(W.size):
            E = np.zeros(W.size)
            E[j] = h
            E = E.reshape(W.shape)
            fd[:, j] = ((gradient(W + E, cache, g2_target) - gradient(W - E, cache, g2_target))
                        / (2 * h)).ravel()
        np.testing.assert_allclose(H, fd, rtol=1e-5, atol=1e-6)
        assert np.linalg.eigvalsh(H).max() < 0

    def test_identity_is_stationary_in_the_limit(self):
        # log q term and log det term cancel when P = Q; Gauss-Hermite nodes
        # stand in for the exact expectation
        x, w = np.polynomial.hermite_e.hermegauss(30)
        p = GaussianPrior.standard(1)
        spec = BasisSpec.from_families(p.basis_families(), 4)
        phi, jac = spec.evaluate(x[:, None])
        W = identity_init(spec).W
        s, ds = (phi @ W.T)[:, 0], jac[:, :, 0] @ W[0]
        g_q = (w * -s) @ phi
        g_det = (w / ds) @ jac[:, :, 0]
        assert np.abs(g_q).max() > 0.5
        np.testing.assert_allclose((g_q + g_det) / w.sum(), 0.0, atol=1e-12)


SAMPLE_OPTIMUM_NOT_IDENTITY = pytest.mark.xfail(
    strict=True,
    reason="the sample-average objective is maximized away from the identity; "
           "measured deviation 0.149 at n=2000, p=5, shrinking like 1/sqrt(n)")


class TestFit:
    @SAMPLE_OPTIMUM_NOT_IDENTITY
    def test_gaussian_to_itself(self):
        p = GaussianPrior.standard(1)
        tmap, rep = fit(p, p.sample(2000, seed=0), degree=5, source=p)
        grid = np.linspace(stats.norm.ppf(0.005), stats.norm.ppf(0.995), 501)[:, None]
        assert rep.converged
        assert np.abs(tmap.apply(grid) - grid).max() < 1e-3

    def test_gaussian_to_itself_consistent(self):
        p = GaussianPrior.standard(1)
        grid = np.linspace(stats.norm.ppf(0.005), stats.norm.ppf(0.995), 501)[:, None]
        dev = []
        for n in (2000, 20_000, 200_000):
            tmap, rep = fit(p, p.sample(n, seed=0), degree=1, source=p)
            assert rep.converged
            dev.append(np.abs(tmap.apply(grid) - grid).max())
        assert dev[0] > dev[1] > dev[2]
        assert dev[2] < 5e-3

    def test_gamma_poisson_ks(self, gp_fitted, gp_eval, gp_exact):
        tmap, rep, _ = gp_fitted
        assert rep.converged and tmap.spec.K == 6
        assert stats.kstest(tmap.apply(gp_eval.values)[:, 0], gp_exact.cdf).statistic < 0.05

    def test_gradient_small_at_output_and_after_reload(self, gp_target, gp_fitted, tmp_path):
        tmap, rep, train = gp_fitted
        cache = build_cache(tmap.spec, train)
        assert np.linalg.norm(gradient(tmap.W, cache, gp_target)) < FitOptions().grad_tol
        back = load(save(tmap, tmp_path / "m.json"))
        assert np.linalg.norm(gradient(back.W, cache, gp_target)) < FitOptions().grad_tol

    def test_trajectory_monotone(self, gp_fitted, g2_fitted):
        for _, rep, _ in (gp_fitted, g2_fitted):
            traj = np.asarray(rep.objective_trajectory)
            assert traj.size >= 2
            assert np.all(np.diff(traj) >= -1e-12)

    def test_two_starts_agree(self, gp_target, gp_fitted):
        tmap, _, train = gp_fitted
        spec = tmap.spec
        # S(x) = 0.3 + 0.5 x, a different feasible start
        phi = spec.evaluate(train.values)[0]
        W0 = np.linalg.lstsq(phi, 0.3 + 0.5 * train.values[:, 0], rcond=None)[0][None, :]
        other, rep = fit(gp_target, train, spec=spec, W0=W0)
        assert rep.converged
        prior = gp_target.prior
        grid = np.linspace(float(prior.ppf(0.005)[0]), float(prior.ppf(0.995)[0]), 1001)[:, None]
        assert np.abs(other.apply(grid) - tmap.apply(grid)).max() < 1e-4

    def test_matches_slsqp(self, gp_target):
        train = gp_target.prior.sample(200, seed=6)
        spec = BasisSpec.from_families(gp_target.prior.basis_families(), 3)
        tmap, rep = fit(gp_target, train, spec=spec, opts=FitOptions(grad_tol=1e-9))
        phi, jac = spec.evaluate(train.values)
        dphi = jac[:, :, 0]

        def negobj(w):
            s, ds = phi @ w, dphi @ w
            if np.any(s <= 0) or np.any(ds <= 0):
                return 1e10
            return -float(np.mean(gp_target.log_density(s[:, None]) + np.log(ds)))

        cons = [{"type": "ineq", "fun": lambda w: phi @ w - 1e-9},
                {"type": "ineq", "fun": lambda w: dphi @ w - 1e-9}]
        res = optimize.minimize(negobj, identity_init(spec).W[0], method="SLSQP",
                                constraints=cons, options={"ftol": 1e-14, "maxiter": 500})
        assert res.success
        np.testing.assert_allclose(-res.fun, objective(tmap.W, build_cache(spec, train), gp_target),
                                   atol=1e-8)
        grid = np.linspace(0.05, 3.0, 200)[:, None]
        ref = spec.evaluate(grid)[0] @ res.x
        assert np.abs(tmap.apply(grid)[:, 0] - ref).max() < 1e-4

    def test_uniform_wall(self):
        src = UniformBoxPrior(0.0, 2.0)
        tmap, rep = fit(UniformBoxPrior(0.0, 1.0), src.sample(500, seed=1), degree=3, source=src)
        assert rep.converged
        # the support constraint binds at the training samples only
        y = tmap.apply(src.sample(500, seed=1).values)
        assert y.min() >= 0.0 and y.max() <= 1.0

    def test_strict_raises_with_last_iterate(self, gp_target):
        train = gp_target.prior.sample(300, seed=0)
        with pytest.raises(MaxIterationsReached) as info:
            fit(gp_target, train, degree=5, opts=FitOptions(max_iters=2))
        assert info.value.transport_map is not None
        assert info.value.report.iterations == 2
        tmap, rep = fit(gp_target, train, degree=5, opts=FitOptions(max_iters=2, strict=False))
        assert rep.termination == "MaxIters"

    def test_infeasible_start(self, gp_target):
        train = gp_target.prior.sample(50, seed=0)
        spec = BasisSpec.from_families(gp_target.prior.basis_families(), 2)
        with pytest.raises(ValueError):
            fit(gp_target, train, spec=spec, W0=-identity_init(spec).W)

    def test_feasible_start_shrinks_into_support(self):
        src = GaussianPrior.standard(1)
        train = src.sample(200, seed=0)
        spec = BasisSpec.from_families(src.basis_families(), 3)
        target = UniformBoxPrior(0.0, 1.0)
        W = feasible_start(spec, build_cache(spec, train), target)
        y = spec.evaluate(train.values)[0] @ W.T
        assert y.min() > 0 and y.max() < 1

    def test_deterministic(self, gp_target):
        train = gp_target.prior.sample(300, seed=3)
        a, _ = fit(gp_target, train, degree=4)
        b, _ = fit(gp_target, train, degree=4)
        np.testing.assert_array_equal(a.W, b.W)

    @pytest.mark.parametrize("bad", [dict(max_iters=-1), dict(grad_tol=0.0), dict(shrink=1.0)])
    def test_options_validated(self, bad):
        with pytest.raises(ValueError):
            FitOptions(**bad)

    @settings(max_examples=10, deadline=None)
    @given(st.floats(0.5, 2.0), st.floats(-1.0, 1.0))
    def test_affine_gaussian_recovered(self, sd, mu):
        # Gaussian to Gaussian: the optimal map is affine
        src = GaussianPrior.standard(1)
        tgt = GaussianPrior(mu, sd**2)
        train = src.sample(400, seed=8)
        tmap, rep = fit(tgt, train, degree=1)
        x = train.values[:, 0]
        # sample optimum in closed form: match the empirical mean and variance
        m, v = x.mean(), x.var()
        grid = np.linspace(-3, 3, 13)
        exact = mu + sd / math.sqrt(v) * (grid - m)
        np.testing.assert_allclose(tmap.apply(grid[:, None])[:, 0], exact, rtol=1e-6, atol=1e-6)


def _posterior_cdf_1d(prior, lik):
    def dens(t):
        return math.exp(float(prior.log_density([t])) + float(lik.log_likelihood([t])))

    z = sum(integrate.quad(dens, a, b, epsabs=1e-13, limit=200)[0]
            for a, b in ((-np.inf, 0.0), (0.0, np.inf)))

    def cdf(x):
        x = np.atleast_1d(x)
        out = np.empty(x.shape)
        for i, v in enumerate(x):
            if v <= 0:
                out[i] = integrate.quad(dens, -np.inf, v, limit=200)[0] / z
            else:
                out[i] = (integrate.quad(dens, -np.inf, 0.0, limit=200)[0]
                          + integrate.quad(dens, 0.0, v, limit=200)[0]) / z
        return out

    return cdf


class TestGradientMap:
    @pytest.mark.parametrize("d,p", [(2, 1), (2, 2), (2, 3), (3, 2)])
    def test_subspace_dimension(self, d, p):
        # gradients of potentials of degree <= p + 1, modulo constants
        prior = GaussianPrior.standard(d)
        spec = BasisSpec.from_families(prior.basis_families(), p)
        cache = build_cache(spec, prior.sample(400, seed=d * 10 + p))
        N = gradient_map_subspace(cache)
        assert N.shape == (d * spec.K, math.comb(d + p + 1, d) - 1)
        np.testing.assert_allclose(N.T @ N, np.eye(N.shape[1]), atol=1e-10)

    def test_empirical_basis_dimension(self):
        X = LaplacePrior(1.0, dim=2).sample(500, seed=3)
        from otbayes.polybasis import gram_schmidt_empirical
        cache = build_cache(gram_schmidt_empirical(X, 3), X)
        assert gradient_map_subspace(cache).shape[1] == math.comb(2 + 4, 2) - 1

    def test_fitted_jacobian_symmetric(self, g2_fitted):
        tmap = g2_fitted[0]
        X = np.random.default_rng(0).normal(scale=2.0, size=(200, 2))
        J = tmap.jacobian(X)
        np.testing.assert_allclose(J, np.swapaxes(J, 1, 2), atol=1e-10)

    def test_two_starts_agree_2d(self, g2_target):
        train = g2_target.prior.sample(2000, seed=3)
        spec = BasisSpec.from_families(g2_target.prior.basis_families(), 2)
        a, ra = fit(g2_target, train, spec=spec)
        phi = spec.evaluate(train.values)[0]
        W0 = np.linalg.lstsq(phi, 0.3 + 0.5 * train.values, rcond=None)[0].T
        b, rb = fit(g2_target, train, spec=spec, W0=W0)
        assert ra.converged and rb.converged
        grid = g2_target.prior.sample(5000, seed=4).values
        assert np.abs(a.apply(grid) - b.apply(grid)).max() < 1e-4

    def test_unrestricted_has_several_local_maxima(self, g2_target):
        # log det is not concave over non-symmetric Jacobians: the same two
        # starts reach different stationary points
        train = g2_target.prior.sample(2000, seed=3)
        spec = BasisSpec.from_families(g2_target.prior.basis_families(), 2)
        opts = FitOptions(gradient_map=False)
        a, ra = fit(g2_target, train, spec=spec, opts=opts)
        phi = spec.evaluate(train.values)[0]
        W0 = np.linalg.lstsq(phi, 0.3 + 0.5 * train.values, rcond=None)[0].T
        b, rb = fit(g2_target, train, spec=spec, opts=opts, W0=W0)
        assert ra.converged and rb.converged
        cache = build_cache(spec, train, g2_target.prior)
        fa, fb = objective(a.W, cache, g2_target), objective(b.W, cache, g2_target)
        assert abs(fa - fb) > 1e-4

    def test_projected_start(self, g2_target):
        train = g2_target.prior.sample(500, seed=5)
        spec = BasisSpec.from_families(g2_target.prior.basis_families(), 2)
        W0 = identity_init(spec).W.copy()
        W0[0, -1] += 1e-3  # small non-gradient perturbation
        tmap, _ = fit(g2_target, train, spec=spec, W0=W0)
        J = tmap.jacobian(train.values[:20])
        np.testing.assert_allclose(J, np.swapaxes(J, 1, 2), atol=1e-10)


class TestChain:
    def test_laplace_posterior_ks(self):
        base = GaussianPrior.standard(1)
        inter = LaplacePrior(1 / math.sqrt(2), dim=1)
        lik = GaussianLinearLikelihood(np.eye(1), 0.1, [0.8])
        final = PosteriorTarget(inter, lik)
        res = fit_chain(base, inter, final, base.sample(2000, seed=1), degree=5,
                        second_degree=3, opts=FitOptions(strict=False))
        ev = base.sample(2000, seed=2)
        z = res.composed().apply(ev.values)[:, 0]
        grid = np.linspace(-0.5, 2.0, 2001)
        cdf = _posterior_cdf_1d(inter, lik)(grid)
        ks = stats.kstest(z, lambda t: np.interp(t, grid, cdf)).statistic
        assert ks < 0.07

    @SAMPLE_OPTIMUM_NOT_IDENTITY
    def test_intermediate_equal_to_base(self):
        base = GaussianPrior.standard(1)
        res = fit_chain(base, base, base, base.sample(1000, seed=0), degree=3)
        grid = np.linspace(-2.5, 2.5, 101)[:, None]
        assert np.abs(res.first.apply(grid) - grid).max() < 1e-3

    def test_stage_one_failure_tagged(self):
        base = GaussianPrior.standard(1)
        inter = LaplacePrior(1.0, dim=1, smoothing=0.1)
        with pytest.raises(FitError) as info:
            fit_chain(base, inter, inter, base.sample(500, seed=0), opts=FitOptions(max_iters=1))
        assert info.value.stage == 1
        assert "stage=1" in str(info.value)

    def test_stall_is_fit_error(self):
        assert issubclass(LineSearchStall, FitError)
