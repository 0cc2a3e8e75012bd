"""Priors, likelihoods and posterior targets.

Every density-like object here works on batches: ``X`` has shape ``(n, d)``
(a single point of shape ``(d,)`` is also accepted) and the methods return

* ``log_density(X)``       -> (n,)     (``-inf`` outside the support)
* ``grad_log_density(X)``  -> (n, d)
* ``hess_log_density(X)``  -> (n, d, d)

A *target* is anything with that surface plus ``dim``, ``in_support`` and a
``normalized`` flag; priors are normalized targets, :class:`PosteriorTarget`
is not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from .errors import DidNotConverge
from .polybasis import Family
from .samples import SampleSet, substream

LOG_2PI = math.log(2.0 * math.pi)


def _as_rows(X, d):
    X = np.asarray(X, dtype=float)
    single = X.ndim <= 1 and (d > 1 or X.size == 1)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(1, d) if single else X.reshape(-1, 1)
    return X, single


def _vec(v, d, name):
    a = np.broadcast_to(np.asarray(v, dtype=float), (d,)).copy()
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    return a


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed, None
    return substream(int(seed), "sample"), int(seed)


def _finish(out, single):
    return out[0] if single else out


# --------------------------------------------------------------------------
# priors
# --------------------------------------------------------------------------

class Prior:
    """Base class: a normalized log-concave density with sampler and entropy."""

    normalized = True
    kind = "prior"
    dim: int

    # subclasses implement the _batch versions on (n, d) arrays
    def log_density(self, X):
        X, single = _as_rows(X, self.dim)
        out = np.full(X.shape[0], -np.inf)
        ok = self._inside(X)
        if np.any(ok):
            out[ok] = self._logpdf(X[ok])
        return _finish(out, single)

    def grad_log_density(self, X):
        X, single = _as_rows(X, self.dim)
        return _finish(self._grad(X), single)

    def hess_log_density(self, X):
        X, single = _as_rows(X, self.dim)
        return _finish(self._hess(X), single)

    def in_support(self, X):
        X, single = _as_rows(X, self.dim)
        return _finish(self._inside(X), single)

    def _inside(self, X):
        lo, hi = self.support()
        return np.all((X >= lo) & (X <= hi), axis=1) & np.all(np.isfinite(X), axis=1)

    def support(self):
        return np.full(self.dim, -np.inf), np.full(self.dim, np.inf)

    def sample(self, n: int, seed=0) -> SampleSet:
        """``n`` i.i.d. draws. An integer seed gives bit-identical output."""
        if n < 1:
            raise ValueError("n must be >= 1")
        rng, s = _rng(seed)
        return SampleSet(self._draw(int(n), rng), seed=s, source=self.describe())

    def describe(self) -> str:
        return self.kind

    def basis_families(self):
        """Per-coordinate orthonormal families, or None if none is classical."""
        return None

    def _diag_hess(self, diag):
        n, d = diag.shape
        H = np.zeros((n, d, d))
        H[:, np.arange(d), np.arange(d)] = diag
        return H


class GaussianPrior(Prior):
    kind = "gaussian"

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        d = mean.shape[0]
        if cov.ndim == 0:
            cov = float(cov) * np.eye(d)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (d, d) or not np.allclose(cov, cov.T):
            raise ValueError("covariance must be a symmetric d x d matrix")
        try:
            self.chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance must be positive definite") from None
        self.dim = d
        self.mean = mean
        self.cov = cov
        self.precision = np.linalg.inv(cov)
        self._logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))

    @classmethod
    def standard(cls, d=1, var=1.0):
        return cls(np.zeros(d), var * np.eye(d))

    def describe(self):
        return f"gaussian(d={self.dim})"

    def _logpdf(self, X):
        r = X - self.mean
        q = np.einsum("ni,ij,nj->n", r, self.precision, r)
        return -0.5 * (q + self._logdet + self.dim * LOG_2PI)

    def _grad(self, X):
        return -(X - self.mean) @ self.precision

    def _hess(self, X):
        return np.broadcast_to(-self.precision, (X.shape[0], self.dim, self.dim)).copy()

    def _draw(self, n, rng):
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self.chol.T

    def entropy(self):
        return 0.5 * (self.dim * (1.0 + LOG_2PI) + self._logdet)

    def is_isotropic(self):
        v = self.cov[0, 0]
        return np.allclose(self.cov, v * np.eye(self.dim))

    def basis_families(self):
        sd = np.sqrt(np.diag(self.cov))
        return [Family.hermite(m, s) for m, s in zip(self.mean, sd)]


class UniformBoxPrior(Prior):
    kind = "uniform"

    def __init__(self, lo, hi, dim=None):
        d = dim or np.atleast_1d(lo).shape[0]
        self.lo = _vec(lo, d, "lo")
        self.hi = _vec(hi, d, "hi")
        if np.any(self.lo >= self.hi):
            raise ValueError("need lo < hi componentwise")
        self.dim = d

    def describe(self):
        return f"uniform(d={self.dim})"

    def support(self):
        return self.lo.copy(), self.hi.copy()

    def _logpdf(self, X):
        return np.full(X.shape[0], -np.sum(np.log(self.hi - self.lo)))

    def _grad(self, X):
        return np.zeros_like(X)

    def _hess(self, X):
        return np.zeros((X.shape[0], self.dim, self.dim))

    def _draw(self, n, rng):
        return self.lo + rng.random((n, self.dim)) * (self.hi - self.lo)

    def entropy(self):
        return float(np.sum(np.log(self.hi - self.lo)))

    def basis_families(self):
        return [Family.legendre(a, b) for a, b in zip(self.lo, self.hi)]


class ExponentialPrior(Prior):
    kind = "exponential"

    def __init__(self, rate, dim=None):
        d = dim or np.atleast_1d(rate).shape[0]
        self.rate = _vec(rate, d, "rate")
        if np.any(self.rate <= 0):
            raise ValueError("rates must be positive")
        self.dim = d

    def describe(self):
        return f"exponential(d={self.dim})"

    def support(self):
        return np.zeros(self.dim), np.full(self.dim, np.inf)

    def _logpdf(self, X):
        return np.sum(np.log(self.rate) - self.rate * X, axis=1)

    def _grad(self, X):
        return np.broadcast_to(-self.rate, X.shape).copy()

    def _hess(self, X):
        return np.zeros((X.shape[0], self.dim, self.dim))

    def _draw(self, n, rng):
        u = rng.random((n, self.dim))
        return -np.log1p(-u) / self.rate

    def entropy(self):
        return float(np.sum(1.0 - np.log(self.rate)))

    def basis_families(self):
        return [Family.laguerre(1.0, 1.0 / r) for r in self.rate]


class LaplacePrior(Prior):
    """Independent Laplace coordinates, density ``exp(-|x - loc| / b) / (2b)``.

    With ``smoothing = eps > 0`` the absolute value is replaced by
    ``sqrt(r**2 + eps**2) - eps`` (a symmetric hyperbolic law). The density
    stays log-concave, becomes twice differentiable, and is normalized
    exactly through a Bessel function. ``smoothing = 0`` is the exact Laplace.
    """

    kind = "laplace"

    def __init__(self, scale, dim=None, loc=0.0, smoothing=0.0):
        d = dim or np.atleast_1d(scale).shape[0]
        self.scale = _vec(scale, d, "scale")
        self.loc = _vec(loc, d, "loc")
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        if smoothing < 0:
            raise ValueError("smoothing must be >= 0")
        self.smoothing = float(smoothing)
        self.dim = d
        if self.smoothing > 0:
            u = self.smoothing / self.scale
            # int exp(-(sqrt(r^2+e^2)-e)/b) dr = 2 e K1(e/b) exp(e/b)
            self._lognorm = np.log(2.0 * self.smoothing * special.k1e(u))
        else:
            self._lognorm = np.log(2.0 * self.scale)

    def describe(self):
        return f"laplace(d={self.dim})"

    def _abs(self, R):
        if self.smoothing > 0:
            e = self.smoothing
            return np.sqrt(R**2 + e**2) - e
        return np.abs(R)

    def _logpdf(self, X):
        R = X - self.loc
        return np.sum(-self._abs(R) / self.scale - self._lognorm, axis=1)

    def _grad(self, X):
        R = X - self.loc
        if self.smoothing > 0:
            return -R / np.sqrt(R**2 + self.smoothing**2) / self.scale
        return -np.sign(R) / self.scale

    def _hess(self, X):
        R = X - self.loc
        if self.smoothing > 0:
            e2 = self.smoothing**2
            diag = -e2 / (R**2 + e2) ** 1.5 / self.scale
        else:
            diag = np.zeros_like(R)
        return self._diag_hess(diag)

    def _draw(self, n, rng):
        if self.smoothing > 0:
            return self._draw_smoothed(n, rng)
        u = rng.random((n, self.dim)) - 0.5
        return self.loc - self.scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))

    def _draw_smoothed(self, n, rng):
        # rejection from the Laplace envelope: sqrt(r^2+e^2) - e >= |r| - e
        out = np.empty((n, self.dim))
        for a in range(self.dim):
            b, e = self.scale[a], self.smoothing
            got = []
            need = n
            while need > 0:
                m = int(need * 1.5) + 16
                u = rng.random(m) - 0.5
                r = -b * np.sign(u) * np.log1p(-2.0 * np.abs(u))
                acc = np.log(rng.random(m)) <= -(np.sqrt(r**2 + e**2) - np.abs(r)) / b
                got.append(r[acc][:need])
                need -= got[-1].size
            out[:, a] = self.loc[a] + np.concatenate(got)
        return out

    def entropy(self):
        if self.smoothing == 0:
            return float(np.sum(1.0 + np.log(2.0 * self.scale)))
        from scipy import integrate
        total = 0.0
        for a in range(self.dim):
            b, e, ln = self.scale[a], self.smoothing, self._lognorm[a]

            def integrand(r):
                lp = -(math.sqrt(r * r + e * e) - e) / b - ln
                return -math.exp(lp) * lp

            val, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12)
            total += val
        return total

    def tail_threshold(self, mass=0.95):
        """Per-coordinate ``tau`` with ``P(|x - loc| <= tau) = mass`` (exact Laplace)."""
        return -self.scale * math.log(1.0 - mass)


class GammaPrior(Prior):
    """Independent Gamma coordinates with shape ``a`` and scale ``b``."""

    kind = "gamma"

    def __init__(self, shape, scale, dim=None):
        d = dim or max(np.atleast_1d(shape).shape[0], np.atleast_1d(scale).shape[0])
        self.shape = _vec(shape, d, "shape")
        self.scale = _vec(scale, d, "scale")
        if np.any(self.shape <= 0) or np.any(self.scale <= 0):
            raise ValueError("shape and scale must be positive")
        self.dim = d
        self._lognorm = special.gammaln(self.shape) + self.shape * np.log(self.scale)

    def describe(self):
        return f"gamma(d={self.dim})"

    def support(self):
        return np.zeros(self.dim), np.full(self.dim, np.inf)

    def _inside(self, X):
        # open at zero unless shape == 1
        lo_ok = np.where(self.shape == 1.0, X >= 0, X > 0)
        return np.all(lo_ok & np.isfinite(X), axis=1)

    def _logpdf(self, X):
        with np.errstate(divide="ignore"):
            return np.sum(special.xlogy(self.shape - 1.0, X) - X / self.scale - self._lognorm, axis=1)

    def _grad(self, X):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.shape - 1.0) / X - 1.0 / self.scale

    def _hess(self, X):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self._diag_hess(-(self.shape - 1.0) / X**2)

    def _draw(self, n, rng):
        u = rng.random((n, self.dim))
        return special.gammaincinv(self.shape, u) * self.scale

    def entropy(self):
        a, b = self.shape, self.scale
        return float(np.sum(a + np.log(b) + special.gammaln(a) + (1.0 - a) * special.digamma(a)))

    def cdf(self, x):
        return special.gammainc(self.shape, np.maximum(np.asarray(x, dtype=float), 0.0) / self.scale)

    def ppf(self, u):
        return special.gammaincinv(self.shape, np.asarray(u, dtype=float)) * self.scale

    def basis_families(self):
        return [Family.laguerre(a, b) for a, b in zip(self.shape, self.scale)]


def log_prior(prior: Prior, x):
    return prior.log_density(x)


def sample_prior(prior: Prior, n: int, seed=0) -> SampleSet:
    return prior.sample(n, seed)


# --------------------------------------------------------------------------
# likelihoods
# --------------------------------------------------------------------------

class Likelihood:
    kind = "likelihood"
    dim: int

    def log_likelihood(self, X):
        X, single = _as_rows(X, self.dim)
        return _finish(self._ll(X), single)

    def grad_log_likelihood(self, X):
        X, single = _as_rows(X, self.dim)
        return _finish(self._grad(X), single)

    def hess_log_likelihood(self, X):
        X, single = _as_rows(X, self.dim)
        return _finish(self._hess(X), single)


class ConstantLikelihood(Likelihood):
    """``log p(y|x) = log_value`` everywhere (posterior equals prior)."""

    kind = "constant"

    def __init__(self, dim, log_value=0.0):
        self.dim = dim
        self.log_value = float(log_value)

    def _ll(self, X):
        return np.full(X.shape[0], self.log_value)

    def _grad(self, X):
        return np.zeros_like(X)

    def _hess(self, X):
        return np.zeros((X.shape[0], self.dim, self.dim))


class GaussianLinearLikelihood(Likelihood):
    """``y = M x + e`` with ``e ~ N(0, noise_cov)``."""

    kind = "gaussian_linear"

    def __init__(self, M, noise_cov, y):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        m, d = M.shape
        S = np.asarray(noise_cov, dtype=float)
        if S.ndim == 0:
            S = float(S) * np.eye(m)
        elif S.ndim == 1:
            S = np.diag(S)
        if S.shape != (m, m):
            raise ValueError("noise covariance must be m x m")
        self.M, self.noise_cov = M, S
        self.y = np.asarray(y, dtype=float).reshape(m)
        self.dim = d
        self.noise_precision = np.linalg.inv(S)
        sign, logdet = np.linalg.slogdet(S)
        if sign <= 0:
            raise ValueError("noise covariance must be positive definite")
        self._const = -0.5 * (m * LOG_2PI + logdet)
        self._fisher = M.T @ self.noise_precision @ M

    def _ll(self, X):
        r = self.y - X @ self.M.T
        return self._const - 0.5 * np.einsum("ni,ij,nj->n", r, self.noise_precision, r)

    def _grad(self, X):
        r = self.y - X @ self.M.T
        return r @ self.noise_precision @ self.M

    def _hess(self, X):
        return np.broadcast_to(-self._fisher, (X.shape[0], self.dim, self.dim)).copy()


class PoissonLikelihood(Likelihood):
    """Independent counts: ``counts[r, j] ~ Poisson(x_j)``.

    ``counts`` may be a scalar (one observation of a 1-d rate), a vector of
    length ``dim`` (one count per rate) or an ``(m, dim)`` array of repeats.
    """

    kind = "poisson"

    def __init__(self, counts, dim=1):
        c = np.asarray(counts, dtype=float)
        if c.ndim == 0:
            c = c.reshape(1, 1)
        elif c.ndim == 1:
            c = c.reshape(-1, 1) if dim == 1 else c.reshape(1, dim)
        if c.shape[1] != dim or np.any(c < 0) or np.any(c != np.round(c)):
            raise ValueError("counts must be non-negative integers")
        self.counts = c
        self.dim = dim
        self._ysum = c.sum(axis=0)
        self._m = c.shape[0]
        self._const = -float(np.sum(special.gammaln(c + 1.0)))

    def _ll(self, X):
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.sum(special.xlogy(self._ysum, X) - self._m * X, axis=1) + self._const
        val = np.where(np.all(X >= 0, axis=1), val, -np.inf)
        return val

    def _grad(self, X):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self._ysum / X - self._m

    def _hess(self, X):
        n, d = X.shape
        H = np.zeros((n, d, d))
        with np.errstate(divide="ignore", invalid="ignore"):
            H[:, np.arange(d), np.arange(d)] = -self._ysum / X**2
        return H


class LogisticLikelihood(Likelihood):
    """Bernoulli log-likelihood with log-odds ``features @ x``.

    ``log p = sum_i [c_i s_i - log(1 + exp(s_i))]``, ``s_i = features_i . x``.
    """

    kind = "logistic"

    def __init__(self, features, labels):
        F = np.atleast_2d(np.asarray(features, dtype=float))
        c = np.asarray(labels, dtype=float).reshape(-1)
        if F.shape[0] != c.shape[0]:
            raise ValueError("one label per feature row required")
        if not np.all((c == 0) | (c == 1)):
            raise ValueError("labels must be 0 or 1")
        self.features, self.labels = F, c
        self.dim = F.shape[1]

    def _ll(self, X):
        s = X @ self.features.T
        return np.sum(self.labels * s - np.logaddexp(0.0, s), axis=1)

    def _grad(self, X):
        s = X @ self.features.T
        return (self.labels - special.expit(s)) @ self.features

    def _hess(self, X):
        s = X @ self.features.T
        w = special.expit(s) * special.expit(-s)
        return -np.einsum("nm,mi,mj->nij", w, self.features, self.features)

    def predict(self, X, features):
        """``p(c = 1 | x, y)`` for each parameter row and feature row, shape (n, m)."""
        X, _ = _as_rows(X, self.dim)
        return special.expit(X @ np.atleast_2d(features).T)


class SpectralMagnitudeLikelihood(Likelihood):
    """Gaussian magnitude model: ``|y_k| ~ N(x_i, sigma2)`` for k in group i."""

    kind = "spectral"

    def __init__(self, groups, sigma2):
        self.groups = [np.asarray(g, dtype=float).reshape(-1) for g in groups]
        if any(g.size == 0 for g in self.groups):
            raise ValueError("every sub-band needs at least one component")
        if sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        self.sigma2 = float(sigma2)
        self.dim = len(self.groups)
        self.counts = np.array([g.size for g in self.groups], dtype=float)
        self.sums = np.array([g.sum() for g in self.groups])
        self.sumsq = np.array([np.sum(g**2) for g in self.groups])
        self._const = -0.5 * self.counts.sum() * math.log(2.0 * math.pi * self.sigma2)

    @property
    def band_means(self):
        return self.sums / self.counts

    def _ll(self, X):
        q = self.sumsq - 2.0 * X * self.sums + self.counts * X**2
        return self._const - 0.5 * np.sum(q, axis=1) / self.sigma2

    def _grad(self, X):
        return (self.sums - self.counts * X) / self.sigma2

    def _hess(self, X):
        n, d = X.shape
        H = np.zeros((n, d, d))
        H[:, np.arange(d), np.arange(d)] = -self.counts / self.sigma2
        return H


def log_likelihood(lik: Likelihood, x):
    return lik.log_likelihood(x)


def grad_log_likelihood(lik: Likelihood, x):
    return lik.grad_log_likelihood(x)


# --------------------------------------------------------------------------
# posterior target
# --------------------------------------------------------------------------

class PosteriorTarget:
    """Unnormalized posterior ``log p(x) + log p(y|x)`` on the prior support."""

    normalized = False

    def __init__(self, prior: Prior, likelihood: Likelihood, name: Optional[str] = None):
        if prior.dim != likelihood.dim:
            raise ValueError("prior and likelihood dimensions differ")
        self.prior = prior
        self.likelihood = likelihood
        self.dim = prior.dim
        self.name = name or f"{prior.kind}x{likelihood.kind}"

    def in_support(self, X):
        return self.prior.in_support(X)

    def support(self):
        return self.prior.support()

    def log_density(self, X):
        lp = np.asarray(self.prior.log_density(X), dtype=float)
        out = np.full_like(lp, -np.inf)
        ok = np.isfinite(lp)
        if np.ndim(lp) == 0:
            return float(lp + self.likelihood.log_likelihood(X)) if ok else -np.inf
        if np.any(ok):
            Xr, _ = _as_rows(X, self.dim)
            out[ok] = lp[ok] + self.likelihood.log_likelihood(Xr[ok])
        return out

    log_q_unnorm = log_density

    def grad_log_density(self, X):
        return self.prior.grad_log_density(X) + self.likelihood.grad_log_likelihood(X)

    def hess_log_density(self, X):
        return self.prior.hess_log_density(X) + self.likelihood.hess_log_likelihood(X)

    def describe(self):
        return self.name


def map_estimate(target: PosteriorTarget, x0, grad_tol: float = 1e-8, max_iters: int = 500):
    """Maximizer of ``log p(x) + log p(y|x)``.

    Damped Newton with backtracking, projected onto the prior's support box.
    An exact Laplace prior makes the objective non-smooth; that case is
    solved as an l1-regularised problem by proximal gradient ascent on the
    smooth part (FISTA with backtracking). Convergence is declared on the
    norm of the (projected or proximal) gradient mapping.
    """
    x = np.asarray(x0, dtype=float).reshape(target.dim).copy()
    prior = target.prior
    if isinstance(prior, LaplacePrior) and prior.smoothing == 0:
        return _map_l1(target, x, grad_tol, max_iters)
    lo, hi = prior.support()
    x = np.clip(x, lo, hi)

    def f(z):
        return float(target.log_density(z))

    fx = f(x)
    if not np.isfinite(fx):
        raise ValueError("x0 is outside the posterior support")
    for _ in range(max_iters):
        g = np.asarray(target.grad_log_density(x), dtype=float)
        H = np.asarray(target.hess_log_density(x), dtype=float)
        at_lo = (x <= lo) & (g < 0)
        at_hi = (x >= hi) & (g > 0)
        free = ~(at_lo | at_hi)
        pg = np.where(free, g, 0.0)
        if np.linalg.norm(pg) < grad_tol:
            break
        step = np.zeros_like(x)
        Hf = H[np.ix_(free, free)]
        try:
            L = np.linalg.cholesky(-Hf)
            step[free] = np.linalg.solve(L.T, np.linalg.solve(L, pg[free]))
        except np.linalg.LinAlgError:
            step[free] = pg[free]
        t = 1.0
        while t > 1e-20:
            xn = np.clip(x + t * step, lo, hi)
            fn = f(xn)
            if np.isfinite(fn) and fn >= fx + 1e-4 * float(pg @ (xn - x)) - 1e-14 * max(1.0, abs(fx)):
                break
            t *= 0.5
        else:
            raise DidNotConverge("line search failed in MAP estimation")
        if np.array_equal(xn, x):
            break
        x, fx = xn, fn
    else:
        raise DidNotConverge(f"MAP estimate not converged after {max_iters} iterations")
    H = np.asarray(target.hess_log_density(x), dtype=float)
    free_idx = ~(((x <= lo) & (np.asarray(target.grad_log_density(x)) < 0))
                 | ((x >= hi) & (np.asarray(target.grad_log_density(x)) > 0)))
    if np.any(free_idx):
        ev = np.linalg.eigvalsh(H[np.ix_(free_idx, free_idx)])
        if ev.max() >= 0:
            raise DidNotConverge("Hessian at the MAP point is not negative definite")
    return x


def _map_l1(target, x, grad_tol, max_iters):
    prior = target.prior
    lam = 1.0 / prior.scale
    loc = prior.loc
    lik = target.likelihood

    def smooth(z):
        return float(lik.log_likelihood(z))

    def prox(z, t):
        r = z - loc
        return loc + np.sign(r) * np.maximum(np.abs(r) - t * lam, 0.0)

    def full(z):
        return smooth(z) - float(np.sum(lam * np.abs(z - loc)))

    L = 1.0
    z = x.copy()
    xk = x.copy()
    tk = 1.0
    for it in range(max_iters * 20):
        gz = np.asarray(lik.grad_log_likelihood(z), dtype=float)
        fz = smooth(z)
        while True:
            xn = prox(z + gz / L, 1.0 / L)
            dx = xn - z
            if smooth(xn) >= fz + gz @ dx - 0.5 * L * dx @ dx - 1e-14 * max(1.0, abs(fz)):
                break
            L *= 2.0
        mapping = L * np.linalg.norm(xn - z)
        if mapping < grad_tol:
            return xn if full(xn) >= full(xk) else xk
        fk = full(xk)
        if full(xn) < fk - 1e-14 * max(1.0, abs(fk)):
            # restart momentum when it stops ascending
            z, tk = xk.copy(), 1.0
            continue
        tn = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        z = xn + (tk - 1.0) / tn * (xn - xk)
        xk, tk = xn, tn
    raise DidNotConverge("proximal MAP iteration did not converge")
