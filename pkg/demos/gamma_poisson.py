"""Fit the Gamma prior / Poisson count posterior and compare with the closed form.

Run: python3 demos/gamma_poisson.py
"""

import math

import numpy as np
from scipy import stats

from otbayes import (GammaPrior, PoissonLikelihood, PosteriorTarget, diagnose, fit,
                     marginal_credible_intervals, push_samples)

prior = GammaPrior(2.0, 0.5)            # shape 2, scale 0.5
target = PosteriorTarget(prior, PoissonLikelihood([1]))
exact = GammaPrior(3.0, 1.0 / 3.0)      # conjugate update for y = 1

tmap, report = fit(target, prior.sample(1000, seed=0), degree=5)
print(f"fit: {report.termination} in {report.iterations} iterations")

fresh = prior.sample(2000, seed=1)
post = push_samples(tmap, fresh)
print(f"posterior mean {post.values.mean():.4f} (exact 1.0)")
print(f"KS vs closed form {stats.kstest(post.values[:, 0], exact.cdf).statistic:.4f}")

rep = diagnose(tmap, target, fresh, normalized_target=exact)
print(f"log beta from map {rep.log_beta_map:.4f}, exact {math.log(8 / 27):.4f}")
print(f"var T {rep.var_T:.4g}, KL {rep.kl_estimate:.4g}")

lo, hi = marginal_credible_intervals(post, 0.05).intervals[0]
print(f"95% interval [{lo:.3f}, {hi:.3f}], exact "
      f"[{exact.ppf(0.025)[0]:.3f}, {exact.ppf(0.975)[0]:.3f}]")
print("quantiles of pushed draws:", np.round(np.quantile(post.values, [0.1, 0.5, 0.9]), 3))
