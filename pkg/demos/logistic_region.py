"""Posterior credible region for a 2-d logistic regression.

Pushes the 95% prior ball through the fitted map, writes the boundary to
``logistic_region.csv`` and compares Bayes and MAP predictions by AUC.

Run: python3 demos/logistic_region.py
"""

import numpy as np

from otbayes import (FitOptions, GaussianPrior, LogisticLikelihood, PosteriorTarget,
                     credible_region_pushforward, fit, map_estimate, push_samples, roc_curve)

rng = np.random.default_rng(0)
mean = np.array([1.0, 0.5])


def clouds(n):
    X = np.vstack([mean + 1.5 * rng.standard_normal((n, 2)),
                   -mean + 1.5 * rng.standard_normal((n, 2))])
    return X, np.r_[np.ones(n), np.zeros(n)].astype(int)


F, c = clouds(5)
prior = GaussianPrior.standard(2, var=100.0)
lik = LogisticLikelihood(F, c)
target = PosteriorTarget(prior, lik)

tmap, report = fit(target, prior.sample(2000, seed=1), degree=3,
                   opts=FitOptions(strict=False, max_iters=1000))
print(f"fit: {report.termination} in {report.iterations} iterations")

region = credible_region_pushforward(tmap, prior, alpha=0.05, resolution=256)
region.to_csv("logistic_region.csv")
x_map = map_estimate(target, np.zeros(2))
print(f"MAP {np.round(x_map, 3)}; region spans x1 in "
      f"[{region.boundary[:, 0].min():.2f}, {region.boundary[:, 0].max():.2f}]")

F_test, c_test = clouds(50)
Z = push_samples(tmap, prior.sample(2000, seed=2), strict=False).values
bayes = lik.predict(Z, F_test).mean(axis=0)
plug_in = lik.predict(x_map[None, :], F_test)[0]
print(f"AUC Bayes {roc_curve(bayes, c_test).auc:.4f}, MAP {roc_curve(plug_in, c_test).auc:.4f}")
