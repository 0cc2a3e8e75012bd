"""Bayesian inference with monotone polynomial transport maps.

A map ``S(x) = W phi(x)`` is fitted so that it pushes prior draws to the
posterior; the fit is a concave program for log-concave posteriors. Pushed
samples then feed credible regions, Bayes decisions and ROC analysis.

Typical use::

    from otbayes import GammaPrior, PoissonLikelihood, PosteriorTarget, fit, push_samples

    prior = GammaPrior(2.0, 0.5)
    target = PosteriorTarget(prior, PoissonLikelihood([1]))
    tmap, report = fit(target, prior.sample(1000, seed=0), degree=5)
    posterior = push_samples(tmap, prior.sample(2000, seed=1))
"""

from .errors import (ConfigError, CorruptFile, DegreeTooLow, DidNotConverge, FitError,
                     FormatVersionMismatch, InfeasiblePoint, InfeasibleRegion, LineSearchStall,
                     MaxIterationsReached, OTBayesError, RequiresNormalizedTarget, SingleClass,
                     TooFewFeasible, UnsupportedPrior)
from .models import (ConstantLikelihood, ExponentialPrior, GammaPrior, GaussianLinearLikelihood,
                     GaussianPrior, LaplacePrior, LogisticLikelihood, PoissonLikelihood,
                     PosteriorTarget, SpectralMagnitudeLikelihood, UniformBoxPrior, map_estimate)
from .polybasis import BasisSpec, Family, gram_schmidt_empirical
from .samples import SampleSet, substream_seed
from .solver import FitOptions, SolveReport, fit, fit_chain
from .transportmap import ComposedMap, TransportMap, identity_init, load, push_samples, save
from .diagnostics import diagnose, kl_source_to_induced, log_beta, variance_of_T
from .inference import (CredibleRegion, DecisionProblem, bayes_action, class_posterior,
                        conditional_expectation, credible_region_pushforward, map_action,
                        marginal_credible_intervals, prior_confidence_radius, roc_curve)

__version__ = "0.1.0"

__all__ = [
    "BasisSpec", "ComposedMap", "ConfigError", "ConstantLikelihood", "CorruptFile",
    "CredibleRegion", "DecisionProblem", "DegreeTooLow", "DidNotConverge", "ExponentialPrior",
    "Family", "FitError", "FitOptions", "FormatVersionMismatch", "GammaPrior",
    "GaussianLinearLikelihood", "GaussianPrior", "InfeasiblePoint", "InfeasibleRegion",
    "LaplacePrior", "LineSearchStall", "LogisticLikelihood", "MaxIterationsReached",
    "OTBayesError", "PoissonLikelihood", "PosteriorTarget", "RequiresNormalizedTarget",
    "SampleSet", "SingleClass", "SolveReport", "SpectralMagnitudeLikelihood", "TooFewFeasible",
    "TransportMap", "UniformBoxPrior", "UnsupportedPrior", "bayes_action", "class_posterior",
    "conditional_expectation", "credible_region_pushforward", "diagnose", "fit", "fit_chain",
    "gram_schmidt_empirical", "identity_init", "kl_source_to_induced", "load", "log_beta",
    "map_action", "map_estimate", "marginal_credible_intervals", "prior_confidence_radius",
    "push_samples", "roc_curve", "save", "substream_seed", "variance_of_T", "__version__",
]
