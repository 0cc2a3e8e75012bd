import numpy as np
import pytest

from otbayes.models import GammaPrior, PoissonLikelihood, PosteriorTarget
from otbayes.samples import substream_seed
from otbayes.solver import FitOptions, fit

LOG_BETA_GP = np.log(8.0 / 27.0)


@pytest.fixture(scope="session")
def gp_target():
    return PosteriorTarget(GammaPrior(2.0, 0.5), PoissonLikelihood([1]), name="gamma_poisson")


@pytest.fixture(scope="session")
def gp_exact():
    return GammaPrior(3.0, 1.0 / 3.0)


@pytest.fixture(scope="session")
def gp_fitted(gp_target):
    """Gamma-Poisson map at the reference settings (p=5, n=1000, seed 0)."""
    train = gp_target.prior.sample(1000, seed=substream_seed(0, "fit", 1000, 0))
    tmap, report = fit(gp_target, train, degree=5, opts=FitOptions())
    return tmap, report, train


@pytest.fixture(scope="session")
def gp_eval(gp_target):
    return gp_target.prior.sample(2000, seed=substream_seed(0, "eval", 1000, 0))


@pytest.fixture(scope="session")
def g2_target():
    """2-d Gaussian prior with a linear-Gaussian observation."""
    from otbayes.models import GaussianLinearLikelihood, GaussianPrior
    M = np.array([[1.0, 0.4], [-0.3, 0.8]])
    return PosteriorTarget(GaussianPrior.standard(2), GaussianLinearLikelihood(M, 0.5, [0.7, -0.2]),
                           name="gauss_linear_2d")


@pytest.fixture(scope="session")
def g2_fitted(g2_target):
    train = g2_target.prior.sample(2000, seed=substream_seed(0, "fit", "g2"))
    tmap, report = fit(g2_target, train, degree=2, opts=FitOptions())
    return tmap, report, train


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
