"""Desk-scale scenarios with synthetic data, each returning a metrics report.

Scenarios
---------
gamma_poisson
    Conjugate Gamma prior / Poisson count; fit quality against the closed
    form as the number of fitting samples grows.
uniform_example
    Push ``unif[lo, hi]`` onto ``unif[0, 1]``; the answer is affine.
sparse_threshold
    Laplace prior, random linear Gaussian forward model, per-component
    "is ``|x_j| > tau``" decisions, Bayes versus MAP.
logistic_sim
    Bayesian logistic regression on two Gaussian class clouds; ROC of the
    Bayes class posterior versus the MAP plug-in.
spectral_staging
    Exponential prior on 8 sub-band spectral magnitudes, a rule-based stage
    model and an asymmetric loss; Bayes versus MAP stage decisions.

Every random quantity comes from a named sub-stream of ``cfg.seed``, so a
trial's result does not depend on the thread count or on the other trials.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from . import diagnostics as diag
from .errors import FitError, OTBayesError
from .inference import (DecisionProblem, bayes_action, map_action, roc_curve,
                        threshold_loss, threshold_problem)
from .models import (ExponentialPrior, GammaPrior, GaussianLinearLikelihood, GaussianPrior,
                     LaplacePrior, LogisticLikelihood, PoissonLikelihood, PosteriorTarget,
                     SpectralMagnitudeLikelihood, UniformBoxPrior, map_estimate)
from .polybasis import gram_schmidt_empirical
from .samples import SampleSet, substream, substream_seed
from .solver import FitOptions, affine_ot_start, fit
from .transportmap import ComposedMap, push_samples

SCENARIOS = ("gamma_poisson", "uniform_example", "sparse_threshold",
             "logistic_sim", "spectral_staging")

# per-scenario defaults: (n_train, n_eval, degree, params)
DEFAULTS = {
    "gamma_poisson": (1000, 2000, 5, {
        "a": 2.0, "b": 0.5, "y": 1, "n_values": [50, 200, 1000], "n_seeds": 5,
    }),
    "uniform_example": (2000, 2000, 5, {"lo": 0.0, "hi": 2.0, "grid_points": 1001}),
    "sparse_threshold": (2000, 2000, 2, {
        "m": 3, "d": 3, "b": 1.0 / math.sqrt(2.0), "noise_var": 0.1, "n_trials": 200,
        "tail_mass": 0.95, "stage1_degree": 3, "smoothing": 0.05, "stage2_max_iters": 40,
    }),
    "logistic_sim": (1000, 2000, 3, {
        "dim": 2, "class_mean": [1.0, 0.5], "class_sd": 1.5, "n_train_points": 10,
        "n_test_points": 100, "prior_var": 1.0, "n_repeats": 1,
    }),
    "spectral_staging": (1000, 2000, 5, {
        "n_windows": 200, "sigma": 5.0, "gamma": None, "truth": "prior",
        "variability": 0.25, "fs": 100.0, "window_seconds": 5.0,
    }),
}

STAGES = ("W", "L", "D", "R")

# sub-band edges in Hz: delta, theta, alpha, beta (two halves), high band (three thirds)
BAND_EDGES = (0.5, 4.0, 8.0, 12.0, 23.5, 35.0, 40.0, 45.0, 50.0)

# mean per-bin magnitude in each sub-band for each stage
STAGE_TEMPLATES = {
    "W": (6.0, 4.0, 6.0, 4.0, 3.0, 2.5, 2.0, 2.0),
    "L": (30.0, 15.0, 6.0, 3.0, 1.5, 0.3, 0.2, 0.2),
    "D": (60.0, 10.0, 3.0, 1.5, 0.8, 0.2, 0.15, 0.15),
    "R": (10.0, 8.0, 3.0, 1.5, 1.0, 0.3, 0.2, 0.2),
}

# rows of p(c | x) in STAGES order, selected by the first matching condition
STAGE_RULE_ROWS = np.array([
    [0.8, 0.1, 0.05, 0.05],   # high band above 5% of total
    [0.1, 0.2, 0.05, 0.65],   # total below 1000
    [0.1, 0.6, 0.2, 0.1],     # delta below 60% of total
    [0.05, 0.3, 0.6, 0.05],   # delta at least 60% of total
])


def stage_loss_matrix() -> np.ndarray:
    """Symmetric stage loss: W-D 3, W-L 2, W-R 2, other confusions 1."""
    idx = {s: i for i, s in enumerate(STAGES)}
    L = np.ones((4, 4)) - np.eye(4)
    for other, v in (("D", 3.0), ("L", 2.0), ("R", 2.0)):
        L[idx["W"], idx[other]] = L[idx[other], idx["W"]] = v
    return L


def subband_bin_counts(fs: float = 100.0, window_seconds: float = 5.0) -> np.ndarray:
    """Number of DFT bins falling in each sub-band (last band closed at its top)."""
    n = int(round(fs * window_seconds))
    freqs = np.arange(n // 2 + 1) * fs / n
    counts = []
    for j in range(len(BAND_EDGES) - 1):
        lo, hi = BAND_EDGES[j], BAND_EDGES[j + 1]
        last = j == len(BAND_EDGES) - 2
        inside = (freqs >= lo) & ((freqs <= hi) if last else (freqs < hi))
        counts.append(int(inside.sum()))
    return np.array(counts)


def stage_probabilities(X, bin_counts) -> np.ndarray:
    """``p(c | x)`` rows (W, L, D, R) from sub-band mean magnitudes ``X`` (n, 8).

    Band totals are per-bin means times bin counts; shares are relative to
    the total over all eight bands.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    band = X * np.asarray(bin_counts, dtype=float)
    total = band.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        hf = np.where(total > 0, band[:, 5:].sum(axis=1) / total, 0.0)
        delta = np.where(total > 0, band[:, 0] / total, 0.0)
    row = np.where(hf > 0.05, 0, np.where(total < 1000.0, 1, np.where(delta < 0.6, 2, 3)))
    return STAGE_RULE_ROWS[row]


# --------------------------------------------------------------------------
# config / report
# --------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    scenario: str
    seed: int = 0
    n_train: Optional[int] = None
    n_eval: Optional[int] = None
    degree: Optional[int] = None
    threads: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        n_train, n_eval, degree, params = DEFAULTS[self.scenario]
        unknown = set(self.params) - set(params)
        if unknown:
            raise ValueError(f"unknown parameter(s) for {self.scenario}: {sorted(unknown)}")
        self.params = {**params, **self.params}
        self.n_train = n_train if self.n_train is None else int(self.n_train)
        self.n_eval = n_eval if self.n_eval is None else int(self.n_eval)
        self.degree = degree if self.degree is None else int(self.degree)
        for name in ("n_train", "n_eval", "degree", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentReport:
    scenario: str
    metrics: dict
    diagnostics: Optional[dict] = None
    wall_time: float = 0.0
    trials: list = field(default_factory=list)
    config: Optional[dict] = None

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "metrics": self.metrics,
                "diagnostics": self.diagnostics, "wall_time": self.wall_time,
                "config": self.config}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    def write(self, out_dir) -> Path:
        """Write ``report.json`` and, if there are per-trial rows, ``trials.csv``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n")
        if self.trials:
            keys = list(self.trials[0].keys())
            with open(out / "trials.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys)
                w.writeheader()
                for row in self.trials:
                    w.writerow({k: _csv_value(row.get(k)) for k in keys})
        return out / "report.json"


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def _pmap(fn, items, threads):
    """Order-preserving map, threaded when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def run(cfg: ExperimentConfig) -> ExperimentReport:
    return RUNNERS[cfg.scenario](cfg)


# --------------------------------------------------------------------------
# gamma / poisson
# --------------------------------------------------------------------------

def run_gamma_poisson(cfg: ExperimentConfig) -> ExperimentReport:
    """Fit quality versus the number of fitting samples, several seeds per size.

    Top-level metrics are seed averages at the largest size. ``kl`` excludes
    evaluation rows where the fitted map is infeasible (counted in
    ``kl_excluded``); ``kl_strict`` is ``inf`` whenever any row is.
    """
    t0 = time.perf_counter()
    p = cfg.params
    a, b, y = float(p["a"]), float(p["b"]), int(p["y"])
    prior = GammaPrior(a, b)
    target = PosteriorTarget(prior, PoissonLikelihood([y]), name="gamma_poisson")
    exact = GammaPrior(a + y, b / (b + 1.0))
    opts = FitOptions(strict=False)
    tasks = [(int(n), s) for n in p["n_values"] for s in range(int(p["n_seeds"]))]

    def one(task):
        n, s = task
        train = prior.sample(n, seed=substream_seed(cfg.seed, "fit", n, s))
        ev = prior.sample(cfg.n_eval, seed=substream_seed(cfg.seed, "eval", n, s))
        tmap, rep = fit(target, train, degree=cfg.degree, opts=opts)
        T, ok = diag.t_values(tmap, target, ev)
        kl, n_ex = diag.kl_with_exclusions(tmap, prior, exact, ev)
        pushed = push_samples(tmap, ev, strict=False).values[:, 0]
        return {
            "n": n, "seed_index": s,
            "var_T": float(np.var(T[ok], ddof=1)),
            "log_beta_map": float(np.mean(T[ok])),
            "log_beta_mc": diag.log_beta_mc(target, ev),
            "kl": kl, "kl_excluded": n_ex,
            "kl_strict": diag.kl_source_to_induced(tmap, prior, exact, ev),
            "ks": float(stats.kstest(pushed, exact.cdf).statistic),
            "t_excluded": int((~ok).sum()),
            "iterations": rep.iterations, "termination": rep.termination,
        }

    rows = _pmap(one, tasks, cfg.threads)
    sweep = []
    for n in p["n_values"]:
        sel = [r for r in rows if r["n"] == int(n)]
        sweep.append({k: float(np.mean([r[k] for r in sel]))
                      for k in ("var_T", "kl", "kl_strict", "ks", "log_beta_map", "log_beta_mc")}
                     | {"n": int(n)})
    top = sweep[-1]
    n_last = int(p["n_values"][-1])
    tmap, _ = fit(target, prior.sample(n_last, seed=substream_seed(cfg.seed, "fit", n_last, 0)),
                  degree=cfg.degree, opts=opts)
    ev = prior.sample(cfg.n_eval, seed=substream_seed(cfg.seed, "eval", n_last, 0))
    report = diag.diagnose(tmap, target, ev, normalized_target=exact)
    metrics = {
        "var_T": top["var_T"], "kl": top["kl"], "ks": top["ks"],
        "log_beta_map": top["log_beta_map"], "log_beta_mc": top["log_beta_mc"],
        "log_beta_exact": math.log(_gamma_poisson_beta(a, b, y)),
        "sweep": sweep,
    }
    return ExperimentReport("gamma_poisson", metrics, report.to_dict(),
                            time.perf_counter() - t0, rows, cfg.to_dict())


def _gamma_poisson_beta(a, b, y):
    """Marginal probability of count ``y`` under a Gamma(a, b) rate (negative binomial)."""
    return math.exp(math.lgamma(a + y) - math.lgamma(a) - math.lgamma(y + 1)
                    + y * math.log(b / (b + 1.0)) - a * math.log(b + 1.0))


# --------------------------------------------------------------------------
# uniform -> uniform
# --------------------------------------------------------------------------

def run_uniform_example(cfg: ExperimentConfig) -> ExperimentReport:
    """``unif[lo, hi]`` to ``unif[0, 1]``; sup error against ``(x - lo)/(hi - lo)``.

    The error is measured on an even grid over the central 99% of the source.
    """
    t0 = time.perf_counter()
    p = cfg.params
    lo, hi = float(p["lo"]), float(p["hi"])
    source = UniformBoxPrior(lo, hi)
    target = UniformBoxPrior(0.0, 1.0)
    train = source.sample(cfg.n_train, seed=substream_seed(cfg.seed, "fit"))
    tmap, rep = fit(target, train, degree=cfg.degree, source=source,
                    opts=FitOptions(strict=False))
    w = hi - lo
    grid = np.linspace(lo + 0.005 * w, hi - 0.005 * w, int(p["grid_points"]))
    err = np.abs(tmap.apply(grid)[:, 0] - (grid - lo) / w)
    ev = source.sample(cfg.n_eval, seed=substream_seed(cfg.seed, "eval"))
    metrics = {
        "sup_error": float(err.max()),
        "kl": diag.kl_source_to_induced(tmap, source, target, ev),
        "termination": rep.termination, "iterations": rep.iterations,
        "feasible_fraction": 1.0 - tmap.feasibility_report(ev).fraction,
    }
    rows = [{"x": float(g), "S": float(s), "exact": float((g - lo) / w)}
            for g, s in zip(grid, tmap.apply(grid)[:, 0])]
    return ExperimentReport("uniform_example", metrics, None, time.perf_counter() - t0,
                            rows, cfg.to_dict())


# --------------------------------------------------------------------------
# sparse threshold decisions
# --------------------------------------------------------------------------

def laplace_tail_threshold(b: float, mass: float = 0.95) -> float:
    """``tau`` with ``P(|x| <= tau) = mass`` for a Laplace(0, b) coordinate."""
    return -b * math.log(1.0 - mass)


def run_sparse_threshold(cfg: ExperimentConfig) -> ExperimentReport:
    """Bayes versus MAP decisions on ``|x_j| > tau`` for ``y = M x + e``.

    The posterior is reached through a two-stage chain: a Gaussian base is
    pushed to the Laplace prior once (stage 1), and each trial fits the
    prior-to-posterior map on the pushed draws (stage 2). Both stages use
    bases orthonormalised on their own training draws. ``cfg.n_eval`` fresh
    base draws go through both maps to give the posterior sample for each
    trial.

    The exact Laplace density has a kink at zero that stalls Newton-type
    fitting, so both fits use the smoothed Laplace (``smoothing``); truth
    draws and the MAP estimate use the exact prior.

    Stage 2 starts from the Gaussian OT map onto the Laplace approximation
    of the posterior and is capped at ``stage2_max_iters``. Maps that hit
    the cap are still used (every accepted step improved the objective);
    ``stage2_converged_fraction`` reports how many converged.
    """
    t0 = time.perf_counter()
    p = cfg.params
    m, d, b = int(p["m"]), int(p["d"]), float(p["b"])
    noise_var = float(p["noise_var"])
    tau = laplace_tail_threshold(b, float(p["tail_mass"]))
    prior = LaplacePrior(b, dim=d)
    smooth = LaplacePrior(b, dim=d, smoothing=float(p["smoothing"]))
    base = GaussianPrior.standard(d, var=2.0 * b * b)
    opts = FitOptions(strict=False, max_iters=int(p["stage2_max_iters"]))

    base_train = base.sample(cfg.n_train, seed=substream_seed(cfg.seed, "stage1"))
    spec1 = gram_schmidt_empirical(base_train, int(p["stage1_degree"]))
    stage1, rep1 = fit(smooth, base_train, spec=spec1, source=base, opts=FitOptions(strict=False))
    mid = push_samples(stage1, base_train, strict=False)
    mid = SampleSet(mid.values, seed=mid.seed, source=mid.source, map_hash=mid.map_hash)
    spec2 = gram_schmidt_empirical(mid, cfg.degree)
    problem = threshold_problem(d, tau)
    loss = threshold_loss(tau)

    def one(i):
        rng = substream(cfg.seed, "trial", i)
        M = rng.standard_normal((m, d))
        x_true = prior.sample(1, seed=int(rng.integers(2**32))).values[0]
        e = math.sqrt(noise_var) * rng.standard_normal(m)
        y = M @ x_true + e
        lik = GaussianLinearLikelihood(M, noise_var * np.eye(m), y)
        target = PosteriorTarget(prior, lik)
        fit_target = PosteriorTarget(smooth, lik)
        row = {"trial": i, "failed": False, "error": ""}
        try:
            # start from the Gaussian OT map onto the Laplace approximation
            x_lap = map_estimate(fit_target, np.zeros(d))
            cov = np.linalg.inv(-np.asarray(fit_target.hess_log_density(x_lap), dtype=float))
            W0 = affine_ot_start(spec2, mid, x_lap, cov)
            stage2, rep2 = fit(fit_target, mid, spec=spec2, opts=opts, source=smooth, W0=W0)
            chain = ComposedMap(stage1, stage2)
            ev = base.sample(cfg.n_eval, seed=int(rng.integers(2**32)))
            Z = push_samples(chain, ev, strict=False)
            Zv = Z.values if Z.flags is None else Z.values[~Z.flags]
            a_bayes, _ = bayes_action(problem, Zv)
            x_map = map_estimate(target, np.zeros(d))
            a_map = map_action(problem, x_map)
        except (OTBayesError, np.linalg.LinAlgError) as exc:
            row.update(failed=True, error=type(exc).__name__)
            return row
        lb = float(loss(a_bayes, x_true[None, :])[0])
        lm = float(loss(a_map, x_true[None, :])[0])
        row.update(loss_bayes=lb, loss_map=lm, action_bayes=list(a_bayes),
                   action_map=list(a_map), iterations=rep2.iterations,
                   termination=rep2.termination,
                   agree=int(np.sum(np.array(a_bayes) == np.array(a_map))))
        return row

    rows = _pmap(one, range(int(p["n_trials"])), cfg.threads)
    ok = [r for r in rows if not r["failed"]]
    n_failed = len(rows) - len(ok)
    lb = np.array([r["loss_bayes"] for r in ok])
    lm = np.array([r["loss_map"] for r in ok])
    metrics = {
        "tau": tau,
        "n_trials": len(rows), "n_failed": n_failed,
        "failed_fraction": n_failed / max(1, len(rows)),
        "mean_loss_bayes": float(lb.mean()) if lb.size else math.nan,
        "mean_loss_map": float(lm.mean()) if lm.size else math.nan,
        "hist_bayes": np.bincount(lb.astype(int), minlength=d + 1).tolist(),
        "hist_map": np.bincount(lm.astype(int), minlength=d + 1).tolist(),
        "component_agreement": float(np.sum([r["agree"] for r in ok]) / max(1, d * len(ok))),
        "stage1_termination": rep1.termination,
        "stage2_converged_fraction": float(np.mean(
            [r["termination"] == "Converged" for r in ok])) if ok else math.nan,
    }
    for r in rows:
        r.setdefault("loss_bayes", math.nan)
        r.setdefault("loss_map", math.nan)
        r.setdefault("action_bayes", [])
        r.setdefault("action_map", [])
        r.setdefault("iterations", 0)
        r.setdefault("termination", "")
        r.setdefault("agree", 0)
    return ExperimentReport("sparse_threshold", metrics, None, time.perf_counter() - t0,
                            rows, cfg.to_dict())


# --------------------------------------------------------------------------
# logistic regression ROC
# --------------------------------------------------------------------------

def _class_clouds(rng, n, mean, sd):
    """``n`` points, half from N(+mean, sd^2 I) (label 1) and half from N(-mean, sd^2 I)."""
    n1 = n // 2
    n0 = n - n1
    mean = np.asarray(mean, dtype=float)
    X1 = mean + sd * rng.standard_normal((n1, mean.size))
    X0 = -mean + sd * rng.standard_normal((n0, mean.size))
    return np.vstack([X1, X0]), np.r_[np.ones(n1, dtype=int), np.zeros(n0, dtype=int)]


def logistic_trial(cfg: ExperimentConfig, rep_index: int = 0) -> dict:
    p = cfg.params
    dim = int(p["dim"])
    mean = np.resize(np.asarray(p["class_mean"], dtype=float), dim)
    sd = float(p["class_sd"])
    rng = substream(cfg.seed, "repeat", rep_index)
    F_train, c_train = _class_clouds(rng, int(p["n_train_points"]), mean, sd)
    F_test, c_test = _class_clouds(rng, int(p["n_test_points"]), mean, sd)
    prior = GaussianPrior.standard(dim, var=float(p["prior_var"]))
    lik = LogisticLikelihood(F_train, c_train)
    target = PosteriorTarget(prior, lik, name="logistic")
    train = prior.sample(cfg.n_train, seed=substream_seed(cfg.seed, "repeat", rep_index, "fit"))
    tmap, rep = fit(target, train, degree=cfg.degree, opts=FitOptions(strict=False))
    ev = prior.sample(cfg.n_eval, seed=substream_seed(cfg.seed, "repeat", rep_index, "eval"))
    Z = push_samples(tmap, ev, strict=False)
    Zv = Z.values if Z.flags is None else Z.values[~Z.flags]
    score_bayes = lik.predict(Zv, F_test).mean(axis=0)
    x_map = map_estimate(target, np.zeros(dim))
    score_map = lik.predict(x_map[None, :], F_test)[0]
    roc_b = roc_curve(score_bayes, c_test)
    roc_m = roc_curve(score_map, c_test)
    return {"repeat": rep_index, "auc_bayes": roc_b.auc, "auc_map": roc_m.auc,
            "var_T": diag.variance_of_T(tmap, target, ev), "termination": rep.termination,
            "roc_bayes": roc_b, "roc_map": roc_m, "x_map": x_map.tolist()}


def run_logistic_sim(cfg: ExperimentConfig) -> ExperimentReport:
    """Bayes class posterior ``mean_i sigmoid(Z_i . f)`` versus ``sigmoid(x_MAP . f)``.

    Labels are balanced in training and test sets. ``n_repeats`` independent
    data sets are drawn from sub-streams of the seed.
    """
    t0 = time.perf_counter()
    reps = _pmap(lambda r: logistic_trial(cfg, r), range(int(cfg.params["n_repeats"])),
                 cfg.threads)
    ab = np.array([r["auc_bayes"] for r in reps])
    am = np.array([r["auc_map"] for r in reps])
    metrics = {
        "auc_bayes": float(ab.mean()), "auc_map": float(am.mean()),
        "auc_bayes_all": ab.tolist(), "auc_map_all": am.tolist(),
        "bayes_better": int(np.sum(ab > am)), "n_repeats": len(reps),
        "roc_bayes": {"fpr": reps[0]["roc_bayes"].fpr, "tpr": reps[0]["roc_bayes"].tpr},
        "roc_map": {"fpr": reps[0]["roc_map"].fpr, "tpr": reps[0]["roc_map"].tpr},
    }
    rows = [{k: r[k] for k in ("repeat", "auc_bayes", "auc_map", "var_T", "termination")}
            for r in reps]
    return ExperimentReport("logistic_sim", metrics, None, time.perf_counter() - t0,
                            rows, cfg.to_dict())


# --------------------------------------------------------------------------
# spectral stage decisions
# --------------------------------------------------------------------------

def band_prior_rates() -> np.ndarray:
    """Exponential rates whose means are the stage-averaged template magnitudes."""
    return 1.0 / np.mean([STAGE_TEMPLATES[s] for s in STAGES], axis=0)


def spectral_window(rng, stage: str, counts, sigma: float, variability: float,
                    rates=None):
    """True sub-band magnitudes and noisy per-bin magnitudes.

    With ``rates`` the true magnitudes are Exponential draws (the inference
    prior); otherwise they are the ``stage`` template perturbed log-normally.
    """
    if rates is not None:
        x_true = rng.exponential(1.0 / np.asarray(rates, dtype=float))
    else:
        tmpl = np.asarray(STAGE_TEMPLATES[stage], dtype=float)
        x_true = tmpl * np.exp(variability * rng.standard_normal(tmpl.size))
    groups = [x_true[i] + sigma * rng.standard_normal(int(c)) for i, c in enumerate(counts)]
    return x_true, groups


def spectral_posterior_samples(groups, sigma, gamma, n_train, n_eval, degree, seed):
    """Posterior draws of the sub-band magnitudes and the MAP point.

    Prior and likelihood factorize over sub-bands, so each band gets its own
    one-dimensional map from the Exponential prior.
    """
    cols, x_map, var_T = [], [], []
    gammas = np.broadcast_to(np.asarray(gamma, dtype=float), (len(groups),))
    opts = FitOptions(strict=False)
    for i, g in enumerate(groups):
        prior = ExponentialPrior(float(gammas[i]))
        target = PosteriorTarget(prior, SpectralMagnitudeLikelihood([g], sigma * sigma))
        train = prior.sample(n_train, seed=substream_seed(seed, "band", i, "fit"))
        tmap, _ = fit(target, train, degree=degree, opts=opts)
        ev = prior.sample(n_eval, seed=substream_seed(seed, "band", i, "eval"))
        Z = push_samples(tmap, ev, strict=False)
        z = Z.values[:, 0]
        if Z.flags is not None and Z.flags.any():
            z = np.where(Z.flags, np.nan, z)
        cols.append(z)
        x_map.append(float(map_estimate(target, np.array([max(np.mean(g), 1.0)]))[0]))
        var_T.append(diag.variance_of_T(tmap, target, ev))
    Z = np.column_stack(cols)
    Z = Z[np.all(np.isfinite(Z), axis=1)]
    return Z, np.array(x_map), float(np.mean(var_T))


def run_spectral_staging(cfg: ExperimentConfig) -> ExperimentReport:
    """Stage decisions from synthetic spectra, Bayes versus MAP.

    With ``truth="prior"`` (default) each window's true magnitudes are drawn
    from the Exponential prior used for inference, so the model is well
    specified. With ``truth="template"`` a stage is picked uniformly and its
    template is perturbed log-normally (``variability``); the prior is then
    misspecified for the small high-band magnitudes. Each DFT bin gets
    N(0, sigma^2) noise. ``gamma`` defaults to per-band rates matching the
    stage-averaged templates. The reported ``mean_loss_*`` is the loss expected under the stage model
    at the true magnitudes, ``sum_c L[a, c] p(c | x_true)``; a label drawn
    from that model gives ``mean_realized_loss_*`` and the generating
    stage gives ``mean_template_loss_*``.
    """
    t0 = time.perf_counter()
    p = cfg.params
    counts = subband_bin_counts(float(p["fs"]), float(p["window_seconds"]))
    L = stage_loss_matrix()
    sigma = float(p["sigma"])
    gamma = band_prior_rates() if p["gamma"] is None else np.asarray(p["gamma"], dtype=float)
    if p["truth"] not in ("prior", "template"):
        raise ValueError("truth must be 'prior' or 'template'")
    truth_rates = gamma if p["truth"] == "prior" else None

    def label_model(X):
        return stage_probabilities(X, counts)

    problem = DecisionProblem(list(STAGES), loss_matrix=L, label_model=label_model)

    def one(i):
        rng = substream(cfg.seed, "window", i)
        stage = STAGES[int(rng.integers(4))]
        x_true, groups = spectral_window(rng, stage, counts, sigma, float(p["variability"]),
                                         truth_rates)
        Z, x_map, vT = spectral_posterior_samples(
            groups, sigma, gamma, cfg.n_train, cfg.n_eval, cfg.degree,
            substream_seed(cfg.seed, "window", i, "maps"))
        a_b, _ = bayes_action(problem, Z)
        a_m = map_action(problem, x_map)
        ptrue = label_model(x_true)[0]
        c = STAGES[int(rng.choice(4, p=ptrue))]
        ib, im = STAGES.index(a_b), STAGES.index(a_m)
        return {
            "window": i, "stage": stage, "action_bayes": a_b, "action_map": a_m,
            "loss_bayes": float(L[ib] @ ptrue), "loss_map": float(L[im] @ ptrue),
            "realized_label": c,
            "realized_loss_bayes": float(L[ib, STAGES.index(c)]),
            "realized_loss_map": float(L[im, STAGES.index(c)]),
            "template_loss_bayes": float(L[ib, STAGES.index(stage)]),
            "template_loss_map": float(L[im, STAGES.index(stage)]),
            "var_T": vT,
        }

    rows = _pmap(one, range(int(p["n_windows"])), cfg.threads)

    def mean(k):
        return float(np.mean([r[k] for r in rows]))

    metrics = {
        "mean_loss_bayes": mean("loss_bayes"), "mean_loss_map": mean("loss_map"),
        "mean_realized_loss_bayes": mean("realized_loss_bayes"),
        "mean_realized_loss_map": mean("realized_loss_map"),
        "mean_template_loss_bayes": mean("template_loss_bayes"),
        "mean_template_loss_map": mean("template_loss_map"),
        "hist_realized_bayes": _hist([r["realized_loss_bayes"] for r in rows]),
        "hist_realized_map": _hist([r["realized_loss_map"] for r in rows]),
        "decisions_differ": int(sum(r["action_bayes"] != r["action_map"] for r in rows)),
        "n_windows": len(rows), "bin_counts": counts.tolist(),
        "mean_var_T": mean("var_T"),
    }
    return ExperimentReport("spectral_staging", metrics, None, time.perf_counter() - t0,
                            rows, cfg.to_dict())


def _hist(values):
    v = np.asarray(values, dtype=int)
    return {str(k): int(np.sum(v == k)) for k in range(4)}


RUNNERS = {
    "gamma_poisson": run_gamma_poisson,
    "uniform_example": run_uniform_example,
    "sparse_threshold": run_sparse_threshold,
    "logistic_sim": run_logistic_sim,
    "spectral_staging": run_spectral_staging,
}
