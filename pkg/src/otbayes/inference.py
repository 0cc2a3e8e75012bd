"""Posterior products from a fitted map.

Monte Carlo expectations, credible regions, Bayes versus plug-in (MAP)
decisions, class posteriors and ROC curves. Everything here works on plain
sample arrays or :class:`~otbayes.samples.SampleSet` objects, so samples
from any source can be plugged in.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammainc, gammaincinv

from .errors import SingleClass, UnsupportedPrior
from .models import GaussianPrior
from .samples import SampleSet
from .transportmap import push_samples


def _values(samples):
    X = samples.values if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def conditional_expectation(samples, f: Callable):
    """Monte Carlo mean of ``f`` over samples, with standard errors.

    ``f`` maps an (n, d) array to (n,) or (n, m) values.

    Returns
    -------
    mean, se : ndarray
        Sample mean and ``sd / sqrt(n)`` per output component.
    """
    X = _values(samples)
    if X.shape[0] < 2:
        raise ValueError("need at least two samples")
    v = np.asarray(f(X), dtype=float)
    v = v.reshape(X.shape[0], -1)
    mean = v.mean(axis=0)
    se = v.std(axis=0, ddof=1) / math.sqrt(v.shape[0])
    if v.shape[1] == 1:
        return float(mean[0]), float(se[0])
    return mean, se


# --------------------------------------------------------------------------
# credible regions
# --------------------------------------------------------------------------

@dataclass
class CredibleRegion:
    """Either a pushed prior-confidence boundary or per-dimension intervals."""

    kind: str
    level: float
    boundary: Optional[np.ndarray] = None
    intervals: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if self.kind not in ("PushforwardBoundary", "MarginalIntervals"):
            raise ValueError(f"unknown region kind {self.kind!r}")

    def contains(self, X) -> np.ndarray:
        """Membership of each row of ``X`` (even-odd rule for 2-d boundaries)."""
        X = np.asarray(X, dtype=float)
        X = X.reshape(1, -1) if X.ndim == 1 else X
        if self.kind == "MarginalIntervals":
            lo, hi = self.intervals[:, 0], self.intervals[:, 1]
            return np.all((X >= lo) & (X <= hi), axis=1)
        if self.boundary.shape[1] != 2:
            raise ValueError("polygon containment is only defined in 2-d")
        return _even_odd(self.boundary, X)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if self.kind == "MarginalIntervals":
                w.writerow(["dim", "lo", "hi"])
                for j, (lo, hi) in enumerate(self.intervals):
                    w.writerow([j + 1, repr(float(lo)), repr(float(hi))])
            else:
                w.writerow([f"x{j + 1}" for j in range(self.boundary.shape[1])])
                for row in self.boundary:
                    w.writerow([repr(float(v)) for v in row])
        return path


def _even_odd(poly, P):
    """Ray casting along +x; ``poly`` is an ordered (m, 2) vertex list."""
    x, y = P[:, 0][:, None], P[:, 1][:, None]
    x1, y1 = poly[:, 0][None, :], poly[:, 1][None, :]
    x2, y2 = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    straddle = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    hits = straddle & (x < xcross)
    return (hits.sum(axis=1) % 2) == 1


def prior_confidence_radius(prior, alpha: float) -> float:
    """Radius of the central ball holding ``1 - alpha`` of an isotropic Gaussian.

    ``|X - m|^2 / sigma^2`` is chi-square with ``d`` degrees of freedom; its
    quantile is found by inverting the regularized lower incomplete gamma
    function.
    """
    if not isinstance(prior, GaussianPrior) or not prior.is_isotropic():
        raise UnsupportedPrior("confidence balls need an isotropic Gaussian prior; "
                               "use marginal_credible_intervals instead")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    d = prior.dim
    sigma2 = float(prior.cov[0, 0])
    q = 2.0 * gammaincinv(0.5 * d, 1.0 - alpha)
    return math.sqrt(sigma2 * q)


def chi2_cdf(x: float, d: int) -> float:
    return float(gammainc(0.5 * d, 0.5 * x))


def credible_region_pushforward(tmap, prior, alpha: float = 0.05,
                                resolution: int = 256) -> CredibleRegion:
    """Push the prior's ``1 - alpha`` confidence sphere through ``tmap``.

    In 2-d the result is a closed polyline in angular order. For ``d != 2``
    the boundary is a cloud of pushed points on the sphere (a Fibonacci-style
    quasi-uniform grid for d=3, random directions otherwise).
    """
    r = prior_confidence_radius(prior, alpha)
    d = prior.dim
    center = np.asarray(prior.mean, dtype=float)
    if d == 1:
        pts = np.array([[-r], [r]])
    elif d == 2:
        theta = 2.0 * np.pi * np.arange(resolution) / resolution
        pts = r * np.column_stack([np.cos(theta), np.sin(theta)])
    else:
        rng = np.random.default_rng(0)
        u = rng.standard_normal((resolution, d))
        pts = r * u / np.linalg.norm(u, axis=1, keepdims=True)
    pushed = push_samples(tmap, pts + center)
    return CredibleRegion("PushforwardBoundary", 1.0 - alpha, boundary=pushed.values.copy())


def marginal_credible_intervals(samples, alpha: float = 0.05) -> CredibleRegion:
    """Equal-tail per-dimension intervals (midpoint quantile convention).

    At n=2000 and alpha=0.05 this leaves exactly 50 samples outside each end.
    """
    X = _values(samples)
    if X.shape[0] < 100:
        raise ValueError("need at least 100 samples for marginal intervals")
    q = np.quantile(X, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0, method="midpoint")
    return CredibleRegion("MarginalIntervals", 1.0 - alpha, intervals=q.T.copy())


# --------------------------------------------------------------------------
# decisions
# --------------------------------------------------------------------------

@dataclass
class DecisionProblem:
    """Finite action set with either a parameter loss or a label loss.

    Parameters
    ----------
    actions
        Candidate actions, in tie-break order.
    loss
        ``loss(action, X)`` returning one loss per row of ``X``.
    loss_matrix
        Alternatively, a (n_actions, n_labels) table; combined with
        ``label_model(X) -> (n, n_labels)`` class probabilities.
    """

    actions: Sequence
    loss: Optional[Callable] = None
    loss_matrix: Optional[np.ndarray] = None
    label_model: Optional[Callable] = None
    action_names: Optional[list] = field(default=None)

    def __post_init__(self):
        self.actions = list(self.actions)
        if not self.actions:
            raise ValueError("a decision problem needs at least one action")
        if (self.loss is None) == (self.loss_matrix is None):
            raise ValueError("give exactly one of loss or loss_matrix")
        if self.loss_matrix is not None:
            self.loss_matrix = np.asarray(self.loss_matrix, dtype=float)
            if self.label_model is None:
                raise ValueError("a loss matrix needs a label_model")
            if self.loss_matrix.shape[0] != len(self.actions):
                raise ValueError("loss matrix needs one row per action")

    def expected_losses(self, X) -> np.ndarray:
        X = _values(X)
        if self.loss is not None:
            return np.array([float(np.mean(self.loss(a, X))) for a in self.actions])
        probs = np.asarray(self.label_model(X), dtype=float).reshape(X.shape[0], -1)
        return self.loss_matrix @ probs.mean(axis=0)


def bayes_action(problem: DecisionProblem, samples):
    """Action minimizing the Monte Carlo posterior expected loss.

    Returns the action (first one on ties) and the per-action expected losses.
    """
    el = problem.expected_losses(samples)
    return problem.actions[int(np.argmin(el))], el


def map_action(problem: DecisionProblem, x_map):
    """Plug-in decision: minimize the loss at the single point ``x_map``."""
    x = np.asarray(x_map, dtype=float).reshape(1, -1)
    el = problem.expected_losses(x)
    return problem.actions[int(np.argmin(el))]


def enumerate_bayes_action(problem: DecisionProblem, samples):
    """Reference implementation: explicit double loop over actions and samples."""
    X = _values(samples)
    best, best_val = None, math.inf
    for a_idx, a in enumerate(problem.actions):
        total = 0.0
        for i in range(X.shape[0]):
            row = X[i:i + 1]
            if problem.loss is not None:
                total += float(np.asarray(problem.loss(a, row)).reshape(-1)[0])
            else:
                p = np.asarray(problem.label_model(row), dtype=float).reshape(-1)
                total += float(problem.loss_matrix[a_idx] @ p)
        val = total / X.shape[0]
        if val < best_val:
            best, best_val = a, val
    return best


def threshold_loss(tau: float):
    """Count of components whose ``|x_j| > tau`` status is misjudged by ``a``."""

    def loss(a, X):
        a = np.asarray(a, dtype=int)
        big = np.abs(X) > tau
        small = np.abs(X) < tau
        wrong = ((a == 1) & small) | ((a == 0) & big)
        return wrong.sum(axis=1).astype(float)

    return loss


def threshold_problem(d: int, tau: float) -> DecisionProblem:
    """All ``2**d`` binary threshold decisions with the counting loss."""
    actions = [tuple(a) for a in itertools.product((0, 1), repeat=d)]
    return DecisionProblem(actions, loss=threshold_loss(tau))


def class_posterior(samples, label_model: Callable, tmap=None) -> float:
    """Mean of ``p(c=1 | Z_i)`` over posterior draws ``Z_i``.

    If ``tmap`` is given, ``samples`` are prior draws and are pushed first.
    """
    if tmap is not None:
        samples = push_samples(tmap, samples, strict=False)
    X = _values(samples)
    p = np.asarray(label_model(X), dtype=float).reshape(-1)
    # fsum keeps a constant label model exact
    return float(np.clip(math.fsum(p) / p.size, 0.0, 1.0))


@dataclass
class ROCCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        return path


def roc_curve(scores, labels) -> ROCCurve:
    """ROC points at every distinct score (descending, ties grouped) and AUC.

    The first point is (0, 0) at threshold ``+inf``; with ties grouped the
    trapezoid AUC equals the Mann-Whitney statistic exactly.
    """
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise SingleClass("ROC needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / n1]
    fpr = np.r_[0.0, fp / n0]
    thr = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))
    return ROCCurve(fpr, tpr, thr, auc)


def auc_pair_count(scores, labels) -> float:
    """``(concordant + ties / 2) / (n1 * n0)`` by explicit pair counting."""
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise SingleClass("need both classes")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (pos.size * neg.size))
