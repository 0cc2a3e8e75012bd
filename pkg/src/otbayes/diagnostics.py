"""Fit-quality diagnostics built on the T-operator.

For a map ``S`` and prior draws ``x``

    T(x) = log q(S(x)) + log det J_S(x) - log p(x)

with ``q`` the unnormalized posterior and ``p`` the prior. At the optimal map
``T`` is constant and equal to ``log beta`` (the marginal likelihood), so the
sample variance of ``T`` measures how far a fitted map is from optimal and its
mean estimates ``log beta``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import InfeasiblePoint, RequiresNormalizedTarget, TooFewFeasible
from .samples import SampleSet
from .transportmap import jacobian_feasible, push_samples

MIN_USABLE_FRACTION = 0.5


def _values(samples, d):
    X = samples.values if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    return X.reshape(-1, d)


def _source_of(target, source):
    if source is not None:
        return source
    src = getattr(target, "prior", None)
    if src is None:
        raise ValueError("a source density is needed (target has no prior)")
    return src


def _logdet(A):
    if A.shape[1] == 1:
        return np.log(A[:, 0, 0])
    return np.linalg.slogdet(A)[1]


def t_values(tmap, target, samples, source=None):
    """T at every row plus a mask of rows where it is defined.

    Rows where the map is infeasible, or maps outside the target support, get
    ``nan`` and ``False`` in the mask.
    """
    source = _source_of(target, source)
    X = _values(samples, tmap.dim)
    Y, A = tmap.apply_with_jacobian(X)
    ok = jacobian_feasible(A)[0] & np.asarray(target.in_support(Y), dtype=bool)
    T = np.full(X.shape[0], np.nan)
    if np.any(ok):
        T[ok] = (np.asarray(target.log_density(Y[ok]), dtype=float)
                 + _logdet(A[ok])
                 - np.asarray(source.log_density(X[ok]), dtype=float))
    ok &= np.isfinite(T)
    return T, ok


def t_operator(tmap, target, x, source=None) -> float:
    """T at a single point; raises :class:`InfeasiblePoint` where undefined."""
    x = np.asarray(x, dtype=float).reshape(1, tmap.dim)
    src = _source_of(target, source)
    if not bool(np.all(src.in_support(x))):
        raise InfeasiblePoint(f"x={x[0].tolist()} is outside the source support")
    if not tmap.feasible_at(x[0]):
        raise InfeasiblePoint(f"map is not orientation preserving at x={x[0].tolist()}")
    T, ok = t_values(tmap, target, x, src)
    if not ok[0]:
        raise InfeasiblePoint(f"S(x) leaves the target support at x={x[0].tolist()}")
    return float(T[0])


def _usable_T(tmap, target, samples, source):
    T, ok = t_values(tmap, target, samples, source)
    n = T.shape[0]
    if n == 0 or ok.sum() < MIN_USABLE_FRACTION * n:
        raise TooFewFeasible(f"T defined on only {int(ok.sum())} of {n} rows")
    return T[ok], n - int(ok.sum())


def variance_of_T(tmap, target, samples, source=None) -> float:
    """Sample variance (ddof=1) of T over rows where it is defined."""
    T, _ = _usable_T(tmap, target, samples, source)
    return float(np.var(T, ddof=1)) if T.size > 1 else 0.0


def log_beta(tmap, target, samples, source=None) -> float:
    """Mean of T, the map-based estimate of the log marginal likelihood."""
    T, _ = _usable_T(tmap, target, samples, source)
    return float(np.mean(T))


def log_beta_mc(target, samples) -> float:
    """``log mean_i exp(log_likelihood(X_i))`` over prior draws ``X_i``."""
    X = _values(samples, target.dim)
    ll = np.asarray(target.likelihood.log_likelihood(X), dtype=float).reshape(-1)
    return float(logsumexp(ll) - math.log(ll.size))


def log_beta_mc_se(target, samples) -> float:
    """Delta-method standard error of :func:`log_beta_mc`."""
    X = _values(samples, target.dim)
    ll = np.asarray(target.likelihood.log_likelihood(X), dtype=float).reshape(-1)
    w = np.exp(ll - ll.max())
    return float(np.std(w, ddof=1) / (np.mean(w) * math.sqrt(w.size)))


def kl_source_to_induced(tmap, source, target_normalized, samples,
                         entropy: str = "paired", exclude_infeasible: bool = False) -> float:
    """``KL(P || P_S)`` with ``p_S(x) = q(S(x)) det J_S(x)`` for a normalized ``q``.

    With ``entropy="paired"`` (default) the source entropy is estimated on
    the same draws, i.e. the estimate is ``mean(log p(X_i) - log p_S(X_i))``.
    This has the same expectation as the closed-form-entropy version
    (``entropy="closed_form"``) but its variance is that of T, which is
    close to zero near the optimum, rather than that of ``log p(X)``.

    Returns ``inf`` when the map is infeasible or sends a sample outside the
    target support, unless ``exclude_infeasible`` is set, in which case those
    rows are dropped (as for the T statistics; see :func:`kl_with_exclusions`).
    """
    if exclude_infeasible:
        return kl_with_exclusions(tmap, source, target_normalized, samples, entropy)[0]
    if not getattr(target_normalized, "normalized", False):
        raise RequiresNormalizedTarget(
            "KL needs a normalized target density; use variance_of_T for posteriors")
    if entropy not in ("paired", "closed_form"):
        raise ValueError("entropy must be 'paired' or 'closed_form'")
    X = _values(samples, tmap.dim)
    Y, A = tmap.apply_with_jacobian(X)
    ok = jacobian_feasible(A)[0]
    inside = np.asarray(target_normalized.in_support(Y), dtype=bool)
    if not (np.all(ok) and np.all(inside)):
        return math.inf
    lq = np.asarray(target_normalized.log_density(Y), dtype=float)
    if not np.all(np.isfinite(lq)):
        return math.inf
    induced = lq + _logdet(A)
    if entropy == "closed_form":
        return float(-source.entropy() - np.mean(induced))
    return float(np.mean(np.asarray(source.log_density(X), dtype=float) - induced))


def kl_with_exclusions(tmap, source, target_normalized, samples, entropy: str = "paired"):
    """KL estimate over rows where the induced density is defined, and the
    number of excluded rows. Raises :class:`TooFewFeasible` below 50%."""
    if not getattr(target_normalized, "normalized", False):
        raise RequiresNormalizedTarget("KL needs a normalized target density")
    X = _values(samples, tmap.dim)
    Y, A = tmap.apply_with_jacobian(X)
    ok = jacobian_feasible(A)[0] & np.asarray(target_normalized.in_support(Y), dtype=bool)
    lq = np.full(X.shape[0], -np.inf)
    lq[ok] = np.asarray(target_normalized.log_density(Y[ok]), dtype=float)
    ok &= np.isfinite(lq)
    if ok.sum() < MIN_USABLE_FRACTION * X.shape[0]:
        raise TooFewFeasible(f"induced density defined on only {int(ok.sum())} rows")
    sub = SampleSet(X[ok])
    kl = kl_source_to_induced(tmap, source, target_normalized, sub, entropy)
    return kl, int(X.shape[0] - ok.sum())


def info_gain(tmap, target, prior_samples, source=None) -> float:
    """``KL(posterior || prior) = -log beta + E_post[log p(y|X)]``."""
    lb = log_beta(tmap, target, prior_samples, source)
    pushed = push_samples(tmap, prior_samples, strict=False)
    good = pushed.values if pushed.flags is None else pushed.values[~pushed.flags]
    ll = np.asarray(target.likelihood.log_likelihood(good), dtype=float)
    return float(-lb + np.mean(ll))


@dataclass
class DiagnosticsReport:
    var_T: float
    log_beta_map: float
    log_beta_mc: float
    kl_estimate: Optional[float]
    info_gain: float
    n_used: int
    n_excluded: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    def table(self) -> str:
        """Fixed-order two-column text table."""
        rows = []
        for k, v in self.to_dict().items():
            if v is None:
                s = "n/a"
            elif isinstance(v, float):
                s = f"{v:.6g}"
            else:
                s = str(v)
            rows.append(f"{k:<14}{s:>14}")
        return "\n".join(rows)


def diagnose(tmap, target, prior_samples, source=None, normalized_target=None) -> DiagnosticsReport:
    """All diagnostics for a fitted posterior map.

    ``kl_estimate`` is only reported when a normalized version of the target
    is supplied; for a bare posterior it would be zero by construction.
    """
    source = _source_of(target, source)
    T, n_bad = _usable_T(tmap, target, prior_samples, source)
    kl = None
    if normalized_target is not None:
        kl = kl_source_to_induced(tmap, source, normalized_target, prior_samples)
    return DiagnosticsReport(
        var_T=float(np.var(T, ddof=1)) if T.size > 1 else 0.0,
        log_beta_map=float(np.mean(T)),
        log_beta_mc=log_beta_mc(target, prior_samples),
        kl_estimate=kl,
        info_gain=info_gain(tmap, target, prior_samples, source),
        n_used=int(T.size),
        n_excluded=n_bad,
    )
