"""Convex fit of a polynomial transport map from samples.

Given source draws ``X_i`` the solver maximizes

    f(W) = (1/N) sum_i [ log q(W phi_i) + log det(W J_i) ]

over ``W`` (d x K), where ``q`` is a log-concave target density known up to a
constant. ``f`` is concave (for d > 1 once ``W`` is restricted to gradient
maps, which is the default); ``log det`` diverges at the boundary of the
orientation-preserving set, so infeasible trial points simply evaluate to
``-inf`` and the backtracking line search shrinks past them.

Search directions are Newton steps when ``d * K`` is small enough to form the
Hessian, and L-BFGS directions otherwise; both fall back to the raw gradient
when they fail to ascend. Steps are accepted by the Armijo rule, so the
objective trajectory never decreases. The loop stops when the Frobenius norm
of the gradient drops below ``grad_tol``.
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import FitError, LineSearchStall, MaxIterationsReached, SingularJacobian
from .polybasis import BasisSpec, gram_schmidt_empirical
from .samples import SampleSet
from .transportmap import TransportMap, identity_init, push_samples

log = logging.getLogger(__name__)

CONVERGED = "Converged"
MAX_ITERS = "MaxIters"
STALL = "LineSearchStall"


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 500
    grad_tol: float = 1e-7
    shrink: float = 0.5
    armijo: float = 1e-4
    eps_det: float = 1e-12
    seed: int = 0
    newton_max_dim: int = 200
    lbfgs_memory: int = 10
    min_step: float = 1e-16
    strict: bool = True
    wall_barrier: bool = True
    barrier_mu0: float = 1e-2
    barrier_mu_min: float = 1e-9
    gradient_map: bool = True

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        for name in ("grad_tol", "armijo", "eps_det", "min_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink must lie in (0, 1)")

    def replace(self, **kw) -> "FitOptions":
        d = asdict(self)
        d.update(kw)
        return FitOptions(**d)


@dataclass(frozen=True)
class FitCache:
    """Basis values ``phi`` (N, K), Jacobians ``jac`` (N, K, d) and source log-density."""

    X: np.ndarray
    phi: np.ndarray
    jac: np.ndarray
    log_source: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.phi.shape[0]


def build_cache(spec: BasisSpec, samples, source=None) -> FitCache:
    X = samples.values if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    phi, jac = spec.evaluate(X)
    lsrc = None
    if source is not None:
        lsrc = np.asarray(source.log_density(X), dtype=float)
    for a in (X, phi, jac):
        a.setflags(write=False)
    return FitCache(X, phi, jac, lsrc)


@dataclass
class SolveReport:
    iterations: int = 0
    objective_trajectory: list = field(default_factory=list)
    grad_norm: float = math.inf
    wall_time: float = 0.0
    termination: str = ""
    directions: dict = field(default_factory=dict)
    restarts: int = 0

    @property
    def converged(self) -> bool:
        return self.termination == CONVERGED

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "objective_trajectory": [float(v) for v in self.objective_trajectory],
            "final_grad_norm": float(self.grad_norm),
            "wall_time": self.wall_time,
            "termination": self.termination,
            "directions": dict(self.directions),
            "restarts": self.restarts,
        }


# --------------------------------------------------------------------------
# objective, gradient, Hessian
# --------------------------------------------------------------------------

def _jacobians(W, cache):
    return np.matmul(W, cache.jac)


def _feasible_logdet(A, eps_det):
    """log det per row, or None if any row violates feasibility."""
    d = A.shape[1]
    if d == 1:
        a = A[:, 0, 0]
        if np.any(a <= eps_det) or not np.all(np.isfinite(a)):
            return None
        return np.log(a)
    if not np.all(np.isfinite(A)):
        return None
    sign, logdet = np.linalg.slogdet(A)
    if np.any(sign <= 0) or np.any(logdet <= math.log(eps_det)):
        return None
    if not _sym_part_pd(A):
        return None
    return logdet


def _sym_part_pd(A) -> bool:
    # Sylvester's criterion: all leading principal minors positive
    sym = 0.5 * (A + np.swapaxes(A, 1, 2))
    for k in range(1, sym.shape[1] + 1):
        if np.linalg.det(sym[:, :k, :k]).min() <= 0:
            return False
    return True


def _terms(W, cache, target, eps_det):
    """Per-sample ``log q(S(X_i))`` and ``log det J_S(X_i)``, or None if infeasible."""
    A = _jacobians(W, cache)
    logdet = _feasible_logdet(A, eps_det)
    if logdet is None:
        return None
    Y = cache.phi @ W.T
    if not np.all(target.in_support(Y)):
        return None
    lq = np.asarray(target.log_density(Y), dtype=float)
    if not np.all(np.isfinite(lq)):
        return None
    return Y, A, lq, logdet


def objective(W, cache: FitCache, target, eps_det: float = 1e-12, t_form: bool = False) -> float:
    """Empirical objective, ``-inf`` when ``W`` is infeasible at any sample.

    With ``t_form`` the source log-density is subtracted, giving the sample
    mean of the T-operator, which tends to ``log beta`` at the optimum.
    """
    W = np.asarray(W, dtype=float).reshape(cache.jac.shape[2], cache.phi.shape[1])
    t = _terms(W, cache, target, eps_det)
    if t is None:
        return -math.inf
    _, _, lq, logdet = t
    val = lq + logdet
    if t_form:
        if cache.log_source is None:
            raise ValueError("t_form needs a cache built with the source density")
        val = val - cache.log_source
    return float(np.mean(val))


def _check_conditioning(A, limit=1e12):
    if A.shape[1] == 1:
        return
    c = np.linalg.cond(A)
    if np.any(~np.isfinite(c)) or np.any(c > limit):
        raise SingularJacobian("a per-sample map Jacobian is numerically singular")


def gradient(W, cache: FitCache, target, eps_det: float = 1e-12) -> np.ndarray:
    """Gradient of :func:`objective` with respect to ``W`` (d x K)."""
    d, K = cache.jac.shape[2], cache.phi.shape[1]
    W = np.asarray(W, dtype=float).reshape(d, K)
    A = _jacobians(W, cache)
    _check_conditioning(A)
    Y = cache.phi @ W.T
    g = np.asarray(target.grad_log_density(Y), dtype=float).reshape(-1, d)
    Ainv = np.linalg.inv(A)
    N = cache.n
    return (g.T @ cache.phi + np.matmul(cache.jac, Ainv).sum(axis=0).T) / N


def hessian(W, cache: FitCache, target) -> np.ndarray:
    """Hessian of :func:`objective` in row-major ``vec(W)``, shape (dK, dK)."""
    d, K = cache.jac.shape[2], cache.phi.shape[1]
    W = np.asarray(W, dtype=float).reshape(d, K)
    A = _jacobians(W, cache)
    Y = cache.phi @ W.T
    Hq = np.asarray(target.hess_log_density(Y), dtype=float).reshape(-1, d, d)
    Ainv = np.linalg.inv(A)
    B = np.matmul(cache.jac, Ainv)
    phi, N = cache.phi, cache.n
    H = np.empty((d * K, d * K))
    for a in range(d):
        for b in range(d):
            # block (a, b): sum_n Hq_ab phi phi' - B_b B_a'
            H[a * K:(a + 1) * K, b * K:(b + 1) * K] = (
                (phi * Hq[:, a, b, None]).T @ phi - B[:, :, b].T @ B[:, :, a])
    H /= N
    return 0.5 * (H + H.T)


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------

def gradient_map_subspace(cache: FitCache, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (d*K, r) of the weights whose map has a symmetric Jacobian.

    ``S = W phi`` is the gradient of a scalar potential exactly when
    ``dS_a/dx_b = dS_b/dx_a`` for all pairs, a linear condition on ``vec(W)``.
    It is imposed at the cached samples, which pins down the polynomial
    identity once there are more samples than basis functions. The null
    space is read off the eigenvalues of ``C' C`` for the stacked
    constraint rows ``C``.
    """
    J = cache.jac
    n, K, d = J.shape
    G = np.einsum("nkb,nlc->bckl", J, J)
    CtC = np.zeros((d * K, d * K))
    for a in range(d):
        for b in range(a + 1, d):
            sa, sb = slice(a * K, (a + 1) * K), slice(b * K, (b + 1) * K)
            CtC[sa, sa] += G[b, b]
            CtC[sb, sb] += G[a, a]
            CtC[sa, sb] -= G[b, a]
            CtC[sb, sa] -= G[a, b]
    w, V = np.linalg.eigh(CtC)
    keep = w <= rtol * max(1.0, float(w[-1]))
    return V[:, keep]


def _default_spec(source, degree, samples):
    fams = source.basis_families() if source is not None else None
    if fams is None:
        return gram_schmidt_empirical(samples, degree)
    return BasisSpec.from_families(fams, degree)


def _source_of(target, source):
    if source is not None:
        return source
    return getattr(target, "prior", None)


class _WallBarrier:
    """Log barrier ``mu * mean_i sum_j log(dist(S_j(X_i), wall))`` for hard walls.

    Only walls where the target density stays finite get a barrier; where
    the density vanishes the objective already diverges on its own.
    """

    def __init__(self, lo, hi):
        self.lo, self.hi = lo, hi
        self.has_lo, self.has_hi = np.isfinite(lo), np.isfinite(hi)

    @classmethod
    def for_target(cls, target, d):
        if not hasattr(target, "support"):
            return None
        lo, hi = (np.array(np.broadcast_to(np.asarray(b, dtype=float), (d,)))
                  for b in target.support())
        center = _support_center(target, d)
        for j in range(d):
            for bounds in (lo, hi):
                if not np.isfinite(bounds[j]):
                    continue
                probe = center.copy()
                probe[j] = bounds[j]
                inside = bool(np.all(target.in_support(probe[None, :])))
                val = float(np.asarray(target.log_density(probe[None, :])).reshape(-1)[0]) \
                    if inside else -math.inf
                if not np.isfinite(val):
                    bounds[j] = np.inf if bounds is hi else -np.inf
        if not (np.any(np.isfinite(lo)) or np.any(np.isfinite(hi))):
            return None
        return cls(lo, hi)

    def _gaps(self, Y):
        glo = np.where(self.has_lo, Y - np.where(self.has_lo, self.lo, 0.0), 1.0)
        ghi = np.where(self.has_hi, np.where(self.has_hi, self.hi, 0.0) - Y, 1.0)
        return glo, ghi

    def value(self, Y):
        glo, ghi = self._gaps(Y)
        if np.any(glo <= 0) or np.any(ghi <= 0):
            return -math.inf
        return float(np.mean(np.sum(np.log(glo) + np.log(ghi), axis=1)))

    def grad_y(self, Y):
        glo, ghi = self._gaps(Y)
        return np.where(self.has_lo, 1.0 / glo, 0.0) - np.where(self.has_hi, 1.0 / ghi, 0.0)

    def curv_y(self, Y):
        glo, ghi = self._gaps(Y)
        return np.where(self.has_lo, glo ** -2.0, 0.0) + np.where(self.has_hi, ghi ** -2.0, 0.0)


class _Problem:
    """Objective plus optional barriers with common weight ``mu``.

    ``barrier`` guards hard support walls; ``sym_barrier`` adds
    ``mean_i log det(sym(J_i))``, which keeps the symmetric part of every
    per-sample Jacobian positive definite (only needed for d > 1).
    """

    def __init__(self, cache, target, eps_det, barrier=None, sym_barrier=False):
        self.cache, self.target, self.eps_det = cache, target, eps_det
        self.barrier = barrier
        self.sym_barrier = sym_barrier
        self.mu = 0.0
        self.d, self.K = cache.jac.shape[2], cache.phi.shape[1]
        self.subspace = None

    def project(self, W):
        if self.subspace is None:
            return W
        N = self.subspace
        return (N @ (N.T @ W.reshape(-1))).reshape(W.shape)

    def _sym(self, W):
        A = _jacobians(W, self.cache)
        return 0.5 * (A + np.swapaxes(A, 1, 2))

    def value(self, W):
        f = objective(W, self.cache, self.target, self.eps_det)
        if self.mu > 0 and np.isfinite(f):
            if self.barrier is not None:
                f += self.mu * self.barrier.value(self.cache.phi @ W.T)
            if self.sym_barrier:
                sign, ld = np.linalg.slogdet(self._sym(W))
                f = f + self.mu * float(np.mean(ld)) if np.all(sign > 0) else -math.inf
        return f

    def grad(self, W):
        g = gradient(W, self.cache, self.target, self.eps_det)
        if self.mu > 0:
            if self.barrier is not None:
                Y = self.cache.phi @ W.T
                g = g + self.mu * self.barrier.grad_y(Y).T @ self.cache.phi / self.cache.n
            if self.sym_barrier:
                P = np.linalg.inv(self._sym(W))
                g = g + self.mu * np.einsum("nab,nkb->ak", P, self.cache.jac) / self.cache.n
        return self.project(g)

    def hess(self, W):
        H = hessian(W, self.cache, self.target)
        if self.mu > 0:
            phi, K, d, n = self.cache.phi, self.K, self.d, self.cache.n
            if self.barrier is not None:
                c = self.barrier.curv_y(phi @ W.T)
                for a in range(d):
                    blk = (phi * c[:, a:a + 1]).T @ phi / n
                    H[a * K:(a + 1) * K, a * K:(a + 1) * K] -= self.mu * blk
            if self.sym_barrier:
                J = self.cache.jac
                P = np.linalg.inv(self._sym(W))
                Q = np.matmul(J, P)
                G = np.matmul(Q, np.swapaxes(J, 1, 2))
                PG = (G.reshape(n, K * K).T @ P.reshape(n, d * d)).reshape(K, K, d, d)
                Hs = np.empty((d * K, d * K))
                for a in range(d):
                    for b in range(d):
                        Hs[a * K:(a + 1) * K, b * K:(b + 1) * K] = (
                            Q[:, :, b].T @ Q[:, :, a] + PG[:, :, a, b])
                H -= 0.5 * self.mu * Hs / n
                H = 0.5 * (H + H.T)
        return H


def fit(target, samples, spec: Optional[BasisSpec] = None, opts: Optional[FitOptions] = None,
        W0=None, source=None, degree: int = 3):
    """Fit a map pushing the sample distribution to ``target``.

    Parameters
    ----------
    target
        Log-concave density (a prior or a :class:`~otbayes.models.PosteriorTarget`).
    samples
        Draws from the source distribution.
    spec
        Basis; by default built from the source's orthonormal families with
        total degree ``degree`` (empirical Gram-Schmidt when the source has no
        classical family).
    W0
        Feasible starting coefficients. By default the identity map, or an
        affine map shrunk into the target support if the identity is not
        feasible.
    source
        Source density (defaults to ``target.prior``), only used so that the
        cache can report T-operator values.

    Returns
    -------
    (TransportMap, SolveReport)

    Raises
    ------
    LineSearchStall, MaxIterationsReached
        When ``opts.strict`` and the gradient tolerance was not met. The
        exception carries the last iterate and the report.

    Notes
    -----
    If the target has a hard wall (a finite support bound where its density
    does not vanish) the support constraints are active at the optimum and
    the plain objective has no stationary point. The solver then follows a
    log-barrier path on those walls, ``mu = barrier_mu0 * 10**-k`` down to
    ``barrier_mu_min``; the recorded trajectory is the barrier-augmented
    objective of the current stage, and barrier stages also stop once the
    Newton decrement ``g' (-H)^-1 g / 2`` falls below ``grad_tol**2``.

    For d > 1, ``log det`` is concave only over symmetric positive definite
    Jacobians; with a general non-symmetric ``J`` the objective can have
    several local maxima (``det [[1, t], [-t, 1]] = 1 + t**2`` is convex in
    ``t``). With ``opts.gradient_map`` (default) the weights are therefore
    restricted to maps with a symmetric Jacobian, i.e. gradients of a
    polynomial potential (see :func:`gradient_map_subspace`). The optimal
    transport map is such a gradient, and on this subspace the problem is
    concave with a unique maximizer. ``W0`` is projected onto the subspace.

    Without that restriction the optimum can also press against the requirement that the
    symmetric part of every per-sample Jacobian be positive definite, which
    the log-det term alone does not guard. If the plain ascent stalls there,
    the fit is restarted from the initial point along the same barrier path
    with ``log det(sym J_i)`` added (``report.restarts`` counts this).
    """
    opts = opts or FitOptions()
    source = _source_of(target, source)
    if spec is None:
        spec = _default_spec(source, degree, samples)
    cache = build_cache(spec, samples, source)
    d, K = spec.dim, spec.K
    barrier = _WallBarrier.for_target(target, d) if opts.wall_barrier else None
    prob = _Problem(cache, target, opts.eps_det, barrier)
    path = []
    mu = opts.barrier_mu0
    while mu >= opts.barrier_mu_min:
        path.append(mu)
        mu *= 0.1
    mus = path if barrier is not None else [0.0]
    prob.mu = mus[0]
    if d > 1 and opts.gradient_map:
        prob.subspace = gradient_map_subspace(cache)
    if W0 is None:
        W = feasible_start(spec, cache, target, opts.eps_det, prob)
    else:
        W = np.array(W0, dtype=float).reshape(d, K)
    W = prob.project(W)
    tag = target.describe() if hasattr(target, "describe") else type(target).__name__

    report = SolveReport()
    t_start = time.perf_counter()
    if not np.isfinite(prob.value(W)):
        raise ValueError("starting point is infeasible for the fit problem")
    counts = {"newton": 0, "lbfgs": 0, "gradient": 0}
    budget = opts.max_iters
    W_start = W.copy()

    def follow(W, mus):
        nonlocal budget
        termination, gnorm = CONVERGED, math.inf
        for mu in mus:
            prob.mu = mu
            W, termination, gnorm, used = _ascend(prob, W, opts, budget, report, counts)
            budget -= used
            if termination != CONVERGED:
                break
        return W, termination, gnorm

    W, termination, gnorm = follow(W, mus)
    if termination == STALL and d > 1 and opts.wall_barrier and budget > 0:
        # stalled against the positive-definite-symmetric-part boundary: redo
        # the fit on a barrier path for that constraint
        prob.sym_barrier = True
        prob.mu = path[0]
        if np.isfinite(prob.value(W_start)):
            report.restarts += 1
            W, termination, gnorm = follow(W_start, path)

    report.iterations = opts.max_iters - budget
    report.grad_norm = gnorm
    report.termination = termination
    report.wall_time = time.perf_counter() - t_start
    report.directions = counts
    tmap = TransportMap(spec, W, fitted_for=tag)
    log.debug("fit %s: %s after %d iterations, |g|=%.3g", tag, termination,
              report.iterations, gnorm)
    if termination != CONVERGED and opts.strict:
        exc = LineSearchStall if termination == STALL else MaxIterationsReached
        raise exc(f"{termination} after {report.iterations} iterations (|grad|={gnorm:.3g})",
                  transport_map=tmap, report=report)
    return tmap, report


def _ascend(prob: _Problem, W, opts: FitOptions, budget: int, report: SolveReport, counts):
    """Line-search ascent on ``prob`` from feasible ``W``; returns (W, status, |g|, iters)."""
    d, K = prob.d, prob.K
    use_newton = d * K <= opts.newton_max_dim
    memory: deque = deque(maxlen=opts.lbfgs_memory)
    f = prob.value(W)
    report.objective_trajectory.append(f)
    g = prob.grad(W)
    gnorm = float(np.linalg.norm(g))
    step = 1.0
    it = 0
    while True:
        if gnorm < opts.grad_tol:
            return W, CONVERGED, gnorm, it
        if it >= budget:
            return W, MAX_ITERS, gnorm, it
        gv = g.reshape(-1)
        direction, kind = None, "gradient"
        if use_newton:
            N = prob.subspace
            if N is None:
                direction = _damped_newton(-prob.hess(W), gv)
            else:
                z = _damped_newton(N.T @ -prob.hess(W) @ N, N.T @ gv)
                direction = None if z is None else N @ z
            if direction is not None:
                kind = "newton"
        if direction is None and memory:
            direction = _lbfgs_direction(gv, memory)
            kind = "lbfgs"
        if direction is None or float(gv @ direction) <= 0:
            direction = gv / max(1.0, gnorm)
            kind = "gradient"
        slope = float(gv @ direction)
        if prob.mu > 0 and kind == "newton" and 0.5 * slope < opts.grad_tol ** 2:
            # barrier stages: the Newton decrement is the reliable gauge, the
            # raw gradient carries roundoff from mu / gap terms
            return W, CONVERGED, gnorm, it
        t = 1.0 if kind != "gradient" else min(1.0, 2.0 * step)
        slack = 64.0 * np.finfo(float).eps * max(1.0, abs(f))
        while t >= opts.min_step:
            Wn = W + t * direction.reshape(d, K)
            fn = prob.value(Wn)
            if np.isfinite(fn) and fn >= f + opts.armijo * t * slope - slack:
                break
            t *= opts.shrink
        else:
            return W, STALL, gnorm, it
        if not fn > f:
            # accepted only thanks to the roundoff slack: no representable
            # progress is left, which is convergence only if none was predicted
            return W, (CONVERGED if 0.5 * slope <= slack else STALL), gnorm, it
        try:
            gn = prob.grad(Wn)
        except SingularJacobian:
            return W, STALL, gnorm, it
        s = (Wn - W).reshape(-1)
        y = (g - gn).reshape(-1)  # curvature pair for minimizing -f
        if float(s @ y) > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            memory.append((s, y))
        W, f, g = Wn, fn, gn
        gnorm = float(np.linalg.norm(g))
        step = t
        counts[kind] += 1
        it += 1
        report.objective_trajectory.append(f)


def _damped_newton(negH, gv):
    """Solve ``(negH + lam I) p = g`` with the smallest ``lam`` on a ladder that
    makes the matrix numerically positive definite; None if none does."""
    scale = max(1.0, float(np.max(np.abs(np.diag(negH)))))
    eye = np.eye(negH.shape[0])
    for lam in (0.0, *(scale * 10.0 ** k for k in range(-12, 1))):
        try:
            L = np.linalg.cholesky(negH + lam * eye)
        except np.linalg.LinAlgError:
            continue
        if lam == 0.0 and np.min(np.diag(L)) ** 2 < 1e-14 * scale:
            continue
        return np.linalg.solve(L.T, np.linalg.solve(L, gv))
    return None


def _support_center(target, d):
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (d,)) for b in target.support())
    c = np.zeros(d)
    both = np.isfinite(lo) & np.isfinite(hi)
    c[both] = 0.5 * (lo[both] + hi[both])
    c[np.isfinite(lo) & ~both] = lo[np.isfinite(lo) & ~both] + 1.0
    c[np.isfinite(hi) & ~both] = hi[np.isfinite(hi) & ~both] - 1.0
    return c


def feasible_start(spec: BasisSpec, cache: FitCache, target, eps_det: float = 1e-12,
                   problem=None) -> np.ndarray:
    """Identity weights if feasible, else a shrunken affine map into the support.

    The affine candidates ``c + s (x - mean(x))`` are centred on the support
    box of ``target`` and ``s`` is halved until every sample lands strictly
    inside.
    """
    value = problem.value if problem is not None else (
        lambda W: objective(W, cache, target, eps_det))
    W = identity_init(spec).W.copy()
    if np.isfinite(value(W)):
        return W
    d = spec.dim
    center = _support_center(target, d) if hasattr(target, "support") else np.zeros(d)
    Xc = cache.X - cache.X.mean(axis=0)
    s = 1.0
    for _ in range(60):
        W = np.linalg.lstsq(cache.phi, center + s * Xc, rcond=None)[0].T
        if np.isfinite(value(W)):
            return W
        s *= 0.5
    raise ValueError("could not find a feasible starting map; pass W0 explicitly")


def _sqrtm_psd(S):
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def affine_ot_start(spec: BasisSpec, samples, mean, cov) -> np.ndarray:
    """Weights of the Gaussian optimal-transport affine map as a starting point.

    The map sends the sample mean and covariance to ``mean`` and ``cov``
    through ``x -> mean + A (x - xbar)`` with ``A`` symmetric positive
    definite, so every per-sample Jacobian is feasible and the map is a
    gradient map. For strongly correlated targets this start is much closer
    to the optimum than the identity.
    """
    X = samples.values if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    X = X.reshape(-1, spec.dim)
    xbar = X.mean(axis=0)
    S0 = np.atleast_2d(np.cov(X, rowvar=False))
    S1 = np.atleast_2d(np.asarray(cov, dtype=float))
    r = _sqrtm_psd(S0)
    ri = np.linalg.inv(r)
    A = ri @ _sqrtm_psd(r @ S1 @ r) @ ri
    A = 0.5 * (A + A.T)
    Y = np.asarray(mean, dtype=float) + (X - xbar) @ A.T
    phi, _ = spec.evaluate(X)
    return np.linalg.lstsq(phi, Y, rcond=None)[0].T


def _lbfgs_direction(gv, memory):
    """Two-loop recursion; returns an ascent direction for gradient ``gv``."""
    q = -gv.copy()  # gradient of the minimized function -f
    alphas = []
    for s, y in reversed(memory):
        rho = 1.0 / float(s @ y)
        a = rho * float(s @ q)
        alphas.append((rho, a))
        q -= a * y
    s, y = memory[-1]
    q *= float(s @ y) / float(y @ y)
    for (s, y), (rho, a) in zip(memory, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


@dataclass
class ChainResult:
    """Two maps, base -> intermediate and intermediate -> final, with reports."""

    first: TransportMap
    second: TransportMap
    reports: tuple
    intermediate_samples: SampleSet

    def __iter__(self):
        yield self.first
        yield self.second

    def composed(self):
        from .transportmap import ComposedMap
        return ComposedMap(self.first, self.second)


def fit_chain(base, intermediate, final_target, samples_from_base, spec=None,
              opts: Optional[FitOptions] = None, second_spec=None,
              degree: int = 3, second_degree: Optional[int] = None) -> ChainResult:
    """Two-stage fit for sources that cannot be sampled directly.

    Stage 1 pushes ``base`` draws to the log-concave ``intermediate`` density.
    The pushed draws then serve as source samples for stage 2, which pushes
    ``intermediate`` to ``final_target``. When ``second_spec`` is not given
    the stage-2 basis is orthonormalised empirically on the pushed draws.
    Fit errors are re-raised with ``stage`` set to 1 or 2.
    """
    opts = opts or FitOptions()
    try:
        m1, r1 = fit(intermediate, samples_from_base, spec=spec, opts=opts,
                     source=base, degree=degree)
    except FitError as exc:
        exc.stage = 1
        raise
    mid = push_samples(m1, samples_from_base, strict=False)
    inter_samples = SampleSet(mid.values, seed=mid.seed, source=mid.source, map_hash=mid.map_hash)
    if second_spec is None:
        second_spec = gram_schmidt_empirical(inter_samples, second_degree or degree)
    try:
        m2, r2 = fit(final_target, inter_samples, spec=second_spec, opts=opts, source=intermediate)
    except FitError as exc:
        exc.stage = 2
        raise
    return ChainResult(m1, m2, (r1, r2), inter_samples)
