"""Orthonormal tensor-product polynomial bases and their Jacobians.

Each coordinate carries a univariate family orthonormal under a 1-d source
marginal:

* ``hermite``  - Gaussian(loc, scale), probabilists' Hermite, unit norm
* ``legendre`` - uniform on [lo, hi]
* ``laguerre`` - Gamma(shape, scale); exponential priors use shape 1
* ``empirical`` - monomials orthonormalised against a sample (all coordinates)

Classical families are evaluated through the three-term recurrence of their
orthonormal polynomials,

    sqrt(b[n+1]) psi[n+1](z) = (z - a[n]) psi[n](z) - sqrt(b[n]) psi[n-1](z),

and the derivative through the differentiated recurrence, so no monomial
coefficients are ever formed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptySampleSet, NonFiniteInput, RankDeficient
from .samples import SampleSet

MAX_DEGREE = 10
FAMILIES = ("hermite", "legendre", "laguerre", "empirical")


# --------------------------------------------------------------------------
# multi-indices
# --------------------------------------------------------------------------

def _compositions(total: int, parts: int):
    """All tuples of ``parts`` non-negative ints summing to ``total``, lex order."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def enumerate_multi_indices(d: int, p: int) -> list[tuple[int, ...]]:
    """Graded multi-indices of total degree <= ``p`` in ``d`` variables.

    Indices of total degree ``t`` all precede those of degree ``t + 1``; within
    a grade they are in ascending lexicographic order. The count is
    ``binomial(p + d, d)``.

    >>> enumerate_multi_indices(2, 2)
    [(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0)]
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if p < 0:
        raise ValueError("p must be >= 0")
    out = []
    for t in range(p + 1):
        out.extend(_compositions(t, d))
    return out


# --------------------------------------------------------------------------
# univariate families
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Family:
    """A univariate orthonormal family attached to one coordinate.

    ``params`` by kind: hermite ``loc, scale``; legendre ``lo, hi``;
    laguerre ``shape, scale``; empirical has none (the coefficients live on
    the :class:`BasisSpec`).
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValueError(f"unknown family {self.kind!r}")
        p = tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", p)
        if self.kind == "hermite" and not (len(p) == 2 and p[1] > 0):
            raise ValueError("hermite needs (loc, scale>0)")
        if self.kind == "legendre" and not (len(p) == 2 and p[0] < p[1]):
            raise ValueError("legendre needs (lo, hi) with lo < hi")
        if self.kind == "laguerre" and not (len(p) == 2 and p[0] > 0 and p[1] > 0):
            raise ValueError("laguerre needs (shape>0, scale>0)")

    @classmethod
    def hermite(cls, loc=0.0, scale=1.0):
        return cls("hermite", (loc, scale))

    @classmethod
    def legendre(cls, lo=-1.0, hi=1.0):
        return cls("legendre", (lo, hi))

    @classmethod
    def laguerre(cls, shape=1.0, scale=1.0):
        return cls("laguerre", (shape, scale))

    # affine change to the standard variable z and dz/dx
    def _standardize(self, x):
        if self.kind == "hermite":
            loc, s = self.params
            return (x - loc) / s, 1.0 / s
        if self.kind == "legendre":
            lo, hi = self.params
            half = 0.5 * (hi - lo)
            return (x - 0.5 * (lo + hi)) / half, 1.0 / half
        if self.kind == "laguerre":
            _, s = self.params
            return x / s, 1.0 / s
        raise TypeError("empirical family has no univariate recurrence")

    def recurrence(self, p: int):
        """Jacobi coefficients ``(a[0..p], b[0..p])`` of the standard measure."""
        n = np.arange(p + 1, dtype=float)
        if self.kind == "hermite":
            return np.zeros(p + 1), n.copy()
        if self.kind == "legendre":
            return np.zeros(p + 1), n**2 / (4.0 * n**2 - 1.0)
        if self.kind == "laguerre":
            alpha = self.params[0] - 1.0
            return 2.0 * n + alpha + 1.0, n * (n + alpha)
        raise TypeError("empirical family has no recurrence")

    def evaluate(self, x, p: int):
        """Values and x-derivatives of psi_0..psi_p at points ``x``.

        Returns two arrays of shape ``(len(x), p + 1)``.
        """
        x = np.asarray(x, dtype=float)
        z, dz = self._standardize(x)
        a, b = self.recurrence(p + 1)
        rb = np.sqrt(b)
        vals = np.empty(z.shape + (p + 1,))
        ders = np.empty_like(vals)
        vals[..., 0] = 1.0
        ders[..., 0] = 0.0
        if p >= 1:
            vals[..., 1] = (z - a[0]) / rb[1]
            ders[..., 1] = 1.0 / rb[1]
        for k in range(1, p):
            vals[..., k + 1] = ((z - a[k]) * vals[..., k] - rb[k] * vals[..., k - 1]) / rb[k + 1]
            ders[..., k + 1] = (
                vals[..., k] + (z - a[k]) * ders[..., k] - rb[k] * ders[..., k - 1]
            ) / rb[k + 1]
        return vals, ders * dz

    def identity_coefficients(self):
        """``(c0, c1)`` with ``x == c0 * psi_0(x) + c1 * psi_1(x)``."""
        a, b = self.recurrence(1)
        if self.kind == "hermite":
            shift, scale = self.params
        elif self.kind == "legendre":
            lo, hi = self.params
            shift, scale = 0.5 * (lo + hi), 0.5 * (hi - lo)
        else:
            shift, scale = 0.0, self.params[1]
        # z = sqrt(b1) psi_1 + a0 and x = shift + scale * z
        return shift + scale * a[0], scale * math.sqrt(b[1])

    def to_dict(self):
        keys = {"hermite": ("loc", "scale"), "legendre": ("lo", "hi"),
                "laguerre": ("shape", "scale"), "empirical": ()}[self.kind]
        return {"kind": self.kind, **dict(zip(keys, self.params))}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind")
        keys = {"hermite": ("loc", "scale"), "legendre": ("lo", "hi"),
                "laguerre": ("shape", "scale"), "empirical": ()}[kind]
        extra = set(d) - set(keys)
        if extra:
            raise ValueError(f"unexpected keys for {kind}: {sorted(extra)}")
        return cls(kind, tuple(d[k] for k in keys))


# --------------------------------------------------------------------------
# basis spec
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalBasis:
    """Monomials in standardized coordinates mapped through ``coef``.

    ``phi(x) = coef @ m((x - shift) / scale)`` where ``m`` lists the monomials
    in the spec's multi-index order. ``coef`` is lower triangular.
    """

    shift: np.ndarray
    scale: np.ndarray
    coef: np.ndarray

    def __post_init__(self):
        for name in ("shift", "scale", "coef"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def to_dict(self):
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist(),
                "coef": self.coef.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["shift"]), np.array(d["scale"]), np.array(d["coef"]))


@dataclass(frozen=True)
class BasisSpec:
    """Total-degree tensor-product basis over ``dim`` coordinates."""

    dim: int
    families: tuple
    max_total_degree: int
    indices: tuple = field(default=())
    empirical: Optional[EmpiricalBasis] = None

    def __post_init__(self):
        fams = tuple(f if isinstance(f, Family) else Family.from_dict(f) for f in self.families)
        object.__setattr__(self, "families", fams)
        if self.dim < 1 or len(fams) != self.dim:
            raise ValueError("need exactly one family per dimension")
        if not 0 <= self.max_total_degree <= MAX_DEGREE:
            raise ValueError(f"degree must be in [0, {MAX_DEGREE}]")
        kinds = {f.kind for f in fams}
        if "empirical" in kinds and kinds != {"empirical"}:
            raise ValueError("empirical family cannot be mixed with classical ones")
        if ("empirical" in kinds) != (self.empirical is not None):
            raise ValueError("empirical coefficients must accompany empirical families")
        idx = tuple(enumerate_multi_indices(self.dim, self.max_total_degree))
        if self.indices and tuple(map(tuple, self.indices)) != idx:
            raise ValueError("indices do not match graded total-degree enumeration")
        object.__setattr__(self, "indices", idx)
        if self.empirical is not None and self.empirical.coef.shape != (len(idx), len(idx)):
            raise ValueError("empirical coefficient matrix has wrong shape")

    @property
    def K(self) -> int:
        return len(self.indices)

    @property
    def index_array(self) -> np.ndarray:
        return np.array(self.indices, dtype=int).reshape(self.K, self.dim)

    @property
    def is_empirical(self) -> bool:
        return self.empirical is not None

    @classmethod
    def from_families(cls, families: Sequence[Family], degree: int) -> "BasisSpec":
        return cls(len(families), tuple(families), degree)

    # -- evaluation -------------------------------------------------------

    def evaluate(self, X):
        """Basis values and Jacobians at the rows of ``X``.

        Returns ``phi`` of shape ``(n, K)`` and ``jac`` of shape ``(n, K, d)``
        with ``jac[i, k, a] = d phi_k / d x_a`` at ``X[i]``.
        """
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1) if self.dim > 1 or X.size == 1 else X[:, None]
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} columns, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise NonFiniteInput("basis evaluation at a non-finite point")
        if self.is_empirical:
            return self._evaluate_empirical(X)
        return self._evaluate_classical(X)

    def _tensor(self, vals, ders):
        # vals[a], ders[a]: (n, p+1) univariate tables for coordinate a
        idx = self.index_array
        n = vals[0].shape[0]
        factors = np.stack([vals[a][:, idx[:, a]] for a in range(self.dim)])  # (d, n, K)
        dfactors = np.stack([ders[a][:, idx[:, a]] for a in range(self.dim)])
        phi = np.prod(factors, axis=0)
        jac = np.empty((n, self.K, self.dim))
        for a in range(self.dim):
            others = np.delete(factors, a, axis=0)
            rest = np.prod(others, axis=0) if others.shape[0] else np.ones((n, self.K))
            jac[:, :, a] = dfactors[a] * rest
        return phi, jac

    def _evaluate_classical(self, X):
        p = self.max_total_degree
        vals, ders = [], []
        for a, fam in enumerate(self.families):
            v, dv = fam.evaluate(X[:, a], p)
            vals.append(v)
            ders.append(dv)
        return self._tensor(vals, ders)

    def _evaluate_empirical(self, X):
        emp = self.empirical
        Z = (X - emp.shift) / emp.scale
        p = self.max_total_degree
        powers = np.arange(p + 1)
        vals, ders = [], []
        for a in range(self.dim):
            z = Z[:, a:a + 1]
            v = z ** powers
            dv = np.zeros_like(v)
            dv[:, 1:] = powers[1:] * z ** (powers[1:] - 1) / emp.scale[a]
            vals.append(v)
            ders.append(dv)
        m, dm = self._tensor(vals, ders)
        phi = m @ emp.coef.T
        jac = np.einsum("kj,njd->nkd", emp.coef, dm)
        return phi, jac

    def identity_weights(self) -> np.ndarray:
        """``W`` (d x K) with ``W @ phi(x) == x`` for every x."""
        W = np.zeros((self.dim, self.K))
        pos = {idx: k for k, idx in enumerate(self.indices)}
        zero = (0,) * self.dim
        if self.is_empirical:
            # monomial j = sum_k inv(coef)[j, k] phi_k
            inv = np.linalg.inv(self.empirical.coef)
            for a in range(self.dim):
                e = [0] * self.dim
                e[a] = 1
                W[a] = (self.empirical.shift[a] * inv[pos[zero]]
                        + self.empirical.scale[a] * inv[pos[tuple(e)]])
            return W
        for a, fam in enumerate(self.families):
            c0, c1 = fam.identity_coefficients()
            e = [0] * self.dim
            e[a] = 1
            W[a, pos[zero]] = c0
            W[a, pos[tuple(e)]] = c1
        return W

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "dim": self.dim,
            "families": [f.to_dict() for f in self.families],
            "max_total_degree": self.max_total_degree,
            "indices": [list(i) for i in self.indices],
        }
        if self.empirical is not None:
            d["empirical"] = self.empirical.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        emp = d.get("empirical")
        return cls(
            dim=int(d["dim"]),
            families=tuple(Family.from_dict(f) for f in d["families"]),
            max_total_degree=int(d["max_total_degree"]),
            indices=tuple(tuple(i) for i in d.get("indices", ())),
            empirical=None if emp is None else EmpiricalBasis.from_dict(emp),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "BasisSpec":
        return cls.from_dict(json.loads(s))

    def __eq__(self, other):
        if not isinstance(other, BasisSpec):
            return NotImplemented
        return self.to_json() == other.to_json()

    def __hash__(self):
        return hash(self.to_json())


@dataclass(frozen=True)
class BasisEval:
    """Basis values ``phi`` (K,) and Jacobian ``jac`` (K, d) at one point."""

    phi: np.ndarray
    jac: np.ndarray


def eval_basis(spec: BasisSpec, x) -> BasisEval:
    x = np.asarray(x, dtype=float).reshape(1, spec.dim)
    phi, jac = spec.evaluate(x)
    return BasisEval(phi[0], jac[0])


def orthonormality_gram(spec: BasisSpec, samples) -> np.ndarray:
    """Empirical Gram matrix ``(1/n) sum phi(X_i) phi(X_i)^T``."""
    X = samples.values if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise EmptySampleSet("cannot form a Gram matrix from zero samples")
    phi, _ = spec.evaluate(X)
    return phi.T @ phi / X.shape[0]


def gram_schmidt_empirical(samples, p: int, cond_limit: float = 1e12) -> BasisSpec:
    """Orthonormalise graded monomials against the empirical measure of ``samples``.

    Coordinates are standardised by the sample mean and standard deviation
    before monomials are formed. The orthonormalisation is a thin QR of the
    scaled monomial design matrix, with the sign fixed so each basis
    polynomial has a positive leading coefficient.

    Raises
    ------
    RankDeficient
        If any coordinate has zero spread or the monomial Gram matrix has
        condition number above ``cond_limit``.
    """
    X = samples.values if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n == 0:
        raise EmptySampleSet("no samples")
    if not np.all(np.isfinite(X)):
        raise NonFiniteInput("samples contain non-finite values")
    K = math.comb(p + d, d)
    if n < 3 * K:
        raise ValueError(f"need at least {3 * K} samples for degree {p} in {d} dims")
    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    if np.any(scale <= 0):
        raise RankDeficient("a coordinate has zero spread")
    provisional = BasisSpec(d, tuple(Family("empirical") for _ in range(d)), p,
                            empirical=EmpiricalBasis(shift, scale, np.eye(K)))
    M, _ = provisional.evaluate(X)
    R = np.linalg.qr(M / math.sqrt(n), mode="r")
    sgn = np.sign(np.diag(R))
    sgn[sgn == 0] = 1.0
    R = sgn[:, None] * R
    sv = np.linalg.svd(R, compute_uv=False)
    if sv[-1] <= 0 or (sv[0] / sv[-1]) ** 2 > cond_limit:
        raise RankDeficient("monomial Gram matrix is numerically singular")
    coef = np.linalg.solve(R, np.eye(K)).T  # phi = R^{-T} m, lower triangular
    coef = np.tril(coef)
    return BasisSpec(d, provisional.families, p, empirical=EmpiricalBasis(shift, scale, coef))
