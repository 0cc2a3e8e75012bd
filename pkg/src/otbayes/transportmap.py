"""Polynomial transport maps ``S_W(x) = W phi(x)``.

Orientation preservation is checked per point: ``det J > 0`` and the
symmetric part of ``J`` positive definite. Fitted maps are feasible at every
training sample by construction; away from the samples feasibility is
audited (``feasibility_report``) and surfaced, never silently repaired.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CorruptFile, DegreeTooLow, FormatVersionMismatch, InfeasibleRegion
from .polybasis import BasisSpec
from .samples import SampleSet

FORMAT_NAME = "otbayes-transport-map"
FORMAT_VERSION = 1
INFEASIBLE_FRACTION = 1e-3


def _rows(X, d):
    X = np.asarray(X, dtype=float)
    single = X.ndim <= 1 and (d > 1 or X.size == 1)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(1, d) if single else X.reshape(-1, 1)
    return X, single


def jacobian_feasible(A, eps_det: float = 0.0):
    """Feasibility mask for a stack of Jacobians ``A`` of shape (n, d, d)."""
    det = np.linalg.det(A)
    sym = 0.5 * (A + np.swapaxes(A, 1, 2))
    min_eig = np.linalg.eigvalsh(sym)[:, 0]
    return (det > eps_det) & (min_eig > 0), det, min_eig


@dataclass(frozen=True)
class FeasibilityReport:
    n_checked: int
    n_violations: int
    min_det: float
    min_sym_eig: float

    @property
    def fraction(self) -> float:
        return self.n_violations / self.n_checked if self.n_checked else 0.0

    def to_dict(self):
        return {"n_checked": self.n_checked, "n_violations": self.n_violations,
                "min_det": self.min_det, "min_sym_eig": self.min_sym_eig}


@dataclass(frozen=True, eq=False)
class TransportMap:
    """Coefficient matrix ``W`` (d x K) over a :class:`BasisSpec`."""

    spec: BasisSpec
    W: np.ndarray
    fitted_for: Optional[str] = None

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        if W.ndim == 1 and self.spec.dim == 1:
            W = W[None, :]
        if W.shape != (self.spec.dim, self.spec.K):
            raise ValueError(f"W must be {self.spec.dim} x {self.spec.K}, got {W.shape}")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)

    @property
    def dim(self) -> int:
        return self.spec.dim

    def __eq__(self, other):
        if not isinstance(other, TransportMap):
            return NotImplemented
        return (self.spec == other.spec and self.fitted_for == other.fitted_for
                and np.array_equal(self.W, other.W))

    def __hash__(self):
        return hash(self.hash)

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.spec.to_json().encode())
        h.update(np.ascontiguousarray(self.W, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def with_weights(self, W) -> "TransportMap":
        return TransportMap(self.spec, W, self.fitted_for)

    def apply(self, X):
        X, single = _rows(X, self.dim)
        phi, _ = self.spec.evaluate(X)
        out = phi @ self.W.T
        return out[0] if single else out

    def jacobian(self, X):
        X, single = _rows(X, self.dim)
        _, jac = self.spec.evaluate(X)
        out = np.einsum("dk,nke->nde", self.W, jac)
        return out[0] if single else out

    def apply_with_jacobian(self, X):
        X, _ = _rows(X, self.dim)
        phi, jac = self.spec.evaluate(X)
        return phi @ self.W.T, np.einsum("dk,nke->nde", self.W, jac)

    def feasible_mask(self, X):
        A = self.jacobian(_rows(X, self.dim)[0])
        return jacobian_feasible(A)[0]

    def feasible_at(self, x) -> bool:
        return bool(self.feasible_mask(np.asarray(x, dtype=float).reshape(1, self.dim))[0])

    def feasibility_report(self, samples) -> FeasibilityReport:
        X = samples.values if isinstance(samples, SampleSet) else _rows(samples, self.dim)[0]
        ok, det, eig = jacobian_feasible(self.jacobian(X))
        return FeasibilityReport(int(X.shape[0]), int(np.sum(~ok)),
                                 float(det.min()) if det.size else np.inf,
                                 float(eig.min()) if eig.size else np.inf)

    def push_samples(self, samples, strict: bool = True) -> SampleSet:
        return push_samples(self, samples, strict=strict)


class ComposedMap:
    """``second(first(x))``; the two-stage sampler used by chained fits."""

    def __init__(self, first, second):
        if first.dim != second.dim:
            raise ValueError("maps must share a dimension")
        self.first, self.second = first, second
        self.dim = first.dim

    @property
    def hash(self) -> str:
        return hashlib.sha256((self.first.hash + self.second.hash).encode()).hexdigest()[:16]

    def apply(self, X):
        return self.second.apply(self.first.apply(X))

    def jacobian(self, X):
        X, single = _rows(X, self.dim)
        Y, J1 = self.first.apply_with_jacobian(X)
        J2 = self.second.jacobian(Y)
        out = J2 @ J1
        return out[0] if single else out

    def apply_with_jacobian(self, X):
        X, _ = _rows(X, self.dim)
        Y, J1 = self.first.apply_with_jacobian(X)
        Z, J2 = self.second.apply_with_jacobian(Y)
        return Z, J2 @ J1

    def feasible_mask(self, X):
        X, _ = _rows(X, self.dim)
        Y, J1 = self.first.apply_with_jacobian(X)
        ok1 = jacobian_feasible(J1)[0]
        ok2 = jacobian_feasible(self.second.jacobian(Y))[0]
        return ok1 & ok2

    def feasible_at(self, x) -> bool:
        return bool(self.feasible_mask(np.asarray(x, dtype=float).reshape(1, self.dim))[0])

    def push_samples(self, samples, strict: bool = True) -> SampleSet:
        return push_samples(self, samples, strict=strict)


def identity_init(spec: BasisSpec) -> TransportMap:
    """The map with ``S(x) = x`` exactly (requires degree >= 1)."""
    if spec.max_total_degree < 1:
        raise DegreeTooLow("identity map needs a basis of degree >= 1")
    return TransportMap(spec, spec.identity_weights())


def apply(tmap, x):
    return tmap.apply(x)


def jacobian(tmap, x):
    return tmap.jacobian(x)


def feasible_at(tmap, x) -> bool:
    return tmap.feasible_at(x)


def feasibility_report(tmap, samples) -> FeasibilityReport:
    return tmap.feasibility_report(samples)


def push_samples(tmap, samples, strict: bool = True) -> SampleSet:
    """Apply ``tmap`` row by row, keeping provenance and infeasibility flags.

    Raises :class:`InfeasibleRegion` (carrying the pushed set) when more than
    0.1% of rows are infeasible and ``strict`` is true.
    """
    if isinstance(samples, SampleSet):
        X, seed = samples.values, samples.seed
        source = samples.source
    else:
        X, seed, source = _rows(samples, tmap.dim)[0], None, ""
    ok = tmap.feasible_mask(X)
    out = SampleSet(tmap.apply(X), seed=seed, source=f"push[{source}]",
                    map_hash=tmap.hash, flags=~ok)
    frac = float(np.mean(~ok)) if X.shape[0] else 0.0
    if strict and frac > INFEASIBLE_FRACTION:
        raise InfeasibleRegion(
            f"map infeasible on {np.sum(~ok)} of {X.shape[0]} rows ({frac:.2%})", result=out)
    return out


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def _payload(tmap: TransportMap) -> dict:
    W = np.ascontiguousarray(tmap.W, dtype="<f8")
    return {
        "spec": tmap.spec.to_dict(),
        "W": {"shape": list(W.shape), "dtype": "<f8", "order": "C",
              "data": base64.b64encode(W.tobytes()).decode("ascii")},
        "fitted_for": tmap.fitted_for,
    }


def _checksum(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def to_envelope(tmap: TransportMap) -> dict:
    payload = _payload(tmap)
    return {"format": FORMAT_NAME, "version": FORMAT_VERSION,
            "payload": payload, "sha256": _checksum(payload)}


def save(tmap: TransportMap, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_envelope(tmap), indent=1, sort_keys=True) + "\n")
    return path


def load(path) -> TransportMap:
    """Read a map written by :func:`save`.

    Raises
    ------
    CorruptFile
        Unparseable JSON, missing fields, or checksum mismatch.
    FormatVersionMismatch
        Unknown format/version, or ``W`` inconsistent with the stored basis.
    """
    path = Path(path)
    try:
        env = json.loads(path.read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: {exc}") from None
    if not isinstance(env, dict) or "payload" not in env or "sha256" not in env:
        raise CorruptFile(f"{path}: missing envelope fields")
    if env.get("format") != FORMAT_NAME or env.get("version") != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"{path}: expected {FORMAT_NAME} v{FORMAT_VERSION}, "
            f"got {env.get('format')} v{env.get('version')}")
    payload = env["payload"]
    try:
        spec = BasisSpec.from_dict(payload["spec"])
        wmeta = payload["W"]
        shape = tuple(int(s) for s in wmeta["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFile(f"{path}: bad payload ({exc})") from None
    if shape != (spec.dim, spec.K):
        raise FormatVersionMismatch(
            f"{path}: W shape {shape} does not match basis ({spec.dim}, {spec.K})")
    if _checksum(payload) != env["sha256"]:
        raise CorruptFile(f"{path}: checksum mismatch")
    raw = base64.b64decode(wmeta["data"])
    if len(raw) != 8 * spec.dim * spec.K:
        raise CorruptFile(f"{path}: W payload has wrong length")
    W = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float)
    return TransportMap(spec, W, payload.get("fitted_for"))
