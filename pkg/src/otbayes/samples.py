"""Seeded sample sets and named random sub-streams.

All randomness in the package is derived from a single integer root seed.
Named sub-streams (``substream(seed, "fit")``, ``substream(seed, "trial", 3)``)
give independent generators whose output does not depend on the order in
which other streams are consumed.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CorruptFile, EmptySampleSet


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream key integers must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    """Return a generator for the sub-stream ``names`` of root ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))


def substream_seed(seed: int, *names) -> int:
    """Derive a plain integer seed for a named sub-stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class SampleSet:
    """Immutable ``n x d`` block of draws with provenance.

    Attributes
    ----------
    values : ndarray, shape (n, d)
        The draws. Stored read-only.
    seed : int or None
        Seed of the stream that produced the source draws.
    source : str
        Short description of the generating distribution.
    map_hash : str or None
        Hash of the transport map the rows were pushed through, if any.
    flags : ndarray of bool or None
        Per-row marker for rows where the generating map was infeasible.
    """

    values: np.ndarray
    seed: Optional[int] = None
    source: str = ""
    map_hash: Optional[str] = None
    flags: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError("sample values must be a 2-d array")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.flags is not None:
            f = np.array(self.flags, dtype=bool).reshape(-1)
            if f.shape[0] != v.shape[0]:
                raise ValueError("flags must have one entry per row")
            f.setflags(write=False)
            object.__setattr__(self, "flags", f)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, SampleSet):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.source == other.source
            and self.map_hash == other.map_hash
            and np.array_equal(self.values, other.values)
        )

    def require_nonempty(self):
        if self.n == 0:
            raise EmptySampleSet("sample set has no rows")
        return self

    def metadata(self) -> dict:
        return {
            "seed": self.seed,
            "source": self.source,
            "map_hash": self.map_hash,
            "n": self.n,
            "dim": self.dim,
            "n_flagged": None if self.flags is None else int(self.flags.sum()),
        }

    def to_csv(self, path) -> Path:
        """Write ``x1,...,xd`` CSV plus a ``<path>.json`` sidecar.

        Values are written with ``repr`` so the round trip is exact.
        """
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{j + 1}" for j in range(self.dim)])
            for row in self.values:
                w.writerow([repr(float(v)) for v in row])
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_csv(cls, path) -> "SampleSet":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise CorruptFile(f"{path}: empty sample file")
        header, body = rows[0], rows[1:]
        try:
            values = np.array([[float(v) for v in r] for r in body], dtype=float)
        except ValueError as exc:
            raise CorruptFile(f"{path}: {exc}") from None
        values = values.reshape(len(body), len(header))
        meta = {}
        sidecar = path.with_name(path.name + ".json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
        return cls(values, seed=meta.get("seed"), source=meta.get("source", ""),
                   map_hash=meta.get("map_hash"))
