"""Weight-space aggregation rules.

All rules take a list of equally shaped flat vectors. ``fedavg`` is the
unweighted mean used by FLUs and sync servers; the rest are robust
replacements for the client-level average.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import AggregationError


def _stack(ws) -> np.ndarray:
    if len(ws) == 0:
        raise AggregationError("cannot aggregate an empty list")
    shapes = {np.shape(w) for w in ws}
    if len(shapes) != 1:
        raise AggregationError(f"weight vectors disagree in layout: {sorted(shapes)}")
    return np.stack([np.asarray(w) for w in ws])


def fedavg(ws, weights=None) -> np.ndarray:
    """Coordinate-wise mean; pass ``weights`` (e.g. sample counts) for the weighted form."""
    s = _stack(ws)
    if weights is None:
        # accumulate in float64 so the mean of identical vectors is exact
        return s.mean(axis=0, dtype=np.float64).astype(s.dtype, copy=False)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(s),) or np.any(weights < 0) or weights.sum() <= 0:
        raise AggregationError("weights must be nonnegative, one per vector, not all zero")
    out = np.tensordot(weights / weights.sum(), s, axes=1)
    return out.astype(s.dtype, copy=False)


def coordinate_median(ws) -> np.ndarray:
    # np.median averages the two middle values for even counts
    return np.median(_stack(ws), axis=0).astype(np.result_type(*ws), copy=False)


def trimmed_mean(ws, trim_k: int) -> np.ndarray:
    s = _stack(ws)
    if trim_k < 0 or 2 * trim_k >= len(s):
        raise AggregationError(f"cannot trim {trim_k} from each end of {len(s)} vectors")
    if trim_k == 0:
        return fedavg(s)
    return fedavg(np.sort(s, axis=0)[trim_k:len(s) - trim_k])


def krum_scores(ws, f: int) -> np.ndarray:
    """Sum of squared distances from each vector to its ``n - f - 2`` nearest others."""
    s = _stack(ws).astype(np.float64)
    n = len(s)
    if f < 0 or n < 2 * f + 3:
        raise AggregationError(f"krum with f={f} needs at least {2 * f + 3} vectors, got {n}")
    d2 = np.empty((n, n))
    for i in range(n):
        diff = s - s[i]
        d2[i] = (diff * diff).sum(axis=1)
    np.fill_diagonal(d2, np.inf)
    m = n - f - 2
    return np.sort(d2, axis=1)[:, :m].sum(axis=1)


def krum_index(ws, f: int) -> int:
    return int(np.argmin(krum_scores(ws, f)))  # argmin keeps the lowest index on ties


def krum(ws, f: int) -> np.ndarray:
    return np.array(ws[krum_index(ws, f)], copy=True)


def best_index(scores) -> int:
    scores = list(scores)
    if not scores:
        raise AggregationError("no candidates to select from")
    return int(np.argmax(scores))


def select_best(candidates):
    """Return the vector of the highest-scoring ``(vector, score)`` pair."""
    candidates = list(candidates)
    return candidates[best_index([s for _, s in candidates])][0]


@dataclass(frozen=True)
class AggregatorKind:
    name: str = "fedavg"
    param: int = 0

    _NAMES = ("fedavg", "coordinate_median", "trimmed_mean", "krum")

    def __post_init__(self):
        if self.name not in self._NAMES:
            raise AggregationError(f"unknown aggregator {self.name!r}")
        if self.param < 0:
            raise AggregationError("aggregator parameter must be nonnegative")

    @classmethod
    def parse(cls, text: str) -> "AggregatorKind":
        """Accepts ``fedavg``, ``coordinate_median``, ``trimmed_mean(k)``, ``krum(f)``."""
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*(\d+)\s*\))?\s*", text)
        if not m:
            raise AggregationError(f"cannot parse aggregator {text!r}")
        name = m.group(1)
        if name == "median":
            name = "coordinate_median"
        param = int(m.group(2)) if m.group(2) is not None else (1 if name == "krum" else 0)
        return cls(name, param)

    def __str__(self):
        return f"{self.name}({self.param})" if self.name in ("trimmed_mean", "krum") else self.name

    def __call__(self, ws) -> np.ndarray:
        if self.name == "fedavg":
            return fedavg(ws)
        if self.name == "coordinate_median":
            return coordinate_median(ws)
        if self.name == "trimmed_mean":
            return trimmed_mean(ws, self.param)
        return krum(ws, self.param)
