"""Aggregation queries over (masked) observation sequences.

``evaluate``/``evaluate_all`` are the reference implementations.  The
learners re-evaluate the same sample under many masks, so they go through
:class:`MeasureTable`, which resolves every predicate once per sample and
then answers ``count``/``max`` queries for a whole stack of masks with a
couple of array operations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import MaskedSample, Sample, SchemaError, keep_rows
from .rules import COUNT, EQUALS, GREATER, LESS, MAX, Measurement


@dataclass(frozen=True)
class MeasurementResult:
    value: float
    touched_rows: frozenset[int]


def _as_masked(s, mask=None) -> MaskedSample:
    if isinstance(s, MaskedSample):
        if mask is not None:
            return MaskedSample(s.base, mask)
        return s
    return MaskedSample(s, mask)


def predicate_match(m: Measurement, sample: Sample) -> np.ndarray:
    """Rows satisfying every predicate of ``m`` (ignoring any mask)."""
    n = sample.n_rows
    hit = np.ones(n, dtype=bool)
    for p in m.predicates:
        if p.column not in sample.seq:
            raise SchemaError(f"m{m.id}: sample has no column {p.column!r}")
        col = sample.seq[p.column]
        if p.op == EQUALS:
            if col.dtype == object:
                hit &= col == str(p.value)
            else:
                if isinstance(p.value, str):
                    raise SchemaError(f"m{m.id}: numeric column {p.column!r} compared to a string")
                hit &= col == float(p.value)
        else:
            if col.dtype == object:
                raise SchemaError(f"m{m.id}: ordering comparison on categorical column {p.column!r}")
            hit &= (col < p.value) if p.op == LESS else (col > p.value)
    return hit


def _target(m: Measurement, sample: Sample) -> np.ndarray:
    if m.target not in sample.seq:
        raise SchemaError(f"m{m.id}: sample has no column {m.target!r}")
    col = sample.seq[m.target]
    if col.dtype == object:
        raise SchemaError(f"m{m.id}: max target {m.target!r} is not numeric")
    return col


def evaluate(m: Measurement, s, mask=None, empty_default: float = 0.0) -> MeasurementResult:
    ms = _as_masked(s, mask)
    hit = predicate_match(m, ms.base) & ms.keep
    touched = frozenset(int(i) for i in np.flatnonzero(hit))
    if m.aggregation == COUNT:
        return MeasurementResult(float(len(touched)), touched)
    col = _target(m, ms.base)
    if not touched:
        return MeasurementResult(float(empty_default), touched)
    return MeasurementResult(float(np.max(col[hit])), touched)


def evaluate_all(
    ms: Sequence[Measurement], s, mask=None, empty_default: float = 0.0
) -> tuple[np.ndarray, list[frozenset[int]]]:
    """Vector ``f(x)`` ordered by measurement id, plus per-measurement touched rows."""
    results = [evaluate(m, s, mask, empty_default) for m in sorted(ms, key=lambda m: m.id)]
    return np.array([r.value for r in results]), [r.touched_rows for r in results]


class MeasureTable:
    """Predicate matches and target values of one sample, resolved once.

    ``match`` is a ``(K, n)`` boolean array and ``values`` holds the max
    target per row (``-inf`` where it does not apply).
    """

    def __init__(self, ms: Sequence[Measurement], sample: Sample, empty_default: float = 0.0):
        ms = sorted(ms, key=lambda m: m.id)
        n = sample.n_rows
        self.n_rows = n
        self.empty_default = float(empty_default)
        self.is_max = np.array([m.aggregation == MAX for m in ms], dtype=bool)
        self.match = np.zeros((len(ms), n), dtype=bool)
        self.values = np.full((len(ms), n), -np.inf)
        for k, m in enumerate(ms):
            self.match[k] = predicate_match(m, sample)
            if m.aggregation == MAX:
                self.values[k] = np.where(self.match[k], _target(m, sample), -np.inf)

    @property
    def n_measurements(self) -> int:
        return self.match.shape[0]

    def f(self, mask=None) -> np.ndarray:
        """Measurement vector for one mask (``None`` = keep every row)."""
        if mask is None:
            keep = np.ones(self.n_rows, dtype=bool)
        else:
            keep = keep_rows(mask)
        return self.f_many(keep[None, :])[0]

    def f_many(self, keep: np.ndarray) -> np.ndarray:
        """Measurement vectors for a stack of boolean keep-vectors ``(C, n)``."""
        keep = np.asarray(keep, dtype=bool)
        c = keep.shape[0]
        out = np.empty((c, self.n_measurements))
        if self.n_rows == 0:
            out[:] = np.where(self.is_max, self.empty_default, 0.0)
            return out
        counts = keep.astype(np.float64) @ self.match.T.astype(np.float64)
        out[:] = counts
        if self.is_max.any():
            idx = np.flatnonzero(self.is_max)
            vals = self.values[idx]  # (M, n)
            masked = np.where(keep[:, None, :], vals[None, :, :], -np.inf)
            mx = masked.max(axis=2)
            out[:, idx] = np.where(np.isneginf(mx), self.empty_default, mx)
        return out

    def touched(self, mask=None) -> list[np.ndarray]:
        """Touched row indices per measurement under ``mask``."""
        keep = np.ones(self.n_rows, dtype=bool) if mask is None else keep_rows(mask)
        return [np.flatnonzero(self.match[k] & keep) for k in range(self.n_measurements)]
