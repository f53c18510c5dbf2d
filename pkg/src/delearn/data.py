"""Schema, samples and dataset files.

A dataset is a JSON-lines file (one sample per line) plus a sidecar
schema JSON.  Each line looks like::

    {"x_seq": [[...row...], ...], "x_base": [...], "y": 1, "y_feat": [0, 3]}

where every row lists the sequence columns in schema order.  A CSV pair
(sequence rows keyed by ``sample_id`` plus a base/label file) is accepted
as an alternative.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAX_SEQ_LEN = 20000
NUMERIC = "numeric"
CATEGORICAL = "categorical"


class SchemaError(ValueError):
    """Data does not conform to the declared schema."""


@dataclass(frozen=True)
class Column:
    name: str
    kind: str = NUMERIC

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class Schema:
    columns: tuple[Column, ...]
    base_len: int = 0
    empty_default: float = 0.0  # value of max() over no rows
    distance_threshold: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")
        if "position" not in names:
            raise SchemaError("schema must declare a numeric 'position' column")
        if self.column("position").kind != NUMERIC:
            raise SchemaError("'position' must be numeric")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaError(f"unknown column {name!r}")

    def has(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def to_dict(self) -> dict:
        return {
            "columns": [{"name": c.name, "type": c.kind} for c in self.columns],
            "base_len": self.base_len,
            "empty_default": self.empty_default,
            "distance_threshold": self.distance_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        cols = tuple(Column(c["name"], c.get("type", NUMERIC)) for c in d["columns"])
        return cls(
            cols,
            int(d.get("base_len", 0)),
            float(d.get("empty_default", 0.0)),
            float(d.get("distance_threshold", 2.0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Schema":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(eq=False)
class Sample:
    """One record: observation rows, base vector, label and critical rows.

    ``seq`` maps column name to a 1-d array (float64 for numeric columns,
    str objects for categorical ones).  ``y`` is +1 for a positive
    ("unqualified", fails the rules) sample and -1 for a negative one.
    """

    seq: dict[str, np.ndarray]
    base: np.ndarray
    y: int
    y_feat: frozenset[int] = frozenset()
    sample_id: int | None = None

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        self.y_feat = frozenset(int(i) for i in self.y_feat)
        if self.y not in (1, -1):
            raise SchemaError(f"label must be +1 or -1, got {self.y!r}")
        n = self.n_rows
        for name, col in self.seq.items():
            if len(col) != n:
                raise SchemaError(f"column {name!r} has {len(col)} rows, expected {n}")
        if n >= MAX_SEQ_LEN:
            raise SchemaError(f"sequence length {n} outside [0, {MAX_SEQ_LEN})")
        bad = [i for i in self.y_feat if not 0 <= i < n]
        if bad:
            raise SchemaError(f"y_feat index {bad[0]} is not a valid row")

    @property
    def n_rows(self) -> int:
        if not self.seq:
            return 0
        return len(next(iter(self.seq.values())))

    @property
    def positions(self) -> np.ndarray:
        return self.seq["position"]

    def rows(self, schema: Schema) -> list[list]:
        cols = [self.seq[name] for name in schema.names]
        out = []
        for i in range(self.n_rows):
            out.append([_plain(c[i]) for c in cols])
        return out

    def subset(self, keep) -> "Sample":
        """Physically drop rows (``keep`` is a boolean row vector)."""
        keep = np.asarray(keep, dtype=bool)
        idx = np.flatnonzero(keep)
        remap = {int(old): new for new, old in enumerate(idx)}
        return Sample(
            {k: v[keep] for k, v in self.seq.items()},
            self.base.copy(),
            self.y,
            frozenset(remap[i] for i in self.y_feat if i in remap),
            self.sample_id,
        )

    def with_label(self, y: int, y_feat=frozenset()) -> "Sample":
        return Sample(self.seq, self.base, y, y_feat, self.sample_id)

    def to_record(self, schema: Schema) -> dict:
        return {
            "x_seq": self.rows(schema),
            "x_base": [float(v) for v in self.base],
            "y": int(self.y),
            "y_feat": sorted(self.y_feat),
        }


def _plain(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, np.integer):
        return int(v)
    return str(v)


@dataclass(eq=False)
class MaskedSample:
    """A sample viewed through a per-row mask; rows with mask < 0.5 are gone."""

    base: Sample
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.base.n_rows)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.shape != (self.base.n_rows,):
            raise SchemaError(
                f"mask length {self.mask.shape} != sequence length {self.base.n_rows}"
            )

    @property
    def keep(self) -> np.ndarray:
        return self.mask >= 0.5


def keep_rows(mask) -> np.ndarray:
    return np.asarray(mask, dtype=np.float64) >= 0.5


# --------------------------------------------------------------------------
# building samples from raw rows
# --------------------------------------------------------------------------


def sample_from_rows(
    schema: Schema, rows: Sequence[Sequence], base, y: int, y_feat=(), sample_id=None
) -> Sample:
    n = len(rows)
    seq: dict[str, np.ndarray] = {}
    for j, col in enumerate(schema.columns):
        vals = [r[j] for r in rows]
        if col.kind == NUMERIC:
            try:
                arr = np.array(vals, dtype=np.float64).reshape(n)
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"column {col.name!r}: non-numeric value") from exc
            if n and not np.all(np.isfinite(arr)):
                raise SchemaError(f"column {col.name!r}: non-finite value")
        else:
            arr = np.array([str(v) for v in vals], dtype=object).reshape(n)
        seq[col.name] = arr
    for r in rows:
        if len(r) != len(schema.columns):
            raise SchemaError(f"row has {len(r)} values, schema has {len(schema.columns)} columns")
    base = np.asarray(base, dtype=np.float64).reshape(-1)
    if base.size != schema.base_len:
        raise SchemaError(f"x_base has length {base.size}, schema says {schema.base_len}")
    return Sample(seq, base, int(y), frozenset(y_feat), sample_id)


def validate_sample(sample: Sample, schema: Schema) -> None:
    for col in schema.columns:
        if col.name not in sample.seq:
            raise SchemaError(f"sample lacks column {col.name!r}")
    if sample.base.size != schema.base_len:
        raise SchemaError(f"x_base has length {sample.base.size}, schema says {schema.base_len}")


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    schema: Schema
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.y for s in self.samples], dtype=np.int64)

    def subset(self, idx: Iterable[int]) -> "Dataset":
        return Dataset(self.schema, [self.samples[i] for i in idx])


def dumps_jsonl(dataset: Dataset) -> str:
    lines = [json.dumps(s.to_record(dataset.schema), separators=(",", ":")) for s in dataset]
    return "".join(line + "\n" for line in lines)


def save_jsonl(dataset: Dataset, path) -> None:
    Path(path).write_text(dumps_jsonl(dataset))


def load_jsonl(path, schema: Schema) -> Dataset:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            try:
                s = sample_from_rows(
                    schema, rec["x_seq"], rec.get("x_base", []), rec["y"],
                    rec.get("y_feat", []), len(samples),
                )
            except (KeyError, SchemaError) as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            samples.append(s)
    return Dataset(schema, samples)


def load_csv(seq_path, base_path, schema: Schema) -> Dataset:
    """CSV pair: ``seq_path`` has ``sample_id`` plus the schema columns, one
    row per observation; ``base_path`` has ``sample_id, y, y_feat`` (row
    indices separated by ``;``) and ``base_0 .. base_{n-1}``."""
    rows_by_id: dict[str, list] = {}
    with open(seq_path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows_by_id.setdefault(rec["sample_id"], []).append(
                [rec[name] for name in schema.names]
            )
    samples = []
    with open(base_path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            sid = rec["sample_id"]
            feat = [int(v) for v in rec.get("y_feat", "").split(";") if v.strip()]
            base = [float(rec[f"base_{i}"]) for i in range(schema.base_len)]
            samples.append(
                sample_from_rows(schema, rows_by_id.get(sid, []), base, int(rec["y"]), feat, len(samples))
            )
    return Dataset(schema, samples)


def save_csv(dataset: Dataset, seq_path, base_path) -> None:
    schema = dataset.schema
    with open(seq_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", *schema.names])
        for i, s in enumerate(dataset):
            for row in s.rows(schema):
                w.writerow([i, *(repr(v) if isinstance(v, float) else v for v in row)])
    with open(base_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "y", "y_feat", *(f"base_{j}" for j in range(schema.base_len))])
        for i, s in enumerate(dataset):
            w.writerow([i, s.y, ";".join(str(v) for v in sorted(s.y_feat)), *map(repr, map(float, s.base))])


def load_dataset(path, schema_path=None) -> Dataset:
    """Load ``path`` (JSON-lines) with its schema.

    Without ``schema_path`` the schema is looked up next to the data as
    ``schema.json``.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "data.jsonl"
    schema_path = Path(schema_path) if schema_path else path.parent / "schema.json"
    return load_jsonl(path, Schema.load(schema_path))


def is_finite_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
