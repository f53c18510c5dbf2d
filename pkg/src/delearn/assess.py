"""Data assessing model: a two-layer GCN over the row graph plus a small
fully connected head producing a keep-probability per observation row."""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import CATEGORICAL, Sample, Schema
from .numerics import AdamState, ShapeError, adam_step, seeded_rng
from .rule_net import _b64, _unb64, sigmoid

GCN_DIMS = (64, 32)
FC_HIDDEN = 32


@dataclass
class RowGraph:
    n: int
    rows: np.ndarray  # edge endpoints, i < j
    cols: np.ndarray

    @property
    def degree(self) -> np.ndarray:
        return np.bincount(np.concatenate([self.rows, self.cols]), minlength=self.n)

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(2 * len(self.rows))
        r = np.concatenate([self.rows, self.cols])
        c = np.concatenate([self.cols, self.rows])
        return sp.csr_matrix((data, (r, c)), shape=(self.n, self.n))

    def neighbors(self) -> list[np.ndarray]:
        a = self.adjacency()
        return [a.indices[a.indptr[i]:a.indptr[i + 1]] for i in range(self.n)]

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in zip(self.rows, self.cols)}

    def normalized(self) -> sp.csr_matrix:
        """D^-1/2 (A + I) D^-1/2."""
        a = self.adjacency() + sp.identity(self.n, format="csr")
        d = np.asarray(a.sum(axis=1)).ravel()
        inv = 1.0 / np.sqrt(d)
        return sp.csr_matrix(sp.diags(inv) @ a @ sp.diags(inv))


def build_graph(positions, distance_threshold: float) -> RowGraph:
    """Connect rows whose positions differ by strictly less than the threshold."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    n = len(pos)
    order = np.argsort(pos, kind="stable")
    sorted_pos = pos[order]
    # neighbours of sorted index a are a+1 .. hi[a]-1
    hi = np.searchsorted(sorted_pos, sorted_pos + distance_threshold, side="left")
    if distance_threshold > 0:
        # p + thr can round back to p; equal positions are always neighbours
        hi = np.maximum(hi, np.searchsorted(sorted_pos, sorted_pos, side="right"))
    src, dst = [], []
    for a in range(n):
        b = np.arange(a + 1, hi[a])
        if b.size:
            src.append(np.full(b.size, order[a]))
            dst.append(order[b])
    if src:
        s = np.concatenate(src)
        d = np.concatenate(dst)
        lo_, hi_ = np.minimum(s, d), np.maximum(s, d)
        keep = np.abs(pos[lo_] - pos[hi_]) < distance_threshold
        lo_, hi_ = lo_[keep], hi_[keep]
    else:
        lo_ = hi_ = np.zeros(0, dtype=np.int64)
    idx = np.lexsort((hi_, lo_))
    return RowGraph(n, lo_[idx].astype(np.int64), hi_[idx].astype(np.int64))


# --------------------------------------------------------------------------
# feature preprocessing
# --------------------------------------------------------------------------


class FeatureEncoder:
    """Standardizes numeric columns and one-hot encodes categorical ones."""

    def __init__(self, schema: Schema):
        self.schema = schema
        self.means: dict[str, float] = {}
        self.stds: dict[str, float] = {}
        self.categories: dict[str, list[str]] = {}
        self.base_mean = np.zeros(schema.base_len)
        self.base_std = np.ones(schema.base_len)

    def fit(self, samples) -> "FeatureEncoder":
        for col in self.schema.columns:
            vals = [s.seq[col.name] for s in samples if s.n_rows]
            if col.kind == CATEGORICAL:
                cats = sorted({str(v) for arr in vals for v in arr})
                self.categories[col.name] = cats
            else:
                allv = np.concatenate(vals) if vals else np.zeros(1)
                std = float(allv.std())
                self.means[col.name] = float(allv.mean())
                self.stds[col.name] = std if std > 0 else 1.0
        if self.schema.base_len:
            base = np.array([s.base for s in samples]).reshape(-1, self.schema.base_len)
            self.base_mean = base.mean(axis=0)
            std = base.std(axis=0)
            self.base_std = np.where(std > 0, std, 1.0)
        return self

    @property
    def width(self) -> int:
        w = 0
        for col in self.schema.columns:
            w += len(self.categories.get(col.name, ())) if col.kind == CATEGORICAL else 1
        return w

    def transform(self, sample: Sample) -> np.ndarray:
        n = sample.n_rows
        parts = []
        for col in self.schema.columns:
            arr = sample.seq[col.name]
            if col.kind == CATEGORICAL:
                cats = self.categories.get(col.name, [])
                parts.append((arr[:, None] == np.array(cats, dtype=object)[None, :]).astype(np.float64).reshape(n, len(cats)))
            else:
                parts.append(((arr - self.means[col.name]) / self.stds[col.name]).reshape(n, 1))
        return np.hstack(parts) if parts else np.zeros((n, 0))

    def transform_base(self, sample: Sample) -> np.ndarray:
        return (sample.base - self.base_mean) / self.base_std

    def to_dict(self) -> dict:
        return {
            "means": self.means,
            "stds": self.stds,
            "categories": self.categories,
            "base_mean": _b64(self.base_mean),
            "base_std": _b64(self.base_std),
        }

    @classmethod
    def from_dict(cls, d: dict, schema: Schema) -> "FeatureEncoder":
        enc = cls(schema)
        enc.means = {k: float(v) for k, v in d["means"].items()}
        enc.stds = {k: float(v) for k, v in d["stds"].items()}
        enc.categories = {k: list(v) for k, v in d["categories"].items()}
        enc.base_mean = _unb64(d["base_mean"])
        enc.base_std = _unb64(d["base_std"])
        return enc


# --------------------------------------------------------------------------
# weights, forward, backward
# --------------------------------------------------------------------------

WEIGHT_NAMES = ("gcn1", "gcn2", "fc1", "fc1_bias", "fc2", "fc2_bias")


@dataclass
class AssessWeights:
    gcn1: np.ndarray
    gcn2: np.ndarray
    fc1: np.ndarray
    fc1_bias: np.ndarray
    fc2: np.ndarray
    fc2_bias: np.ndarray

    @classmethod
    def init(cls, in_features: int, base_len: int, seed=0, zero_output: bool = True) -> "AssessWeights":
        """Glorot-uniform weights, zero biases.  With ``zero_output`` the last
        layer starts at zero so the initial mask is 0.5 everywhere."""
        rng = seeded_rng(seed)

        def glorot(fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        h1, h2 = GCN_DIMS
        fc2 = np.zeros((FC_HIDDEN, 1)) if zero_output else glorot(FC_HIDDEN, 1)
        return cls(
            glorot(in_features, h1),
            glorot(h1, h2),
            glorot(h2 + base_len, FC_HIDDEN),
            np.zeros(FC_HIDDEN),
            fc2,
            np.zeros(1),
        )

    @classmethod
    def zeros_like(cls, other: "AssessWeights") -> "AssessWeights":
        return cls(*(np.zeros_like(getattr(other, n)) for n in WEIGHT_NAMES))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in WEIGHT_NAMES]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflat(self, vec) -> "AssessWeights":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[i:i + a.size]).reshape(a.shape).copy())
            i += a.size
        return AssessWeights(*out)

    @property
    def in_features(self) -> int:
        return self.gcn1.shape[0]

    @property
    def base_len(self) -> int:
        return self.fc1.shape[0] - self.gcn2.shape[1]

    def to_dict(self) -> dict:
        return {n: _b64(getattr(self, n)) for n in WEIGHT_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "AssessWeights":
        return cls(*(_unb64(d[n]) for n in WEIGHT_NAMES))


@dataclass
class _Cache:
    adj: sp.csr_matrix
    p1: np.ndarray
    h1_pre: np.ndarray
    h1: np.ndarray
    p2: np.ndarray
    cat: np.ndarray
    t: np.ndarray
    m: np.ndarray


def _forward(w: AssessWeights, adj, x: np.ndarray, base: np.ndarray, p1=None) -> _Cache:
    n = x.shape[0]
    if x.shape[1] != w.in_features:
        raise ShapeError(f"feature width {x.shape[1]} != GCN input width {w.in_features}")
    if base.shape[0] != w.base_len:
        raise ShapeError(f"x_base length {base.shape[0]} != expected {w.base_len}")
    if p1 is None:
        p1 = adj @ x
    h1_pre = p1 @ w.gcn1
    h1 = np.maximum(h1_pre, 0.0)
    p2 = adj @ h1
    h2 = p2 @ w.gcn2
    cat = np.hstack([h2, np.broadcast_to(base, (n, base.shape[0]))])
    t = np.tanh(cat @ w.fc1 + w.fc1_bias)
    m = sigmoid(t @ w.fc2 + w.fc2_bias).reshape(n)
    return _Cache(adj, p1, h1_pre, h1, p2, cat, t, m)


def forward_mask(w: AssessWeights, g: RowGraph, x, base) -> np.ndarray:
    """Per-row mask in (0, 1) for one sample."""
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(g.n, x.shape[-1] if x.ndim == 2 else -1)
    base = np.asarray(base, dtype=np.float64).reshape(-1)
    if g.n == 0:
        if x.shape[1] != w.in_features:
            raise ShapeError(f"feature width {x.shape[1]} != GCN input width {w.in_features}")
        return np.zeros(0)
    return _forward(w, g.normalized(), x, base).m


def _backward(w: AssessWeights, c: _Cache, d_m: np.ndarray, grads: AssessWeights) -> None:
    """Accumulate gradients of a loss with dloss/dmask = ``d_m`` into ``grads``."""
    d_a4 = (d_m * c.m * (1.0 - c.m))[:, None]
    grads.fc2 += c.t.T @ d_a4
    grads.fc2_bias += d_a4.sum(axis=0)
    d_a3 = (d_a4 @ w.fc2.T) * (1.0 - c.t**2)
    grads.fc1 += c.cat.T @ d_a3
    grads.fc1_bias += d_a3.sum(axis=0)
    d_h2 = (d_a3 @ w.fc1.T)[:, : w.gcn2.shape[1]]
    grads.gcn2 += c.p2.T @ d_h2
    d_h1 = c.adj.T @ (d_h2 @ w.gcn2.T)
    d_h1_pre = d_h1 * (c.h1_pre > 0)
    grads.gcn1 += c.p1.T @ d_h1_pre


def mse_loss_and_grad(w: AssessWeights, items) -> tuple[float, AssessWeights]:
    """Mean squared error over all rows of ``items`` and its gradient.

    ``items`` holds ``(adj, x, base, target)`` tuples.
    """
    grads = AssessWeights.zeros_like(w)
    total_rows = sum(len(t) for _, _, _, t in items)
    if total_rows == 0:
        return 0.0, grads
    loss = 0.0
    for adj, x, base, target in items:
        if len(target) == 0:
            continue
        c = _forward(w, adj, x, base)
        diff = c.m - target
        loss += float(diff @ diff)
        _backward(w, c, 2.0 * diff / total_rows, grads)
    return loss / total_rows, grads


class AssessModel:
    """Encoder + weights + graph settings, with per-sample caches."""

    def __init__(self, schema: Schema, encoder: FeatureEncoder, weights: AssessWeights,
                 learning_rate: float = 1e-4):
        self.schema = schema
        self.encoder = encoder
        self.weights = weights
        self.adam = AdamState.zeros(weights.flat().size, learning_rate)
        self._cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()

    @classmethod
    def fit_new(cls, schema: Schema, samples, seed=0, learning_rate: float = 1e-4,
                zero_output: bool = True) -> "AssessModel":
        enc = FeatureEncoder(schema).fit(samples)
        w = AssessWeights.init(enc.width, schema.base_len, seed, zero_output)
        return cls(schema, enc, w, learning_rate)

    def graph(self, sample: Sample) -> RowGraph:
        return build_graph(sample.positions, self.schema.distance_threshold)

    def _prepared(self, sample: Sample):
        hit = self._cache.get(sample)
        if hit is None:
            g = self.graph(sample)
            adj = g.normalized()
            x = self.encoder.transform(sample)
            base = self.encoder.transform_base(sample)
            hit = (g, adj, x, base, adj @ x)
            self._cache[sample] = hit
        return hit

    def row_graph(self, sample: Sample) -> RowGraph:
        return self._prepared(sample)[0]

    def mask(self, sample: Sample) -> np.ndarray:
        if sample.n_rows == 0:
            return np.zeros(0)
        _, adj, x, base, p1 = self._prepared(sample)
        return _forward(self.weights, adj, x, base, p1).m

    def loss(self, pairs) -> float:
        items = [self._prepared(s)[1:4] + (np.asarray(t, dtype=np.float64),) for s, t in pairs]
        return mse_loss_and_grad(self.weights, items)[0]

    def train_step(self, pairs) -> float:
        """One Adam step on the squared error between masks and targets."""
        items = [self._prepared(s)[1:4] + (np.asarray(t, dtype=np.float64),) for s, t in pairs]
        for (adj, x, b, t), (s, _) in zip(items, pairs):
            if len(t) != s.n_rows:
                raise ShapeError(f"target mask length {len(t)} != {s.n_rows} rows")
        loss, grads = mse_loss_and_grad(self.weights, items)
        flat, self.adam = adam_step(self.adam, self.weights.flat(), grads.flat())
        self.weights = self.weights.unflat(flat)
        return loss

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "weights": self.weights.to_dict(),
            "learning_rate": self.adam.learning_rate,
        }

    @classmethod
    def from_dict(cls, d: dict, schema: Schema) -> "AssessModel":
        return cls(
            schema,
            FeatureEncoder.from_dict(d["encoder"], schema),
            AssessWeights.from_dict(d["weights"]),
            d.get("learning_rate", 1e-4),
        )
