"""Differentiable rule tree with trainable thresholds.

Every leaf k turns its measurement into a score

    v_k = s_k * tanh((f_k - theta_k) / Z_k),    s_k = +1 (below) / -1 (above)

which is positive when the leaf is violated.  In this violation-positive
orientation an AND node (all constraints must hold) takes the max of its
children and an OR node the min, so the root score is positive exactly when
the sample fails the rule set, i.e. its sign predicts the label y (+1
unqualified, -1 qualified).  The compliance score used by the batch
objective is the negated root score.

Because min/max only route values, every node value equals the score of a
single leaf; gradients are therefore scattered back to leaf scores by
index and never need a general autodiff engine.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .rules import ABOVE, AND, Leaf, Logic, RuleSet

EPS_CE = 1e-6


@dataclass
class ForwardTrace:
    f_values: np.ndarray
    leaf_scores: np.ndarray
    node_scores: list[float]
    output: float
    route_leaf: int
    argmin_leaves: frozenset[int]
    critical_rows: frozenset[int]
    responsibilities: np.ndarray
    capped_source: np.ndarray = field(repr=False)

    @property
    def label(self) -> int:
        return 1 if self.output > 0 else -1


def leaf_score(f, theta, z, direction: str = "below"):
    """tanh((f - theta) / z), negated for an ``above`` leaf."""
    s = -1.0 if direction == ABOVE else 1.0
    return s * np.tanh((np.asarray(f, dtype=np.float64) - theta) / z)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def focal_loss(p, y: int, gamma: float = 2.0, alpha: float = 0.25) -> float:
    """alpha * (1 - p_t)^gamma * -log(p_t) with p = P(y = +1).

    ``alpha`` is a plain scale, so gamma=0, alpha=1 is binary cross-entropy.
    """
    p_t = p if y == 1 else 1.0 - p
    p_t = min(max(p_t, 1e-300), 1.0)
    return float(alpha * (1.0 - p_t) ** gamma * -np.log(p_t))


def _focal_from_logit(zl: float, gamma: float, alpha: float) -> tuple[float, float]:
    """Focal loss of a correct-class logit and its derivative."""
    log_p = -np.logaddexp(0.0, -zl)
    p = np.exp(log_p)
    q = -np.expm1(log_p)  # 1 - p without cancellation
    loss = alpha * q**gamma * -log_p
    # d/dz [-(1-p)^g log p] = (1-p)^g * (g p log p - (1-p)), gamma=0 safe
    grad = alpha * (q**gamma) * (gamma * p * log_p - q)
    return float(loss), float(grad)


# --------------------------------------------------------------------------
# compiled tree
# --------------------------------------------------------------------------


class _Tree:
    """Node list in post-order; ``kind`` is 'leaf' | 'max' | 'min'."""

    def __init__(self, root):
        self.kinds: list[str] = []
        self.args: list = []
        self.root = self._add(root)

    def _add(self, node) -> int:
        if isinstance(node, Leaf):
            self.kinds.append("leaf")
            self.args.append(node.measurement_id)
        else:
            kids = [self._add(c) for c in node.children]
            self.kinds.append("max" if node.op == AND else "min")
            self.args.append(kids)
        return len(self.kinds) - 1

    def evaluate(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values and routed leaf of every node for leaf scores ``v[..., K]``.

        Returns arrays of shape (n_nodes, ...) .  Ties go to the lowest
        child index.
        """
        lead = v.shape[:-1]
        vals = np.empty((len(self.kinds),) + lead)
        route = np.empty((len(self.kinds),) + lead, dtype=np.int64)
        for i, (kind, arg) in enumerate(zip(self.kinds, self.args)):
            if kind == "leaf":
                vals[i] = v[..., arg]
                route[i] = arg
            else:
                cv = vals[arg]
                pick = np.argmax(cv, axis=0) if kind == "max" else np.argmin(cv, axis=0)
                vals[i] = np.take_along_axis(cv, pick[None], axis=0)[0]
                route[i] = np.take_along_axis(route[arg], pick[None], axis=0)[0]
        return vals, route

    def output(self, v: np.ndarray) -> np.ndarray:
        """Root value only (vectorized over leading axes)."""
        return self._out(self.root, v)

    def _out(self, i, v):
        kind, arg = self.kinds[i], self.args[i]
        if kind == "leaf":
            return v[..., arg]
        stacked = np.stack([self._out(c, v) for c in arg])
        return stacked.max(axis=0) if kind == "max" else stacked.min(axis=0)

    def capped_sources(self, vals: np.ndarray, route: np.ndarray, v: np.ndarray) -> np.ndarray:
        """For each leaf, the leaf whose score is min(v_leaf, ancestor caps).

        The cap of a node's children is min(cap(node), value(node)); the
        routed leaf therefore keeps the root value and every other leaf is
        clipped at or below it.  Single sample only.
        """
        src = np.arange(v.shape[-1])
        stack = [(self.root, None)]
        while stack:
            i, cap = stack.pop()
            kind, arg = self.kinds[i], self.args[i]
            if kind == "leaf":
                if cap is not None and v[cap] < v[arg]:
                    src[arg] = cap
                continue
            here = int(route[i])
            new_cap = here if cap is None or v[here] <= v[cap] else cap
            for c in arg:
                stack.append((c, new_cap))
        return src


class RuleNet:
    """Rule tree compiled into a scoring network over measurement vectors.

    Parameters
    ----------
    rules : RuleSet
    z : per-measurement normalization (range of f over training data)
    theta : starting thresholds; defaults to the expert values in ``rules``
    """

    def __init__(
        self,
        rules: RuleSet,
        z,
        theta=None,
        tau_soft: float = 0.25,
        gamma: float = 2.0,
        alpha: float = 0.25,
        slope: float = 3.0,
        critical_weight: float = 1.0,
    ):
        self.rules = rules
        k = rules.n_measurements
        self.z = np.asarray(z, dtype=np.float64).reshape(k)
        if np.any(~(self.z > 0)):
            raise ValueError("normalization factors Z must be positive")
        self.theta = rules.theta_array if theta is None else np.asarray(theta, dtype=np.float64).reshape(k).copy()
        self.frozen = rules.frozen_mask
        leaves = rules.leaves
        self.sign = np.array([-1.0 if leaves[i].direction == ABOVE else 1.0 for i in range(k)])
        self.tau_soft = float(tau_soft)
        self.gamma = float(gamma)
        self.alpha = float(alpha)
        self.slope = float(slope)
        self.critical_weight = float(critical_weight)
        self.tree = _Tree(rules.root)

    @property
    def n_measurements(self) -> int:
        return len(self.theta)

    def copy(self) -> "RuleNet":
        net = RuleNet.__new__(RuleNet)
        net.__dict__.update(self.__dict__)
        net.theta = self.theta.copy()
        return net

    # ---------------------------------------------------------------- scores

    def leaf_scores(self, f, theta=None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        return self.sign * np.tanh((np.asarray(f, dtype=np.float64) - theta) / self.z)

    def output(self, f, theta=None) -> np.ndarray:
        """Smooth root score(s); ``f`` may be (K,) or (..., K)."""
        return self.tree.output(self.leaf_scores(f, theta))

    def hard_output(self, f, theta=None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        return self.tree.output(self.sign * np.sign(np.asarray(f, dtype=np.float64) - theta))

    def predict_f(self, f, theta=None) -> np.ndarray:
        """Labels (+1 / -1) from measurement vectors, via the smooth score."""
        return np.where(self.output(f, theta) > 0, 1, -1)

    def predict_hard(self, f, theta=None) -> np.ndarray:
        return np.where(self.hard_output(f, theta) > 0, 1, -1)

    # ---------------------------------------------------------------- forward

    def forward(self, f, touched=None) -> ForwardTrace:
        f = np.asarray(f, dtype=np.float64)
        v = self.leaf_scores(f)
        vals, route = self.tree.evaluate(v)
        r_leaf = int(route[self.tree.root])
        src = self.tree.capped_sources(vals, route, v)
        c = v[src]
        resp = _softmax(c / self.tau_soft)
        crit: frozenset[int] = frozenset()
        if touched is not None:
            crit = frozenset(int(i) for i in touched[r_leaf])
        return ForwardTrace(
            f_values=f,
            leaf_scores=v,
            node_scores=[float(x) for x in vals],
            output=float(vals[self.tree.root]),
            route_leaf=r_leaf,
            argmin_leaves=frozenset({r_leaf}),
            critical_rows=crit,
            responsibilities=resp,
            capped_source=src,
        )

    def loss_and_grad(self, f, touched, y: int, y_feat=()) -> tuple[float, np.ndarray, ForwardTrace]:
        """Focal loss on the root score plus critical-row cross-entropy.

        Returns ``(loss, dloss/dtheta, trace)``; frozen thresholds get a zero
        gradient.
        """
        tr = self.forward(f, touched)
        k = self.n_measurements
        d_v = np.zeros(k)

        zl = self.slope * tr.output * y
        loss, d_zl = _focal_from_logit(zl, self.gamma, self.alpha)
        d_v[tr.route_leaf] += d_zl * self.slope * y

        y_feat = sorted(y_feat)
        if self.critical_weight and y_feat and touched is not None:
            ce, d_c = self._critical_ce(tr.responsibilities, touched, y_feat)
            loss += self.critical_weight * ce
            np.add.at(d_v, tr.capped_source, self.critical_weight * d_c)

        a = (np.asarray(f, dtype=np.float64) - self.theta) / self.z
        dv_dtheta = -self.sign * (1.0 - np.tanh(a) ** 2) / self.z
        grad = d_v * dv_dtheta
        grad[self.frozen] = 0.0
        return float(loss), grad, tr

    def _critical_ce(self, resp, touched, y_feat) -> tuple[float, np.ndarray]:
        """Cross-entropy between the responsibility-weighted row distribution
        and the uniform distribution over labelled critical rows; returns the
        loss and its gradient w.r.t. the capped leaf scores."""
        k = len(resp)
        feat = np.asarray(y_feat, dtype=np.int64)
        # w[i, j]: share of leaf i's mass landing on critical row j
        w = np.zeros((k, len(feat)))
        for i, rows in enumerate(touched):
            if len(rows):
                w[i] = np.isin(feat, rows) / len(rows)
        p = resp @ w
        loss = float(-np.mean(np.log(p + EPS_CE)))
        d_p = -1.0 / (len(feat) * (p + EPS_CE))
        d_r = w @ d_p
        d_c = resp * (d_r - resp @ d_r) / self.tau_soft
        return loss, d_c

    # ---------------------------------------------------------------- objective

    def batch_objective(self, F, y, thetas=None, hard: bool = False) -> np.ndarray | float:
        """Sum over samples of (compliance score) * y_C.

        With compliance = -root and y_C = -y this is sum(root * y).  ``thetas``
        may be a (P, K) stack of candidates, giving P objective values.  With
        ``hard`` the leaves use sign instead of tanh, so each sample scores
        +1 (right), -1 (wrong) or 0 (on a threshold).
        """
        F = np.asarray(F, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        squash = np.sign if hard else np.tanh
        single = thetas is None
        thetas = self.theta[None, :] if single else np.asarray(thetas, dtype=np.float64)
        v = self.sign * squash((F[None, :, :] - thetas[:, None, :]) / self.z)
        out = np.sum(self.tree.output(v) * y[None, :], axis=1)
        return float(out[0]) if single else out

    # ---------------------------------------------------------------- io

    def to_dict(self) -> dict:
        return {
            "theta": _b64(self.theta),
            "theta_readable": [float(t) for t in self.theta],
            "z": _b64(self.z),
            "frozen": [bool(b) for b in self.frozen],
            "tau_soft": self.tau_soft,
            "gamma": self.gamma,
            "alpha": self.alpha,
            "slope": self.slope,
            "critical_weight": self.critical_weight,
        }

    @classmethod
    def from_dict(cls, d: dict, rules: RuleSet) -> "RuleNet":
        net = cls(
            rules,
            _unb64(d["z"]),
            _unb64(d["theta"]),
            d.get("tau_soft", 0.25),
            d.get("gamma", 2.0),
            d.get("alpha", 0.25),
            d.get("slope", 3.0),
            d.get("critical_weight", 1.0),
        )
        if list(net.frozen) != list(d.get("frozen", net.frozen)):
            raise ValueError("snapshot frozen mask does not match the rule file")
        return net


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


def _b64(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unb64(d) -> np.ndarray:
    if isinstance(d, list):
        return np.asarray(d, dtype=np.float64)
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


# --------------------------------------------------------------------------
# normalization / bounds from training data
# --------------------------------------------------------------------------


def normalization_from_f(F) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z (range, or 1 for a constant measurement), min and max per column."""
    F = np.asarray(F, dtype=np.float64)
    if F.size == 0:
        raise ValueError("need at least one sample to compute normalization")
    lo, hi = F.min(axis=0), F.max(axis=0)
    z = hi - lo
    z[z <= 0] = 1.0
    return z, lo, hi


def de_bounds(lo, hi, z, margin: float = 0.1) -> list[tuple[float, float]]:
    return [(float(a - margin * s), float(b + margin * s)) for a, b, s in zip(lo, hi, z)]


def explanation_record(net: RuleNet, trace: ForwardTrace, sample_id=None) -> dict:
    rules = net.rules
    leaves = rules.leaves
    return {
        "sample_id": sample_id,
        "predicted_label": trace.label,
        "score": trace.output,
        "leaves": [
            {
                "measurement": m.name,
                "query": m.describe(),
                "direction": leaves[m.id].direction,
                "f": float(trace.f_values[m.id]),
                "theta": float(net.theta[m.id]),
                "score": float(trace.leaf_scores[m.id]),
                "violated": bool(
                    (trace.f_values[m.id] >= net.theta[m.id])
                    if leaves[m.id].direction != ABOVE
                    else (trace.f_values[m.id] <= net.theta[m.id])
                ),
            }
            for m in rules.measurements
        ],
        "argmin_leaves": sorted(trace.argmin_leaves),
        "critical_rows": sorted(trace.critical_rows),
    }


def dumps_explanations(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def loads_explanations(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
