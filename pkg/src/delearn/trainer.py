"""Two-stage interleaved training of the rule network and the assessing model.

Per step ``t``: a balanced rule batch updates the thresholds (on raw rows
while ``t < sigma1``, on assessing-model-masked rows afterwards); every
``mu_gopt`` steps differential evolution searches the unfrozen thresholds
on the same batch; every ``mu_val`` steps the whole training set is scored
and a snapshot is taken; finally a balanced assess batch gets search-made
target masks and the assessing model takes one Adam step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .assess import AssessModel
from .data import Dataset, Schema
from .measure import MeasureTable
from .numerics import AdamState, DEConfig, adam_step, de_optimize, derive_seed, seeded_rng
from .rule_net import RuleNet, de_bounds, explanation_record, normalization_from_f
from .rules import RuleSet, ruleset_from_json, ruleset_to_json
from .search import SearchConfig, generate_targets

log = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
# weight of the mean |shift| (in units of Z) in the global-search objective;
# small enough that it only breaks ties between equally good thresholds
GOPT_SHIFT_PENALTY = 0.25
# the global-search population starts within this many Z of the current theta
GOPT_INIT_SPREAD = 0.05


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    sigma1: int = 1000
    sigma2: int = 40000
    l_rule: float = 1e-4
    l_assess: float = 1e-4
    beta: int = 4
    mu_gopt: int = 50
    sigma_gopt: int = 5
    mu_val: int = 100
    acc_threshold: float = 0.925
    seed: int = 0
    chi: int = 15
    tau: int = 10
    use_assess: bool = True
    critical_weight: float = 1.0
    tau_soft: float = 0.25
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    slope: float = 3.0
    workers: int = 1

    def __post_init__(self):
        counts = ("sigma2", "beta", "mu_gopt", "sigma_gopt", "mu_val", "chi", "tau")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.sigma1 < 1:
            raise ConfigError("sigma1 must be positive")
        if self.sigma1 > self.sigma2:
            raise ConfigError("sigma1 must not exceed sigma2")
        if not 0.0 < self.acc_threshold < 1.0:
            raise ConfigError("acc_threshold must lie in (0, 1)")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Short schedule for CI: same loop, 3000 steps.  The rule learning
        rate is scaled by the step ratio so thresholds can travel as far as
        they would in the full schedule."""
        base = {"sigma1": 200, "sigma2": 3000, "l_rule": 1e-4 * 40000 / 3000, "l_assess": 1e-3}
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    recall: float
    recall_prime: float
    false_neg: int
    false_pos: int
    false_critical_ratio: float
    n_samples: int = 0
    n_positive: int = 0
    vacuous_recall: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(**d)


def recall_prime(recall: float, accuracy: float, acc_threshold: float) -> float:
    return recall if accuracy >= acc_threshold else -recall


def compute_metrics(y_true, y_pred, acc_threshold: float, y_feat=None, critical=None) -> Metrics:
    """Accuracy, positive-class recall, augmented recall and critical-row misses.

    With no positive samples recall is reported as 1.0 and flagged.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    n = len(y_true)
    if n == 0:
        raise ValueError("cannot score an empty dataset")
    pos = y_true == 1
    acc = float(np.mean(y_true == y_pred))
    vacuous = not pos.any()
    if vacuous:
        log.warning("no positive samples: recall reported as 1.0")
        rec = 1.0
    else:
        rec = float(np.mean(y_pred[pos] == 1))
    fn = int(np.sum(pos & (y_pred == -1)))
    fp = int(np.sum(~pos & (y_pred == 1)))
    fcr = 0.0
    if y_feat is not None and critical is not None:
        labelled = [(set(f), set(c)) for f, c in zip(y_feat, critical) if f]
        if labelled:
            fcr = sum(1 for f, c in labelled if not (f & c)) / len(labelled)
    return Metrics(acc, rec, recall_prime(rec, acc, acc_threshold), fn, fp, fcr, n, int(pos.sum()), vacuous)


# --------------------------------------------------------------------------
# model = rule net + optional assessing model
# --------------------------------------------------------------------------


@dataclass
class Prepared:
    """Per-dataset caches: measurement tables and raw measurement matrix."""

    dataset: Dataset
    tables: list[MeasureTable]
    f_raw: np.ndarray

    @classmethod
    def build(cls, rules: RuleSet, dataset: Dataset) -> "Prepared":
        empty = dataset.schema.empty_default
        tables = [MeasureTable(rules.measurements, s, empty) for s in dataset]
        f = np.array([t.f() for t in tables]).reshape(len(tables), rules.n_measurements)
        return cls(dataset, tables, f)


@dataclass
class DELModel:
    net: RuleNet
    assess: AssessModel | None
    use_masks: bool

    def masks(self, samples) -> list[np.ndarray | None]:
        if self.use_masks and self.assess is not None:
            return [self.assess.mask(s) for s in samples]
        return [None] * len(samples)

    def measurements(self, prep: Prepared, idx=None):
        idx = range(len(prep.tables)) if idx is None else idx
        samples = [prep.dataset[i] for i in idx]
        masks = self.masks(samples)
        if not (self.use_masks and self.assess is not None):
            return prep.f_raw[list(idx)], masks
        f = np.array([prep.tables[i].f(m) for i, m in zip(idx, masks)])
        return f.reshape(len(samples), self.net.n_measurements), masks

    def predict_prepared(self, prep: Prepared) -> tuple[np.ndarray, list[frozenset]]:
        f, masks = self.measurements(prep)
        scores = self.net.output(f)
        labels = np.where(scores > 0, 1, -1)
        crit = []
        for i, m in enumerate(masks):
            tr = self.net.forward(f[i], prep.tables[i].touched(m))
            crit.append(tr.critical_rows)
        return labels, crit

    def evaluate(self, prep: Prepared, acc_threshold: float) -> Metrics:
        labels, crit = self.predict_prepared(prep)
        ds = prep.dataset
        return compute_metrics(ds.labels, labels, acc_threshold, [s.y_feat for s in ds], crit)

    def explain(self, sample, table: MeasureTable) -> dict:
        mask = self.masks([sample])[0]
        f = table.f(mask)
        tr = self.net.forward(f, table.touched(mask))
        rec = explanation_record(self.net, tr, sample.sample_id)
        rec["masked_rows"] = [] if mask is None else [int(i) for i in np.flatnonzero(mask < 0.5)]
        rec["label"] = int(sample.y)
        return rec


# --------------------------------------------------------------------------
# snapshots
# --------------------------------------------------------------------------


def make_snapshot(model: DELModel, step: int, metrics: Metrics, cfg_hash: str, schema: Schema) -> dict:
    return {
        "step": int(step),
        "use_masks": bool(model.use_masks),
        "rules": ruleset_to_json(model.net.rules),
        "schema": schema.to_dict(),
        "rule_net": model.net.to_dict(),
        "assess": None if model.assess is None else model.assess.to_dict(),
        "metrics": metrics.to_dict(),
        "config_hash": cfg_hash,
        "tool_version": TOOL_VERSION,
    }


def load_model(snapshot: dict) -> tuple[DELModel, Schema]:
    schema = Schema.from_dict(snapshot["schema"])
    rules = ruleset_from_json(snapshot["rules"], schema)
    net = RuleNet.from_dict(snapshot["rule_net"], rules)
    assess = None if snapshot["assess"] is None else AssessModel.from_dict(snapshot["assess"], schema)
    return DELModel(net, assess, snapshot["use_masks"]), schema


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def save_snapshot(snapshot: dict, directory) -> Path:
    path = Path(directory) / f"snap_{snapshot['step']}.json"
    write_json_atomic(path, snapshot)
    return path


def load_snapshot(path) -> dict:
    return json.loads(Path(path).read_text())


def evaluate(snapshot: dict, dataset: Dataset, acc_threshold: float | None = None) -> Metrics:
    """Re-score a saved model on ``dataset``."""
    model, schema = load_model(snapshot)
    if schema.names != dataset.schema.names or schema.base_len != dataset.schema.base_len:
        raise ConfigError("snapshot schema does not match the dataset schema")
    if acc_threshold is None:
        acc_threshold = snapshot.get("acc_threshold", 0.925)
    prep = Prepared.build(model.net.rules, dataset)
    return model.evaluate(prep, acc_threshold)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


Hook = Callable[..., None]


@dataclass
class TrainResult:
    history: list[dict]
    best: dict
    log: list[dict]
    model: DELModel
    search_log: list[dict] = field(default_factory=list)


def _balanced(rng, pos, neg, beta):
    def draw(idx):
        replace = len(idx) < beta
        return rng.choice(idx, size=beta, replace=replace)

    return np.concatenate([draw(pos), draw(neg)])


def train(
    config: TrainConfig,
    dataset: Dataset,
    rules: RuleSet,
    out_dir=None,
    hook: Hook | None = None,
    on_validation: Hook | None = None,
    keep_search_log: bool = False,
) -> TrainResult:
    """Run the two-stage schedule; returns every validation snapshot and the
    one with the best augmented recall (ties: higher accuracy, then earlier)."""
    rules.check_schema(dataset.schema)
    labels = dataset.labels
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == -1)
    if len(pos) == 0 or len(neg) == 0:
        raise ConfigError("training data needs samples of both classes")

    cfg_hash = config.hash()
    root_rng = seeded_rng(config.seed)
    batch_rng, search_rng, assess_seed_rng = (np.random.Generator(b) for b in root_rng.bit_generator.spawn(3))

    prep = Prepared.build(rules, dataset)
    z, f_lo, f_hi = normalization_from_f(prep.f_raw)
    net = RuleNet(
        rules, z, None, config.tau_soft, config.focal_gamma, config.focal_alpha,
        config.slope, config.critical_weight,
    )
    assess = None
    if config.use_assess:
        assess = AssessModel.fit_new(
            dataset.schema, dataset.samples, int(assess_seed_rng.integers(2**31)), config.l_assess
        )
    model = DELModel(net, assess, False)
    search_cfg = SearchConfig(config.chi, config.tau, config.seed)

    free = ~net.frozen
    bounds = de_bounds(f_lo, f_hi, z)
    free_bounds = [b for b, ok in zip(bounds, free) if ok]
    # Adam works on theta / Z so the step size is in units of each range
    adam = AdamState.zeros(rules.n_measurements, config.l_rule)

    history: list[dict] = []
    metrics_log: list[dict] = []
    search_log: list[dict] = []
    best = None
    loss_rule_acc, loss_assess_acc, n_rule, n_assess = 0.0, 0.0, 0, 0
    emit = hook or (lambda *a, **k: None)

    for t in range(config.sigma2):
        stage2 = config.use_assess and t >= config.sigma1
        model.use_masks = stage2

        # rule learning
        rb = _balanced(batch_rng, pos, neg, config.beta)
        f_b, masks = model.measurements(prep, rb)
        touched = [prep.tables[i].touched(m) for i, m in zip(rb, masks)]
        emit(
            "rule_batch", t, labels=labels[rb].tolist(), stage2=stage2,
            dropped_rows=sum(0 if m is None else int(np.sum(m < 0.5)) for m in masks),
            masks=masks,
        )
        grad = np.zeros(rules.n_measurements)
        loss = 0.0
        for j, i in enumerate(rb):
            l_j, g_j, _ = net.loss_and_grad(f_b[j], touched[j], int(labels[i]), dataset[i].y_feat)
            loss += l_j
            grad += g_j
        loss /= len(rb)
        grad /= len(rb)
        u, adam = adam_step(adam, net.theta / net.z, grad * net.z)
        net.theta = np.where(net.frozen, net.theta, u * net.z)
        loss_rule_acc += loss
        n_rule += 1

        # global search
        if t % config.mu_gopt == 0 and free.any():
            y_b = labels[rb].astype(np.float64)
            u_now = net.theta[free] / net.z[free]
            before = net.batch_objective(f_b, y_b, hard=True)

            def objective(cand, f_b=f_b, y_b=y_b, u_now=u_now):
                full = np.tile(net.theta, (len(cand), 1))
                full[:, free] = cand
                shift = np.mean(np.abs(cand / net.z[free] - u_now), axis=1)
                return -net.batch_objective(f_b, y_b, full, hard=True) + GOPT_SHIFT_PENALTY * shift

            de_seed = derive_seed(config.seed, t)
            de_cfg = DEConfig(
                free_bounds, seed=int(de_seed.generate_state(1)[0]),
                init=_local_population(net.theta[free], net.z[free], free_bounds, de_seed),
            )
            res = de_optimize(objective, de_cfg, config.sigma_gopt, vectorized=True)
            cand = net.theta.copy()
            cand[free] = res.x
            after = net.batch_objective(f_b, y_b, cand[None, :], hard=True)[0]
            accepted = after > before
            if accepted:
                net.theta = cand
            emit(
                "global_search", t, iterations=len(res.history) - 1, accepted=bool(accepted),
                before=float(before), after=float(net.batch_objective(f_b, y_b, hard=True)),
            )

        # validation on the training set
        if t % config.mu_val == 0:
            metrics = model.evaluate(prep, config.acc_threshold)
            snap = make_snapshot(model, t, metrics, cfg_hash, dataset.schema)
            snap["acc_threshold"] = config.acc_threshold
            history.append(snap)
            record = {
                "step": t,
                "loss_rule": loss_rule_acc / max(n_rule, 1),
                "loss_assess": loss_assess_acc / max(n_assess, 1) if n_assess else None,
                "false_neg": metrics.false_neg,
                "false_pos": metrics.false_pos,
                "false_critical_ratio": metrics.false_critical_ratio,
                "accuracy": metrics.accuracy,
                "recall": metrics.recall,
                "recall_prime": metrics.recall_prime,
            }
            metrics_log.append(record)
            loss_rule_acc, loss_assess_acc, n_rule, n_assess = 0.0, 0.0, 0, 0
            if out_dir is not None:
                save_snapshot(snap, out_dir)
            if best is None or _better(metrics, Metrics.from_dict(best["metrics"])):
                best = snap
            emit("validation", t, metrics=metrics)
            if on_validation is not None:
                on_validation(record)

        # assessing model
        ab = _balanced(batch_rng, pos, neg, config.beta)
        emit("assess_batch", t, labels=labels[ab].tolist())
        if assess is not None:
            samples = [dataset[i] for i in ab]
            graphs = [assess.row_graph(s) for s in samples]
            tb = generate_targets(
                samples, net, [prep.tables[i] for i in ab], graphs, assess, stage2,
                search_cfg, search_rng, config.workers,
            )
            if keep_search_log:
                for rec in tb.logs:
                    rec["step"] = t
                search_log.extend(tb.logs)
            pairs = [(s, m) for s, m in zip(samples, tb.targets) if m is not None]
            if pairs:
                loss_assess_acc += assess.train_step(pairs)
                n_assess += 1
            emit("assess_update", t, n_targets=len(pairs), searched=tb.searched, found=tb.found)

    if out_dir is not None:
        out = Path(out_dir)
        (out / "metrics.jsonl").write_text("".join(json.dumps(r) + "\n" for r in metrics_log))
        write_json_atomic(out / "best.json", best)
        write_json_atomic(
            out / "manifest.json",
            {"config": config.to_dict(), "config_hash": cfg_hash, "tool_version": TOOL_VERSION,
             "best_step": best["step"], "snapshots": [h["step"] for h in history]},
        )
    return TrainResult(history, best, metrics_log, model, search_log)


def _local_population(theta, z, bounds, seed) -> list[np.ndarray]:
    """Current thresholds plus Gaussian neighbours, clipped to the bounds."""
    dim = len(theta)
    size = max(4, min(15 * dim, 64))
    rng = seeded_rng(seed.spawn(1)[0])
    lo, hi = np.array(bounds).T
    pts = theta + GOPT_INIT_SPREAD * z * rng.standard_normal((size - 1, dim))
    return [theta.copy()] + list(np.clip(pts, lo, hi))


def _better(a: Metrics, b: Metrics) -> bool:
    return (a.recall_prime, a.accuracy) > (b.recall_prime, b.accuracy)


# --------------------------------------------------------------------------
# closed / open protocol
# --------------------------------------------------------------------------


def stratified_split(labels, seed: int, frac: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    rng = seeded_rng(derive_seed(seed, 5150))
    labels = np.asarray(labels)
    a, b = [], []
    for cls in (1, -1):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        cut = int(round(len(idx) * frac))
        a.append(idx[:cut])
        b.append(idx[cut:])
    return np.sort(np.concatenate(a)), np.sort(np.concatenate(b))


def _table(title, train_m: Metrics, test_m: Metrics, br_m: Metrics) -> dict:
    return {
        "title": title,
        "rows": [
            {"method": "DEL", "train_recall_prime": train_m.recall_prime, "train_accuracy": train_m.accuracy,
             "test_recall": test_m.recall, "test_accuracy": test_m.accuracy},
            {"method": "BR", "train_recall_prime": None, "train_accuracy": None,
             "test_recall": br_m.recall, "test_accuracy": br_m.accuracy},
        ],
    }


def closed_open_protocol(
    a: Dataset, b: Dataset, rules: RuleSet, config: TrainConfig,
    names=("A", "B"), thresholds=None, train_fn=train,
) -> dict:
    """Closed tests (stratified 50/50 split) on each dataset plus the two
    open tests (train on all of one, test on all of the other)."""
    from .synth import br_classify

    thr = thresholds or (config.acc_threshold, config.acc_threshold)

    def run(train_ds, test_ds, acc_train, acc_test):
        cfg = replace(config, acc_threshold=acc_train)
        res = train_fn(cfg, train_ds, rules)
        best = res.best
        train_m = Metrics.from_dict(best["metrics"])
        test_m = evaluate(best, test_ds, acc_test)
        br_m = br_classify(rules, test_ds, acc_threshold=acc_test)
        return train_m, test_m, br_m

    tables = []
    for (ds, name, t) in ((a, names[0], thr[0]), (b, names[1], thr[1])):
        tr_idx, te_idx = stratified_split(ds.labels, config.seed)
        tables.append(_table(f"Closed test on {name}", *run(ds.subset(tr_idx), ds.subset(te_idx), t, t)))
    tables.append(_table(f"Open test: train {names[0]}, test {names[1]}", *run(a, b, thr[0], thr[1])))
    tables.append(_table(f"Open test: train {names[1]}, test {names[0]}", *run(b, a, thr[1], thr[0])))
    return {"tables": tables}


def format_protocol(report: dict) -> str:
    lines = []
    for tab in report["tables"]:
        lines.append(tab["title"])
        lines.append(f"  {'':6s} {'Recall′':>9s} {'Acc.':>8s} | {'Recall':>8s} {'Acc.':>8s}")
        for r in tab["rows"]:
            trp = "-" if r["train_recall_prime"] is None else f"{r['train_recall_prime']:.4f}"
            tra = "-" if r["train_accuracy"] is None else f"{r['train_accuracy']:.4f}"
            lines.append(
                f"  {r['method']:6s} {trp:>9s} {tra:>8s} | {r['test_recall']:8.4f} {r['test_accuracy']:8.4f}"
            )
        lines.append("")
    return "\n".join(lines)
