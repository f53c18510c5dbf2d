"""scikit-learn style wrappers around the trainer and the raw-rule baseline.

``X`` is a :class:`~delearn.data.Dataset` (or a list of samples together
with ``schema``); labels default to the samples' own ``y``.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, Sample, Schema, validate_sample
from .rules import RuleSet, parse_ruleset
from .synth import br_classify, br_predict
from .trainer import Prepared, TrainConfig, load_model, train

CLASSES = np.array([-1, 1])


def check_samples(X, schema: Schema | None = None) -> Dataset:
    """Coerce ``X`` to a validated Dataset."""
    if isinstance(X, Dataset):
        ds = X
    else:
        samples = list(X)
        if schema is None:
            raise ValueError("a schema is needed when X is not a Dataset")
        if not all(isinstance(s, Sample) for s in samples):
            raise TypeError("X must hold Sample objects")
        ds = Dataset(schema, samples)
    if len(ds) == 0:
        raise ValueError("X holds no samples")
    for s in ds:
        validate_sample(s, ds.schema)
    return ds


def check_labels(y, ds: Dataset) -> Dataset:
    """Replace sample labels with ``y`` (values in {-1, +1})."""
    if y is None:
        return ds
    y = np.asarray(y).ravel()
    if len(y) != len(ds):
        raise ValueError(f"y has {len(y)} labels for {len(ds)} samples")
    bad = set(np.unique(y)) - {-1, 1}
    if bad:
        raise ValueError(f"labels must be -1 or +1, got {sorted(bad)}")
    return Dataset(ds.schema, [s if int(v) == s.y else s.with_label(int(v)) for s, v in zip(ds, y)])


def check_rules(rules, schema: Schema) -> RuleSet:
    if rules is None:
        raise ValueError("rules must be given")
    rs = parse_ruleset(rules, schema) if isinstance(rules, str) else rules
    if not isinstance(rs, RuleSet):
        raise TypeError("rules must be a RuleSet or rule text")
    rs.check_schema(schema)
    return rs


class DELClassifier(ClassifierMixin, BaseEstimator):
    """Learns rule thresholds (and optionally a row mask model) from labelled
    sequences.  Predictions are +1 (fails the rules) or -1 (complies).

    ``desk_scale`` selects the short 3000-step schedule; any keyword left
    as None falls back to that schedule's value.
    """

    def __init__(
        self,
        rules=None,
        schema=None,
        desk_scale: bool = False,
        sigma1=None,
        sigma2=None,
        l_rule=None,
        l_assess=None,
        acc_threshold: float = 0.925,
        use_assess: bool = True,
        critical_weight: float = 1.0,
        workers: int = 1,
        seed: int = 0,
    ):
        self.rules = rules
        self.schema = schema
        self.desk_scale = desk_scale
        self.sigma1 = sigma1
        self.sigma2 = sigma2
        self.l_rule = l_rule
        self.l_assess = l_assess
        self.acc_threshold = acc_threshold
        self.use_assess = use_assess
        self.critical_weight = critical_weight
        self.workers = workers
        self.seed = seed

    def train_config(self) -> TrainConfig:
        base = TrainConfig.desk() if self.desk_scale else TrainConfig()
        given = {k: getattr(self, k) for k in ("sigma1", "sigma2", "l_rule", "l_assess")}
        given = {k: v for k, v in given.items() if v is not None}
        return replace(
            base, acc_threshold=self.acc_threshold, use_assess=self.use_assess,
            critical_weight=self.critical_weight, workers=self.workers, seed=self.seed, **given,
        )

    def fit(self, X, y=None):
        ds = check_labels(y, check_samples(X, self.schema))
        rules = check_rules(self.rules, ds.schema)
        result = train(self.train_config(), ds, rules)
        self.result_ = result
        self.snapshot_ = result.best
        self.model_, self.schema_ = load_model(result.best)
        self.classes_ = CLASSES
        self.theta_ = self.model_.net.theta.copy()
        return self

    def _prepared(self, X) -> Prepared:
        check_is_fitted(self, "model_")
        ds = check_samples(X, self.schema_)
        if ds.schema.names != self.schema_.names:
            raise ValueError("X does not match the schema seen in fit")
        return Prepared.build(self.model_.net.rules, ds)

    def decision_function(self, X) -> np.ndarray:
        """Smooth root score in (-1, 1); positive means predicted +1."""
        prep = self._prepared(X)
        f, _ = self.model_.measurements(prep)
        return self.model_.net.output(f)

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) > 0, 1, -1)

    def transform(self, X) -> np.ndarray:
        """Measurement matrix (n_samples, K) after masking."""
        f, _ = self.model_.measurements(self._prepared(X))
        return np.asarray(f)

    def predict_masks(self, X) -> list[np.ndarray]:
        """Per-row keep probabilities (all ones without the assessing model)."""
        prep = self._prepared(X)
        masks = self.model_.masks(prep.dataset.samples)
        return [np.ones(s.n_rows) if m is None else m for s, m in zip(prep.dataset, masks)]

    def explain(self, X) -> list[dict]:
        prep = self._prepared(X)
        return [self.model_.explain(s, t) for s, t in zip(prep.dataset, prep.tables)]

    def score_metrics(self, X):
        prep = self._prepared(X)
        return self.model_.evaluate(prep, self.acc_threshold)


class BRClassifier(ClassifierMixin, BaseEstimator):
    """Raw-rule baseline: boolean evaluation with the rule file's thresholds
    on unmasked rows.  ``fit`` only validates; nothing is learned."""

    def __init__(self, rules=None, schema=None, acc_threshold: float = 0.925):
        self.rules = rules
        self.schema = schema
        self.acc_threshold = acc_threshold

    def fit(self, X, y=None):
        ds = check_samples(X, self.schema)
        self.rules_ = check_rules(self.rules, ds.schema)
        self.schema_ = ds.schema
        self.classes_ = CLASSES
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "rules_")
        ds = check_samples(X, self.schema_)
        return br_predict(self.rules_, ds).predictions

    def score_metrics(self, X):
        check_is_fitted(self, "rules_")
        ds = check_samples(X, self.schema_)
        return br_classify(self.rules_, ds, acc_threshold=self.acc_threshold)
