"""Synthetic inspection data with planted threshold rules.

Each sample is a product trace: defect observations along a line
(``position``), each with a ``type``, a ``length`` and a detector
``confidence``.  Labels come from a planted rule set (true thresholds);
the generator leaves a margin around every true threshold so a perfect
classifier exists on clean data.  Noise rows are low-confidence spurious
detections placed next to genuine rows; they inflate one measurement past
its threshold, which is what an assessing model should learn to mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import CATEGORICAL, Column, Dataset, Sample, Schema
from .measure import MeasureTable
from .numerics import derive_seed, seeded_rng
from .rules import COUNT, RuleSet, classify_boolean, evaluate_boolean, parse_ruleset

log = logging.getLogger(__name__)

TYPES = ("scratch", "dent", "stain", "spot", "other")

SYNTH_SCHEMA = Schema(
    (
        Column("position"),
        Column("type", CATEGORICAL),
        Column("length"),
        Column("confidence"),
    ),
    base_len=3,
    empty_default=0.0,
    distance_threshold=2.0,
)

SYNTH_RULES = """\
# a product is unqualified (+1) when any defect measurement reaches its limit
rule surface cnf {{
  and {{
    leaf m0 below {0!r}
    leaf m1 below {1!r}
    leaf m2 below {2!r}
    leaf m3 below {3!r}
  }}
}}
measure m0 = count where type == "scratch"
measure m1 = max length where type == "dent"
measure m2 = count where type == "stain" and length > 1.0
measure m3 = max length where type == "spot"
"""

# planted thresholds and the largest value each measurement takes
TRUE_THETA = (6.0, 4.0, 4.0, 2.5)
VALUE_HI = (14.0, 8.0, 10.0, 5.0)


def synthetic_ruleset(theta=TRUE_THETA) -> RuleSet:
    return parse_ruleset(SYNTH_RULES.format(*(float(t) for t in theta)), SYNTH_SCHEMA)


@dataclass
class GeneratorConfig:
    n_samples: int = 2000
    positive_fraction: float = 0.1
    true_theta: tuple = TRUE_THETA
    expert_theta: tuple | None = None
    seq_length_range: tuple = (8, 40)
    noise_row_rate: float = 0.0
    label_noise_rate: float = 0.0
    seed: int = 0
    value_hi: tuple = VALUE_HI
    margin: float = 0.12  # gap around each true threshold, as a fraction of value_hi
    extra_violation_prob: float = 0.15

    def __post_init__(self):
        self.true_theta = tuple(float(t) for t in self.true_theta)
        self.value_hi = tuple(float(v) for v in self.value_hi)
        if self.expert_theta is None:
            self.expert_theta = perturb_theta(self.true_theta, self.value_hi, -0.3)
        self.expert_theta = tuple(float(t) for t in self.expert_theta)
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValueError("positive_fraction must lie in (0, 1)")
        for name in ("noise_row_rate", "label_noise_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.seq_length_range
        if not 0 <= lo <= hi:
            raise ValueError("seq_length_range must satisfy 0 <= min <= max")


def perturb_theta(theta, scale, frac: float) -> tuple:
    return tuple(float(t + frac * s) for t, s in zip(theta, scale))


def preset(name: str, **overrides) -> GeneratorConfig:
    """``gen``: heavily imbalanced daily-production proxy; ``spe``: balanced,
    stricter thresholds, noisier."""
    if name == "gen":
        cfg = GeneratorConfig(
            positive_fraction=182 / 6766,
            noise_row_rate=0.35,
            label_noise_rate=0.0,
        )
    elif name == "spe":
        cfg = GeneratorConfig(
            positive_fraction=838 / 2210,
            true_theta=perturb_theta(TRUE_THETA, VALUE_HI, -0.03),
            expert_theta=perturb_theta(TRUE_THETA, VALUE_HI, -0.3),
            noise_row_rate=0.5,
            label_noise_rate=0.0,
        )
    elif name == "clean":
        cfg = GeneratorConfig(positive_fraction=0.3)
    else:
        raise ValueError(f"unknown preset {name!r} (expected gen, spe or clean)")
    return replace(cfg, **overrides) if overrides else cfg


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _value_ranges(cfg: GeneratorConfig, rules: RuleSet):
    """(compliant_hi, violating_lo) per measurement, checking feasibility."""
    out = []
    for m in rules.measurements:
        k = m.id
        theta, hi = cfg.true_theta[k], cfg.value_hi[k]
        gap = cfg.margin * hi
        ok_hi, bad_lo = theta - gap, theta + gap
        if m.aggregation == COUNT:
            ok_hi, bad_lo = np.floor(ok_hi), np.ceil(bad_lo)
            if bad_lo == theta:
                bad_lo += 1
        if ok_hi < 0 or not ok_hi < theta:
            raise ValueError(f"measurement {m.name}: no compliant values below threshold {theta}")
        if bad_lo > hi or not bad_lo > theta:
            raise ValueError(f"measurement {m.name}: no violating values between {theta} and {hi}")
        out.append((float(ok_hi), float(bad_lo)))
    return out


def _draw_value(rng, is_count: bool, lo: float, hi: float, allow_empty: bool) -> float:
    if is_count:
        return float(rng.integers(int(lo), int(hi) + 1))
    if allow_empty and rng.random() < 0.3:
        return 0.0
    return float(np.round(rng.uniform(max(lo, 0.3), hi), 3))


def _rows_for(k: int, value: float, rng) -> list[tuple[str, float]]:
    """(type, length) rows realising measurement ``k`` = ``value`` for the
    built-in synthetic rule set."""
    rows = []
    if k == 0:
        rows += [("scratch", float(np.round(rng.uniform(0.1, 5.0), 3))) for _ in range(int(value))]
    elif k == 2:
        rows += [("stain", float(np.round(rng.uniform(1.05, 4.0), 3))) for _ in range(int(value))]
        rows += [("stain", float(np.round(rng.uniform(0.1, 0.95), 3))) for _ in range(int(rng.integers(0, 3)))]
    else:
        kind = "dent" if k == 1 else "spot"
        if value > 0:
            rows.append((kind, value))
            for _ in range(int(rng.integers(0, 3))):
                rows.append((kind, float(np.round(rng.uniform(0.1, value), 3))))
    return rows


def _noise_rows(k: int, current: float, theta: float, bad_lo: float, hi: float, rng):
    if k in (0, 2):
        need = int(np.floor(theta - current)) + 1 + int(rng.integers(0, 3))
        kind = "scratch" if k == 0 else "stain"
        lo = 0.1 if k == 0 else 1.05
        return [(kind, float(np.round(rng.uniform(lo, 4.0), 3))) for _ in range(max(need, 1))]
    kind = "dent" if k == 1 else "spot"
    return [(kind, float(np.round(rng.uniform(bad_lo, hi), 3)))]


def _make_sample(cfg, rules, ranges, y: int, idx: int) -> tuple[Sample, bool]:
    rng = seeded_rng(derive_seed(cfg.seed, idx))
    k_all = rules.n_measurements
    is_count = [m.aggregation == COUNT for m in rules.measurements]

    violated = set()
    if y == 1:
        violated.add(int(rng.integers(k_all)))
        for k in range(k_all):
            if k not in violated and rng.random() < cfg.extra_violation_prob:
                violated.add(k)
    f = []
    for k in range(k_all):
        ok_hi, bad_lo = ranges[k]
        if k in violated:
            f.append(_draw_value(rng, is_count[k], bad_lo, cfg.value_hi[k], False))
        else:
            f.append(_draw_value(rng, is_count[k], 0.0, ok_hi, True))

    genuine: list[tuple[str, float, int]] = []  # (type, length, measurement or -1)
    for k in range(k_all):
        genuine += [(t, ln, k) for t, ln in _rows_for(k, f[k], rng)]
    lo_len, hi_len = cfg.seq_length_range
    target_len = int(rng.integers(lo_len, hi_len + 1))
    while len(genuine) < target_len:
        genuine.append(("other", float(np.round(rng.uniform(0.1, 5.0), 3)), -1))
    order = rng.permutation(len(genuine))
    genuine = [genuine[i] for i in order]
    steps = rng.uniform(0.3, 2.5, size=len(genuine))
    pos = np.round(np.cumsum(steps), 3)
    conf = np.round(rng.uniform(0.6, 1.0, size=len(genuine)), 3)
    rows = [(float(p), t, ln, float(c), False) for p, (t, ln, _), c in zip(pos, genuine, conf)]

    noisy = False
    if rows and rng.random() < cfg.noise_row_rate:
        k = int(rng.integers(k_all))
        ok_hi, bad_lo = ranges[k]
        extra = _noise_rows(k, f[k], cfg.true_theta[k], bad_lo, cfg.value_hi[k], rng)
        anchor = float(pos[int(rng.integers(len(pos)))])
        for t, ln in extra:
            p = float(np.round(anchor + rng.uniform(-1.5, 1.5), 3))
            rows.append((p, t, ln, float(np.round(rng.uniform(0.05, 0.45), 3)), True))
        noisy = True

    rows.sort(key=lambda r: r[0])
    seq = {
        "position": np.array([r[0] for r in rows], dtype=np.float64),
        "type": np.array([r[1] for r in rows], dtype=object),
        "length": np.array([r[2] for r in rows], dtype=np.float64),
        "confidence": np.array([r[3] for r in rows], dtype=np.float64),
    }
    base = np.round(rng.normal(0.0, 1.0, size=SYNTH_SCHEMA.base_len), 4)
    sample = Sample(seq, base, y, frozenset(), idx)

    if y == 1:
        genuine_keep = np.array([not r[4] for r in rows], dtype=bool)
        table = MeasureTable(rules.measurements, sample)
        f_clean = table.f(genuine_keep.astype(float))
        worst = max(
            violated, key=lambda k: ((f_clean[k] - cfg.true_theta[k]) / cfg.value_hi[k], -k)
        )
        feat = np.flatnonzero(table.match[worst] & genuine_keep)
        sample = Sample(seq, base, y, frozenset(int(i) for i in feat), idx)

    if cfg.label_noise_rate and rng.random() < cfg.label_noise_rate:
        sample = sample.with_label(-y)
    return sample, noisy


def generate(cfg: GeneratorConfig, rules: RuleSet | None = None) -> Dataset:
    """Draw ``cfg.n_samples`` samples; deterministic in ``cfg.seed``."""
    rules = synthetic_ruleset(cfg.true_theta) if rules is None else rules.with_theta(cfg.true_theta)
    rules.check_schema(SYNTH_SCHEMA)
    ranges = _value_ranges(cfg, rules)
    n_pos = int(round(cfg.n_samples * cfg.positive_fraction))
    labels = np.array([1] * n_pos + [-1] * (cfg.n_samples - n_pos))
    labels = seeded_rng(derive_seed(cfg.seed, 2**31 - 1)).permutation(labels)

    samples = []
    corrupted = 0
    for i, y in enumerate(labels):
        s, noisy = _make_sample(cfg, rules, ranges, int(y), i)
        corrupted += noisy
        samples.append(s)
    ds = Dataset(SYNTH_SCHEMA, samples)
    if cfg.noise_row_rate == 0.0 and cfg.label_noise_rate == 0.0:
        for s in samples:
            if s.n_rows and classify_boolean(rules, s)[0] != s.y:
                raise AssertionError("planted rule does not reproduce a clean label")
    elif cfg.noise_row_rate >= 0.5 and cfg.n_samples >= 100 and corrupted == 0:
        raise AssertionError("noisy preset produced no corrupted sample")
    return ds


# --------------------------------------------------------------------------
# raw-rule baseline
# --------------------------------------------------------------------------


@dataclass
class BRResult:
    predictions: np.ndarray
    violated: list = field(default_factory=list)


def br_predict(rules: RuleSet, dataset, theta=None) -> BRResult:
    """Apply the rule set with its file thresholds to unmasked samples."""
    theta = rules.theta if theta is None else theta
    preds, viol = [], []
    empty = dataset.schema.empty_default if isinstance(dataset, Dataset) else 0.0
    for s in dataset:
        table = MeasureTable(rules.measurements, s, empty)
        ok, v = evaluate_boolean(rules.root, table.f(), theta)
        preds.append(-1 if ok else 1)
        viol.append(v)
    return BRResult(np.array(preds, dtype=np.int64), viol)


def br_classify(rules: RuleSet, dataset, theta=None, acc_threshold: float = 0.925):
    """Metrics of the raw-rule baseline."""
    from .trainer import compute_metrics

    res = br_predict(rules, dataset, theta)
    crit = []
    for s, v in zip(dataset, res.violated):
        table = MeasureTable(rules.measurements, s, dataset.schema.empty_default)
        touched = table.touched()
        crit.append(frozenset(int(r) for k in v for r in touched[k]))
    return compute_metrics(dataset.labels, res.predictions, acc_threshold, [s.y_feat for s in dataset], crit)
