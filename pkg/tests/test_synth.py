import logging

import numpy as np
import pytest

from delearn.data import dumps_jsonl, validate_sample
from delearn.measure import MeasureTable
from delearn.synth import (
    SYNTH_SCHEMA,
    TRUE_THETA,
    GeneratorConfig,
    br_classify,
    generate,
    preset,
    synthetic_ruleset,
)


def test_clean_data_br_true_theta_is_perfect():
    ds = generate(GeneratorConfig(n_samples=400, positive_fraction=0.3, seed=3))
    m = br_classify(synthetic_ruleset(TRUE_THETA), ds)
    assert m.accuracy == 1.0 and m.recall == 1.0


def test_noise_depresses_br_accuracy():
    cfg = GeneratorConfig(n_samples=2000, positive_fraction=0.3, noise_row_rate=0.5, seed=1)
    m = br_classify(synthetic_ruleset(TRUE_THETA), generate(cfg))
    assert m.accuracy < 1.0


def test_determinism_bytes():
    cfg = preset("spe", n_samples=150, seed=9)
    assert dumps_jsonl(generate(cfg)) == dumps_jsonl(generate(cfg))
    other = preset("spe", n_samples=150, seed=10)
    assert dumps_jsonl(generate(cfg)) != dumps_jsonl(generate(other))


def test_schema_conformance_and_y_feat():
    ds = generate(preset("gen", n_samples=600, seed=2))
    rules = synthetic_ruleset()
    for s in ds:
        validate_sample(s, SYNTH_SCHEMA)
        assert s.n_rows < 20000
        assert all(0 <= i < s.n_rows for i in s.y_feat)
        if s.y == -1:
            assert not s.y_feat
        else:
            tab = MeasureTable(rules.measurements, s)
            assert any(set(s.y_feat) <= set(t.tolist()) for t in tab.touched())


def test_noise_rows_are_near_genuine_rows():
    ds = generate(GeneratorConfig(n_samples=200, noise_row_rate=1.0, seed=4))
    for s in ds:
        conf = s.seq["confidence"]
        pos = s.positions
        noisy = conf < 0.5
        genuine = ~noisy
        for p in pos[noisy]:
            assert np.min(np.abs(pos[genuine] - p)) < SYNTH_SCHEMA.distance_threshold


def test_preset_positive_fractions():
    for name, frac in (("gen", 182 / 6766), ("spe", 838 / 2210)):
        ds = generate(preset(name, n_samples=2000, seed=0))
        assert abs(np.mean(ds.labels == 1) - frac) <= 0.02


def test_label_noise_flips_and_clears_y_feat():
    ds = generate(GeneratorConfig(n_samples=300, positive_fraction=0.5, label_noise_rate=1.0, seed=5))
    rules = synthetic_ruleset()
    for s in ds:
        assert not s.y_feat
        assert classify_label(rules, s) == -s.y


def classify_label(rules, s):
    from delearn.rules import classify_boolean

    return classify_boolean(rules, s)[0]


def test_infeasible_config_names_measurement():
    with pytest.raises(ValueError, match="m3"):
        generate(GeneratorConfig(n_samples=10, true_theta=(6.0, 4.0, 4.0, 0.1)))


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(positive_fraction=1.0)
    with pytest.raises(ValueError):
        GeneratorConfig(noise_row_rate=1.5)
    with pytest.raises(ValueError):
        preset("nope")


def test_expert_theta_is_perturbed_down():
    cfg = GeneratorConfig()
    assert all(e < t for e, t in zip(cfg.expert_theta, cfg.true_theta))


def test_br_vacuous_recall(caplog):
    cfg = GeneratorConfig(n_samples=50, positive_fraction=0.001, seed=0)
    ds = generate(cfg)
    assert not np.any(ds.labels == 1)
    with caplog.at_level(logging.WARNING):
        m = br_classify(synthetic_ruleset(), ds)
    assert m.recall == 1.0 and m.vacuous_recall
    assert "no positive" in caplog.text
