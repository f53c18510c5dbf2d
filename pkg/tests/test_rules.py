import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delearn.measure import evaluate_all
from delearn.rules import (
    AND,
    Leaf,
    Logic,
    RuleError,
    RuleSyntaxError,
    classify_boolean,
    dumps_ruleset,
    evaluate_boolean,
    is_cnf,
    load_ruleset,
    parse_ruleset,
    ruleset_from_json,
    ruleset_to_json,
    save_ruleset,
)

from helpers import SCHEMA, boolean_oracle, make_sample, random_rows, random_ruleset

MINIMAL = 'rule R { and { leaf m0 below 5.0 } } measure m0 = count where type == "scratch"'


def test_minimal_program():
    rs = parse_ruleset(MINIMAL)
    assert isinstance(rs.root, Logic) and rs.root.op == AND
    assert rs.root.children == (Leaf(0, "below"),)
    assert rs.theta == (5.0,)
    assert rs.measurements[0].aggregation == "count"


def test_whitespace_and_comments_do_not_matter():
    spaced = """
    # expert limits
    rule   R
    {
       and {
          leaf m0 below 5.0   # scratches
       }
    }
    measure m0 = count where type == "scratch"
    """
    assert parse_ruleset(spaced) == parse_ruleset(MINIMAL)


def test_unknown_measurement():
    with pytest.raises(RuleError, match="unknown measurement m7"):
        parse_ruleset('rule R { and { leaf m7 below 1 } } measure m0 = count where type == "a"')


def test_nested_cnf_accepted():
    src = """rule R cnf { and { or { leaf m0 below 1 leaf m1 above 2 } leaf m2 below 3 } }
    measure m0 = count where type == "a"
    measure m1 = max length where type == "b"
    measure m2 = count"""
    rs = parse_ruleset(src, SCHEMA)
    assert rs.cnf and is_cnf(rs.root)


def test_cnf_flag_rejects_non_cnf():
    with pytest.raises(RuleError, match="cnf"):
        parse_ruleset("rule R cnf { or { leaf m0 below 1 } } measure m0 = count", SCHEMA)


def test_syntax_error_has_position():
    with pytest.raises(RuleSyntaxError) as exc:
        parse_ruleset("rule R { and { leaf m0 below 1 }\n  oops } measure m0 = count")
    assert exc.value.line == 2 and exc.value.col == 3


@pytest.mark.parametrize(
    "src, message",
    [
        ('rule R { and { leaf m0 below 1 } } measure m0 = count where colour == "a"', "unknown column"),
        ('rule R { and { leaf m0 below 1 } } measure m0 = count measure m0 = count', "duplicate"),
        ("rule R { and { } }", "empty and"),
        ("rule R { and { leaf m0 below 1 } } measure m0 = max type", "numeric"),
        ("rule R { and { leaf m0 below 1 } } measure m0 = count where type < 3", "only =="),
    ],
)
def test_validation_errors(src, message):
    with pytest.raises(RuleError, match=message):
        parse_ruleset(src, SCHEMA)


def test_frozen_leaf():
    rs = parse_ruleset("rule R { and { leaf m0 below 1 frozen leaf m1 below 2 } } measure m0 = count measure m1 = count")
    assert rs.frozen_mask.tolist() == [True, False]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.booleans())
def test_dsl_round_trip(seed, cnf):
    rs = random_ruleset(np.random.default_rng(seed), cnf=cnf)
    back = parse_ruleset(dumps_ruleset(rs), SCHEMA)
    assert back == rs
    assert dumps_ruleset(back) == dumps_ruleset(rs)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_json_round_trip(seed):
    rs = random_ruleset(np.random.default_rng(seed))
    blob = json.loads(json.dumps(ruleset_to_json(rs)))
    assert ruleset_from_json(blob, SCHEMA) == rs


def test_file_round_trip(tmp_path):
    rs = random_ruleset(np.random.default_rng(3), k=4, cnf=True)
    for name in ("r.rules", "r.rules.json"):
        save_ruleset(rs, tmp_path / name)
        assert load_ruleset(tmp_path / name, SCHEMA) == rs


def test_classify_examples():
    rs = parse_ruleset(MINIMAL)
    schema_rows = lambda k: [[float(i), "scratch", 1.0] for i in range(k)]
    label, viol = classify_boolean(rs, make_sample(schema_rows(3)))
    assert (label, viol) == (-1, frozenset())
    label, viol = classify_boolean(rs, make_sample(schema_rows(7)))
    assert (label, viol) == (1, frozenset({0}))


def test_and_reports_exactly_failing_leaf():
    root = Logic(AND, (Leaf(0), Leaf(1)))
    ok, viol = evaluate_boolean(root, [1.0, 9.0], [5.0, 5.0])
    assert not ok and viol == frozenset({1})


def test_boundary_is_violation():
    ok, _ = evaluate_boolean(Leaf(0), [5.0], [5.0])
    assert not ok
    ok, _ = evaluate_boolean(Leaf(0, "above"), [5.0], [5.0])
    assert not ok


def test_classify_matches_oracle_on_random_triples():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        rs = random_ruleset(rng, cnf=bool(rng.random() < 0.5))
        s = make_sample(random_rows(rng, int(rng.integers(0, 15))))
        theta = rng.uniform(0, 5, rs.n_measurements)
        f, _ = evaluate_all(rs.measurements, s)
        label, viol = classify_boolean(rs, s, theta)
        expect = boolean_oracle(rs.root, f, theta)
        assert label == (-1 if expect else 1)
        if rs.cnf:
            assert (len(viol) == 0) == (label == -1)


def test_schema_check_literal_types():
    with pytest.raises(RuleError):
        parse_ruleset('rule R { and { leaf m0 below 1 } } measure m0 = count where length == "x"', SCHEMA)


def test_theta_must_be_finite():
    rs = parse_ruleset(MINIMAL)
    with pytest.raises(RuleError):
        rs.with_theta([float("nan")])
