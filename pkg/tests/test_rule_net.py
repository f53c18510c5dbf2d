import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delearn.measure import MeasureTable
from delearn.rule_net import (
    RuleNet,
    de_bounds,
    dumps_explanations,
    explanation_record,
    focal_loss,
    leaf_score,
    loads_explanations,
    normalization_from_f,
)
from delearn.rules import AND, Leaf, Logic, RuleSet, classify_boolean, parse_ruleset

from helpers import SCHEMA, make_sample, random_rows, random_ruleset, rule_net_fd_case


def single_leaf_net(theta=5.0, z=1.0, direction="below"):
    src = f"rule R {{ and {{ leaf m0 {direction} {theta} }} }} measure m0 = count where type == \"a\""
    rs = parse_ruleset(src, SCHEMA)
    return RuleNet(rs, [z])


def test_leaf_score_examples():
    assert leaf_score(3.0, 3.0, 2.0) == 0.0
    assert leaf_score(5.0, 3.0, 2.0) == pytest.approx(math.tanh(1.0))
    assert leaf_score(1.0, 3.0, 2.0, "above") == pytest.approx(math.tanh(1.0))
    assert math.tanh(1.0) == pytest.approx(0.7616, abs=1e-4)


def test_single_leaf_output_is_leaf_score():
    net = single_leaf_net(5.0, 2.0)
    assert net.output(np.array([7.0])) == pytest.approx(math.tanh(1.0))


def test_and_routes_to_most_violated():
    # compliance scores {0.3, -0.2, 0.9} are violation scores {-0.3, 0.2, -0.9}
    root = Logic(AND, (Leaf(0), Leaf(1), Leaf(2)))
    ms = parse_ruleset(
        "rule R { and { leaf m0 below 0 leaf m1 below 0 leaf m2 below 0 } } measure m0 = count measure m1 = count measure m2 = count"
    ).measurements
    rs = RuleSet("R", root, ms, (0.0, 0.0, 0.0))
    net = RuleNet(rs, [1.0, 1.0, 1.0])
    f = np.arctanh([-0.3, 0.2, -0.9])
    tr = net.forward(f, [np.array([0]), np.array([1, 2]), np.array([3])])
    assert tr.output == pytest.approx(0.2)
    assert tr.argmin_leaves == frozenset({1})
    assert tr.critical_rows == frozenset({1, 2})


def test_well_classified_focal_is_small():
    net = single_leaf_net(5.0, 0.5)
    loss, _, _ = net.loss_and_grad(np.array([10.0]), [np.array([], dtype=int)], 1)
    assert loss < 0.01


def test_focal_gamma_zero_is_bce():
    for p in (0.1, 0.5, 0.93):
        assert focal_loss(p, 1, 0.0, 1.0) == pytest.approx(-math.log(p))
        assert focal_loss(p, -1, 0.0, 1.0) == pytest.approx(-math.log(1 - p))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    errs = []
    while len(errs) < 40:
        e = rule_net_fd_case(rng)
        if e is not None:
            errs.append(e)
    assert max(errs) < 1e-4


def test_frozen_theta_gets_no_gradient():
    rs = parse_ruleset(
        'rule R { and { leaf m0 below 1 frozen leaf m1 below 1 } } measure m0 = count where type == "a" measure m1 = count',
        SCHEMA,
    )
    net = RuleNet(rs, [1.0, 1.0])
    _, g, _ = net.loss_and_grad(np.array([3.0, 2.0]), [np.array([0]), np.array([0, 1])], -1, [0])
    assert g[0] == 0.0


def test_batch_objective_examples():
    net = single_leaf_net(5.0, 1.0)
    assert net.batch_objective(np.array([[-100.0]]), np.array([-1.0])) == pytest.approx(1.0)
    assert net.batch_objective(np.array([[100.0]]), np.array([1.0])) == pytest.approx(1.0)
    assert net.batch_objective(np.array([[5.0]]), np.array([1.0])) == 0.0


def test_batch_objective_vectorized_matches_loop():
    rng = np.random.default_rng(1)
    rs = random_ruleset(rng, k=4)
    net = RuleNet(rs, np.ones(4))
    F = rng.uniform(0, 5, (6, 4))
    y = rng.choice([-1.0, 1.0], 6)
    thetas = rng.uniform(0, 5, (5, 4))
    got = net.batch_objective(F, y, thetas)
    for p, th in enumerate(thetas):
        net.theta = th
        assert got[p] == pytest.approx(net.batch_objective(F, y))
        assert net.batch_objective(F, y, th[None], hard=True)[0] == pytest.approx(np.sum(net.hard_output(F) * y))


def test_hard_sign_matches_boolean_classifier():
    rng = np.random.default_rng(99)
    checked = 0
    while checked < 1000:
        rs = random_ruleset(rng, cnf=bool(rng.random() < 0.5))
        s = make_sample(random_rows(rng, int(rng.integers(0, 12))))
        f = MeasureTable(rs.measurements, s).f()
        theta = np.round(rng.uniform(0, 5, rs.n_measurements), 3) + 1e-4
        if np.any(f == theta):
            continue
        net = RuleNet(rs, rng.uniform(0.1, 3, rs.n_measurements), theta)
        assert net.predict_hard(f) == classify_boolean(rs, s, theta)[0]
        checked += 1


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.1, 10))
def test_compliance_increases_with_theta(f, theta, z):
    net = single_leaf_net(theta, z)
    lo = -net.output(np.array([f]))
    net.theta = net.theta + 0.5
    hi = -net.output(np.array([f]))
    # strictly larger unless tanh has saturated in float64
    assert hi > lo or abs(lo) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 2.0))
def test_responsibilities(seed, tau):
    rng = np.random.default_rng(seed)
    rs = random_ruleset(rng)
    net = RuleNet(rs, np.ones(rs.n_measurements), rng.uniform(0, 5, rs.n_measurements), tau_soft=tau)
    tr = net.forward(rng.uniform(0, 5, rs.n_measurements))
    assert tr.responsibilities.sum() == pytest.approx(1.0)
    assert np.all(tr.responsibilities >= 0)
    assert tr.responsibilities[tr.route_leaf] == pytest.approx(tr.responsibilities.max())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_z_rescaling_keeps_hard_label(seed):
    rng = np.random.default_rng(seed)
    rs = random_ruleset(rng)
    theta = rng.uniform(0, 5, rs.n_measurements)
    f = rng.uniform(0, 5, rs.n_measurements)
    a = RuleNet(rs, rng.uniform(0.1, 5, rs.n_measurements), theta)
    b = RuleNet(rs, rng.uniform(0.1, 5, rs.n_measurements), theta)
    assert a.predict_hard(f) == b.predict_hard(f)
    assert a.predict_f(f) == a.predict_hard(f)


def test_normalization_and_bounds():
    F = np.array([[0.0, 2.0], [4.0, 2.0], [1.0, 2.0]])
    z, lo, hi = normalization_from_f(F)
    np.testing.assert_array_equal(z, [4.0, 1.0])
    assert de_bounds(lo, hi, z) == [(-0.4, 4.4), (1.9, 2.1)]


def test_explanations_round_trip():
    rng = np.random.default_rng(5)
    rs = random_ruleset(rng, k=3, cnf=True)
    s = make_sample(random_rows(rng, 10), y=1)
    tab = MeasureTable(rs.measurements, s)
    net = RuleNet(rs, np.ones(3), np.zeros(3))
    tr = net.forward(tab.f(), tab.touched())
    rec = explanation_record(net, tr, 0)
    back = loads_explanations(dumps_explanations([rec]))[0]
    assert back == rec
    assert [l["theta"] for l in back["leaves"]] == net.theta.tolist()
    if tr.label == 1:
        assert set(rec["critical_rows"]) == set(tab.touched()[tr.route_leaf].tolist())


def test_snapshot_segment_round_trip():
    rng = np.random.default_rng(8)
    rs = random_ruleset(rng, k=3)
    net = RuleNet(rs, rng.uniform(0.5, 2, 3), rng.normal(size=3))
    back = RuleNet.from_dict(net.to_dict(), rs)
    np.testing.assert_array_equal(back.theta, net.theta)
    np.testing.assert_array_equal(back.z, net.z)


def test_z_must_be_positive():
    with pytest.raises(ValueError):
        single_leaf_net(z=0.0)
