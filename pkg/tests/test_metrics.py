import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slothlab.exitpolicy import ExitPolicy, adaptive_infer
from slothlab.metrics import (
    GRID_SIZE, EECCurve, build_eec, efficacy, evaluate, read_eec_csv, read_reports_csv, write_eec_csv,
    write_reports_csv,
)
from slothlab.multiexit import ExitHead, MultiExitNetwork
from slothlab.tensorcore import Dense, ReLU

costs = st.lists(st.floats(0, 1), min_size=1, max_size=200)


def test_all_at_full_cost():
    c = build_eec([1.0] * 5)
    assert np.all(c.values[:-1] == 0) and c.values[-1] == 1.0
    assert efficacy(c) <= 1 / GRID_SIZE


def test_all_at_zero_cost():
    c = build_eec([0.0] * 5)
    assert np.all(c.values == 1.0)
    assert efficacy(c) == pytest.approx(1.0)


def test_half_and_full():
    c = build_eec([0.5, 1.0])
    g = c.grid
    assert np.all(c.values[g < 0.5] == 0)
    assert np.all(c.values[(g >= 0.5) & (g < 1)] == 0.5)
    assert c.values[-1] == 1.0
    assert efficacy(c) == pytest.approx(0.25, abs=2 / GRID_SIZE)


@given(costs)
def test_efficacy_is_one_minus_mean_cost(cs):
    assert efficacy(build_eec(cs)) == pytest.approx(1 - np.mean(cs), abs=2 / GRID_SIZE)


@given(costs)
def test_curve_is_a_cdf(cs):
    c = build_eec(cs)
    c.validate()
    assert 0 <= efficacy(c) <= 1


def test_empty_records():
    with pytest.raises(ValueError):
        build_eec([])


def test_malformed_curve():
    with pytest.raises(ValueError):
        efficacy(EECCurve(np.linspace(0, 1, 3), np.array([0.5, 0.2, 1.0])))


def constant_net(m=4, K=3):
    blocks = [[Dense(2, 2, weight=np.eye(2)), ReLU()] for _ in range(K)]
    return MultiExitNetwork((2,), blocks, [ExitHead(i + 1, [Dense(2, m)]) for i in range(K)], m)


def test_perfect_net_with_never_policy():
    net = constant_net()
    for head in net.exits:
        head.layers[0].bias = np.array([5.0, 0, 0, 0])
    X = np.random.default_rng(0).random((20, 2))
    rep = evaluate(net, ExitPolicy.never("confidence", 3), X, np.zeros(20, dtype=int))
    assert rep.accuracy == 1.0
    assert rep.efficacy <= 1 / GRID_SIZE
    assert rep.per_exit_counts == [0, 0, 20]


def test_uniform_net_always_reaches_the_end():
    net = constant_net()
    X = np.random.default_rng(0).random((20, 2))
    for t in (0.26, 0.5, 0.99):
        rep = evaluate(net, ExitPolicy.shared("confidence", 3, t), X, np.zeros(20, dtype=int))
        assert rep.per_exit_counts == [0, 0, 20]


def test_evaluate_matches_recomputation_on_the_desk_model(desk_model, desk_policies, desk_splits):
    test = desk_splits["test"].subset(np.arange(300))
    policy = desk_policies[0.05]
    rep = evaluate(desk_model, policy, test.X, test.y)
    recs = [adaptive_infer(desk_model, policy, x) for x in test.X]
    cost = np.array([r.cost_fraction for r in recs])
    # trapezoid area of the empirical CDF, written out by hand
    g = np.linspace(0, 1, GRID_SIZE)
    F = np.array([(cost <= v).mean() for v in g])
    area = float(((F[1:] + F[:-1]) / 2 * np.diff(g)).sum())
    assert rep.efficacy == pytest.approx(area, abs=1e-12)
    assert rep.accuracy == np.mean([r.predicted_label for r in recs] == test.y)
    assert rep.per_exit_counts == list(np.bincount([r.exit_index - 1 for r in recs], minlength=4))


def test_csv_round_trips(tmp_path):
    c = build_eec([0.1, 0.7, 0.7, 1.0])
    write_eec_csv(c, tmp_path / "c.csv")
    back = read_eec_csv(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.grid, c.grid)
    np.testing.assert_array_equal(back.values, c.values)

    net = constant_net()
    rep = evaluate(net, ExitPolicy.never("confidence", 3), np.zeros((3, 2)), [0, 1, 2], tag="x")
    write_reports_csv([rep], tmp_path / "r.csv")
    row = read_reports_csv(tmp_path / "r.csv")[0]
    assert row == {"tag": "x", "efficacy": rep.efficacy, "accuracy": rep.accuracy,
                   "mean_cost": rep.mean_cost_fraction, "n": 3}
