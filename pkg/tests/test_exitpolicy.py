import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slothlab.exitpolicy import (
    ExitPolicy, adaptive_infer, calibrate, infer_batch, should_stop, threshold_grid,
)
from slothlab.metrics import build_eec, efficacy, evaluate
from slothlab.multiexit import ExitHead, MultiExitNetwork
from slothlab.tensorcore import Dense, NonFiniteError, ReLU


def two_exit_net(W1, W2, d):
    """Identity trunk on non-negative inputs; each head is a fixed linear read-out."""
    blocks = [[Dense(d, d, weight=np.eye(d)), ReLU()], [Dense(d, d, weight=np.eye(d)), ReLU()]]
    m = len(W1)
    return MultiExitNetwork((d,), blocks, [ExitHead(1, [Dense(d, m, weight=W1)]),
                                           ExitHead(2, [Dense(d, m, weight=W2)])], m)


def noisy_first_exit(n=400, seed=0):
    """Exit 1 reads a label copy that is wrong for 20% of samples, at random confidence;
    the final exit reads the true label."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    noisy = y.copy()
    flip = rng.permutation(n)[: n // 5]
    noisy[flip] = 1 - noisy[flip]
    X = np.zeros((n, 4))
    X[np.arange(n), y] = 1.0
    X[np.arange(n), 2 + noisy] = rng.uniform(0, 5, n)
    W1 = np.array([[0, 0, 1, 0], [0, 0, 0, 1.0]])
    W2 = 10 * np.array([[1, 0, 0, 0], [0, 1, 0, 0.0]])
    return two_exit_net(W1, W2, 4), X, y


def test_should_stop_examples():
    assert not should_stop(np.zeros(10), "confidence", 0.5)
    assert not should_stop(np.zeros(10), "entropy", 0.5)
    z = np.zeros(10)
    z[0] = 10
    assert math.exp(10) / (math.exp(10) + 9) == pytest.approx(0.99959, abs=1e-5)
    assert should_stop(z, "confidence", 0.99)
    assert not should_stop(z, "confidence", None)


def test_should_stop_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        should_stop([0.0, np.inf], "confidence", 0.5)


@given(st.integers(2, 50), st.floats(0, 1), st.floats(-10, 10))
def test_uniform_logits_never_stop(m, u, c):
    t_conf = 1 / m + (1 - 1 / m) * u
    if t_conf > 1 / m:
        assert not should_stop(np.full(m, c), "confidence", t_conf)
    t_ent = math.log(m) * u
    if t_ent < math.log(m) * (1 - 1e-9):
        assert not should_stop(np.full(m, c), "entropy", t_ent)


def test_policy_threshold_ranges():
    with pytest.raises(ValueError):
        ExitPolicy("confidence", [1.5, None])
    with pytest.raises(ValueError):
        ExitPolicy("entropy", [-0.1, None])
    with pytest.raises(ValueError):
        ExitPolicy("margin", [0.5])


def test_never_and_always(tiny_net, rng):
    x = rng.random((1, 8, 8))
    rec = adaptive_infer(tiny_net, ExitPolicy.never("confidence", 4), x)
    assert (rec.exit_index, rec.cost_fraction) == (4, 1.0)
    rec = adaptive_infer(tiny_net, ExitPolicy.shared("confidence", 4, 0.0), x)
    assert rec.exit_index == 1
    assert rec.cost_fraction == tiny_net.cost_fractions[0]


def test_uniform_then_confident_exits_at_two():
    W1 = np.zeros((3, 2))
    W2 = np.array([[10.0, 10.0], [0, 0], [0, 0]])
    net = two_exit_net(W1, W2, 2)
    net.blocks.append([Dense(2, 2, weight=np.eye(2))])
    net.exits.append(ExitHead(3, [Dense(2, 3)]))
    net = MultiExitNetwork(net.input_shape, net.blocks, net.exits, 3)
    rec = adaptive_infer(net, ExitPolicy.shared("confidence", 3, 0.9), np.ones(2))
    assert rec.exit_index == 2 and rec.predicted_label == 0


def test_policy_must_match_exit_count(tiny_net, rng):
    with pytest.raises(ValueError):
        adaptive_infer(tiny_net, ExitPolicy.never("confidence", 3), rng.random((1, 8, 8)))


@given(st.lists(st.one_of(st.none(), st.floats(0, 1)), min_size=4, max_size=4),
       st.integers(0, 3), st.floats(0, 1), st.integers(0, 2**16))
def test_raising_a_threshold_never_exits_earlier(tiny_net, thresholds, i, bump, seed):
    x = np.random.default_rng(seed).random((1, 8, 8))
    before = adaptive_infer(tiny_net, ExitPolicy("confidence", thresholds), x).exit_index
    raised = list(thresholds)
    raised[i] = None if raised[i] is None else min(1.0, raised[i] + bump)
    assert adaptive_infer(tiny_net, ExitPolicy("confidence", raised), x).exit_index >= before


@pytest.mark.parametrize("criterion,t", [("confidence", 0.3), ("entropy", 1.2), ("confidence", 0.6)])
def test_batched_inference_matches_single_sample(tiny_net, rng, criterion, t):
    X = rng.random((40, 1, 8, 8))
    policy = ExitPolicy.shared(criterion, 4, t)
    batch = infer_batch(tiny_net, policy, X, chunk=7)
    for x, r in zip(X, batch):
        one = adaptive_infer(tiny_net, policy, x)
        assert (one.exit_index, one.predicted_label, one.cost_fraction) == (r.exit_index, r.predicted_label,
                                                                           r.cost_fraction)
        assert one.score == pytest.approx(r.score, abs=1e-12)


def test_grid():
    conf = threshold_grid("confidence", 8)
    ent = threshold_grid("entropy", 8)
    assert len(conf) == len(ent) == 101
    assert conf[0] == 0.0 and conf[-1] == 1.0 and conf[37] == 0.37
    assert ent[0] == pytest.approx(math.log(8)) and ent[-1] == 0.0


def test_agreeing_exits_get_the_most_aggressive_policy():
    # exit 1 is exactly uniform on the first sample and otherwise agrees with the final exit
    X = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.5, 0.0]])
    y = np.zeros(4, dtype=int)
    W = np.array([[1.0, 0.0], [0.0, 0.0]])
    net = two_exit_net(W, W, 2)
    p = calibrate(net, X, y, "entropy", 0.05)
    assert p.thresholds[0] == pytest.approx(math.log(2))
    # with the confidence rule every threshold up to 1/m fires everywhere; ties resolve conservatively
    p = calibrate(net, X, y, "confidence", 0.05)
    recs = infer_batch(net, p, X)
    assert all(r.exit_index == 1 for r in recs)
    assert p.holdout_accuracy == p.full_accuracy


def test_vacuous_budget_allows_the_most_aggressive_candidate(tiny_net, rng):
    X = rng.random((50, 1, 8, 8))
    y = rng.integers(0, 4, 50)
    p = calibrate(tiny_net, X, y, "confidence", 1.0)
    assert p.feasible
    assert p.holdout_efficacy == pytest.approx(efficacy(build_eec([tiny_net.cost_fractions[0]] * 50)))


def test_calibration_against_exhaustive_oracle():
    net, X, y = noisy_first_exit()
    before = net.flat_params().copy()
    p = calibrate(net, X, y, "confidence", 0.05)
    np.testing.assert_array_equal(net.flat_params(), before)
    assert p.full_accuracy == 1.0
    assert p.holdout_accuracy >= 0.95 * p.full_accuracy

    # independent oracle: per-sample exit-1 confidence and correctness, every grid point
    z1 = X[:, 2:4]
    conf1 = np.exp(z1.max(1)) / np.exp(z1).sum(1)
    right1 = z1.argmax(1) == y
    best = None
    for t in np.round(np.arange(101) * 0.01, 2):
        early = conf1 >= t
        acc = np.mean(np.where(early, right1, True))
        if acc < 0.95:
            continue
        cost = np.where(early, net.cost_fractions[0], 1.0)
        if best is None or 1 - cost.mean() > best[0] + 1e-9:
            best = (1 - cost.mean(), acc)
    assert p.holdout_efficacy == pytest.approx(best[0], abs=2e-3)

    rep = evaluate(net, p, X, y)
    assert (p.full_accuracy - rep.accuracy) / p.full_accuracy <= 0.05


def test_infeasible_budget_falls_back_to_never():
    net, X, y = noisy_first_exit()
    net.exits[0].layers[0].weight = net.exits[0].layers[0].weight * 0 + np.array([[0, 0, 0, 5.0], [0, 0, 5.0, 0]])
    p = calibrate(net, X, y, "confidence", 0.01, grid=[0.0, 0.5])
    assert not p.feasible
    assert p.thresholds == [None, None]


def test_empty_holdout(tiny_net):
    with pytest.raises(ValueError):
        calibrate(tiny_net, np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=int))


def test_policy_json_round_trip():
    p = ExitPolicy("entropy", [0.5, None, 1.0], 0.05, 0.9, 0.92, 0.4)
    assert ExitPolicy.from_json(p.to_json()) == p
