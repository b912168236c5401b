import numpy as np
import pytest
from hypothesis import given, strategies as st

from aod import reinforce
from aod.aodnet import NetworkOutput
from aod.errors import ConfigError, ContractError
from aod.geometry import BoundingBox
from aod.reinforce import (Episode, RLConfig, batch_rewards, compute_discrete_reward, compute_reward,
                           ema_center, mean_gradients, normalize_returns, policy_gradient)
from oracles import bandit_gradient, bandit_objective

PROP = BoundingBox(20, 20, 10, 10)


def output(probs, deltas=None, K=2):
    d = np.zeros((K, 4)) if deltas is None else np.asarray(deltas, dtype=np.float64)
    return NetworkOutput(np.asarray(probs, dtype=np.float64), d)


def test_reward_example():
    # class 1 box regressed to the proposal, which overlaps the gt by 50/150
    out = output([0.2, 0.7, 0.1])
    gt = BoundingBox(25, 20, 10, 10)
    assert np.isclose(compute_reward(out, 1, gt, PROP), 0.7 * (50 / 150))


def test_reward_uses_true_class_slice():
    deltas = np.array([[0.5, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
    out = output([0.1, 0.3, 0.6], deltas)
    gt = BoundingBox(25, 20, 10, 10)
    assert np.isclose(compute_reward(out, 1, gt, PROP), 0.3)
    assert np.isclose(compute_reward(out, 2, gt, PROP), 0.6 / 3)


def test_background_reward_policy():
    out = output([0.8, 0.1, 0.1])
    with pytest.raises(ContractError):
        compute_reward(out, 0, None, PROP)
    assert compute_reward(out, 0, None, PROP, include_background=True) == 0.8


@pytest.mark.parametrize("probs,label,shift,expected", [
    ([0.1, 0.8, 0.1], 1, 0.0, 1.0),   # correct class, iou 1
    ([0.1, 0.8, 0.1], 1, 0.5, 0.0),   # correct class, iou 1/3
    ([0.1, 0.2, 0.7], 1, 0.0, 0.0),   # wrong class
    ([0.6, 0.3, 0.1], 1, 0.0, 0.0),   # background wins
])
def test_discrete_rule_table(probs, label, shift, expected):
    deltas = np.zeros((2, 4))
    deltas[label - 1, 0] = shift
    gt = PROP
    assert compute_discrete_reward(output(probs, deltas), label, gt, PROP) == expected


def test_batch_rewards_match_scalar(rng):
    n, K = 50, 3
    probs = rng.dirichlet(np.ones(K + 1), n)
    deltas = rng.normal(0, 0.2, (n, K, 4))
    labels = rng.integers(1, K + 1, n)
    proposals = np.column_stack([rng.uniform(10, 40, (n, 2)), rng.uniform(5, 20, (n, 2))])
    gts = proposals + rng.normal(0, 2, (n, 4))
    gts[:, 2:] = np.abs(gts[:, 2:]) + 1
    vec = batch_rewards(probs, deltas, labels, gts, proposals)
    for i in range(n):
        out = NetworkOutput(probs[i], deltas[i])
        s = compute_reward(out, labels[i], BoundingBox.from_array(gts[i]), BoundingBox.from_array(proposals[i]))
        assert abs(vec[i] - s) < 1e-12


def test_normalize_examples():
    assert np.allclose(normalize_returns([1.0, 3.0]), [-1.0, 1.0])
    assert normalize_returns([0.4] * 5).tolist() == [0.0] * 5
    with pytest.raises(ContractError):
        normalize_returns([])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=16))
def test_normalize_properties(values):
    r = np.array(values)
    z = normalize_returns(r)
    if np.var(r) < reinforce.DEGENERATE_VARIANCE:
        assert not z.any()
    else:
        assert abs(z.mean()) <= 1e-9
        assert abs(np.mean(z * z) - 1.0) <= 1e-6


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=16), st.floats(0.1, 10), st.floats(-5, 5))
def test_normalize_affine_invariant(values, a, b):
    r = np.array(values)
    if np.var(r) < 1e-6:
        return
    assert np.allclose(normalize_returns(r), normalize_returns(a * r + b), atol=1e-6)


def test_ema_center():
    centered, state = ema_center([1.0, 1.0], 0.0, 0.5)
    assert centered.tolist() == [1.0, 0.5]
    assert state == 0.75


def test_mean_gradients_formula():
    noise = np.array([[[0.1, 0.0, 0.0, -0.2]], [[0.0, 0.2, 0.0, 0.0]]])
    g = mean_gradients([1.0, -1.0], noise, sigma=0.2, return_scale=0.1)
    expected = np.array([[[0.1, 0.0, 0.0, -0.2]], [[0.0, -0.2, 0.0, 0.0]]]) * 0.1 / 0.04 / 2
    assert np.allclose(g, expected)


def test_policy_gradient_checks_count():
    eps = [Episode(None, np.zeros((1, 4)), normalized_return=1.0) for _ in range(3)]
    with pytest.raises(ContractError):
        policy_gradient(eps, 0.2, n_episodes=8)
    assert policy_gradient(eps, 0.2).shape == (3, 1, 4)


def test_zero_returns_zero_gradient():
    g = mean_gradients(np.zeros(8), np.ones((8, 2, 4)), 0.2)
    assert not g.any()


def bandit_estimate(theta, x, target, sigma, n, rng):
    mu = theta @ x
    pilot = mu + rng.standard_normal((max(n // 100, 8), mu.size)) * sigma
    b = -np.mean(np.sum((pilot - target) ** 2, axis=1))
    noise = rng.standard_normal((n, mu.size)) * sigma
    R = -np.sum((mu + noise - target) ** 2, axis=1)
    return np.outer(mean_gradients(R - b, noise, sigma).sum(axis=0), x)


def test_bandit_estimator_unbiased():
    rng = np.random.default_rng(1)
    theta, x, target = rng.standard_normal((3, 2)), rng.standard_normal(2), rng.standard_normal(3)
    est = bandit_estimate(theta, x, target, 0.3, 100_000, rng)
    ref = bandit_gradient(theta, x, target, 0.3)
    assert np.linalg.norm(est - ref) / np.linalg.norm(ref) < 0.05


def test_bandit_ascent_improves():
    rng = np.random.default_rng(2)
    theta, x, target = rng.standard_normal((3, 2)), rng.standard_normal(2), rng.standard_normal(3)
    j0 = bandit_objective(theta, x, target, 0.3)
    for _ in range(50):
        theta = theta + 0.05 * bandit_estimate(theta, x, target, 0.3, 256, rng)
    assert bandit_objective(theta, x, target, 0.3) > j0


def test_rl_config_validation():
    with pytest.raises(ConfigError):
        RLConfig(sigma=0)
    with pytest.raises(ConfigError):
        RLConfig(reward_kind="binary")
