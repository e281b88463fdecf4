import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from policyhash.codec import log_prob_grad, pack_bits, threshold
from policyhash.objectives import (
    RewardConfig,
    TripletConfig,
    combined_gradient,
    policy_gradient,
    reward,
    triplet_loss,
)
from policyhash.retrieval import CodeDatabase

CFG = RewardConfig(0.4)


def test_reward_branches():
    assert reward(0.6, CFG) == 0.6
    assert reward(0.3, CFG) == pytest.approx(-0.7)
    assert reward(0.4, CFG) == pytest.approx(-0.6)
    assert reward(0.4 + 1e-9, CFG) > 0


def test_reward_rejects_out_of_range():
    with pytest.raises(ValueError):
        reward(1.2, CFG)
    with pytest.raises(ValueError):
        reward(-0.1, CFG)


def test_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(1.5)
    with pytest.raises(ValueError):
        TripletConfig(0.0)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_reward_monotone_and_separated(a, b, beta):
    cfg = RewardConfig(beta)
    lo, hi = sorted((a, b))
    if (lo > beta) == (hi > beta):
        assert reward(lo, cfg) <= reward(hi, cfg)
    r = reward(a, cfg)
    if a > beta:
        assert beta < r <= 1
    else:
        assert -1 <= r <= beta - 1


def hand_db():
    bits = [[0, 0, 0, 0], [0, 0, 0, 1], [1, 1, 1, 1], [1, 1, 1, 0]]
    return bits, CodeDatabase(pack_bits(np.array(bits)), [{0}, {0}, {1}, {1}])


def test_self_critical_cancellation():
    _, db = hand_db()
    s = np.array([0.2, 0.7, 0.4, 0.9])
    out = policy_gradient(s, threshold(s), db, {0}, CFG)
    assert out.advantage == 0.0
    assert not out.grad_wrt_s.any()


def test_hand_built_advantage():
    bits, db = hand_db()
    sampled = pack_bits(np.array([0, 0, 0, 0]))
    s = np.array([0.6, 0.6, 0.6, 0.6])  # greedy code 1111
    ap_sampled = oracles.average_precision([0, 0, 0, 0], {0}, bits, db.labels)
    ap_greedy = oracles.average_precision([1, 1, 1, 1], {0}, bits, db.labels)
    assert ap_sampled == 1.0
    assert ap_greedy == pytest.approx((1 / 3 + 2 / 4) / 2)
    out = policy_gradient(s, sampled, db, {0}, CFG)
    # 5/12 > beta, so the greedy code is rewarded too
    expected_d = 1.0 - ap_greedy
    assert out.advantage == pytest.approx(expected_d)
    np.testing.assert_allclose(out.grad_wrt_s, -expected_d * log_prob_grad(s, sampled))
    assert out.reward == 1.0 and out.baseline_reward == pytest.approx(ap_greedy)


def test_half_ap_baseline_advantage():
    bits = [[1, 1], [0, 0], [0, 1], [1, 0]]
    db = CodeDatabase(pack_bits(np.array(bits)), [{1}, {0}, {0}, {0}])
    sampled = pack_bits(np.array([1, 1]))
    s = np.array([0.3, 0.8])  # greedy 01: distances 1,1,0,2 -> order 2,0,1,3 -> relevant at rank 2
    assert oracles.average_precision([0, 1], {1}, bits, db.labels) == 0.5
    out = policy_gradient(s, sampled, db, {1}, CFG)
    assert out.reward == 1.0 and out.baseline_reward == 0.5
    assert out.advantage == pytest.approx(0.5)
    np.testing.assert_allclose(out.grad_wrt_s, -0.5 * log_prob_grad(s, sampled))


def exact_j(s, bits, labels, qlab, beta):
    """J(s) = sum_q pi_s(q) R(q) by brute-force enumeration."""
    total = 0.0
    for code in itertools.product([0, 1], repeat=len(s)):
        p = 1.0
        for sk, qk in zip(s, code):
            p *= sk if qk else 1.0 - sk
        ap = oracles.average_precision(list(code), qlab, bits, labels)
        total += p * (ap if ap > beta else ap - 1.0)
    return total


def test_estimator_expectation_matches_fd_of_j():
    rng = np.random.default_rng(0)
    for _ in range(5):
        k, n = 4, 8
        bits = rng.integers(0, 2, size=(n, k)).tolist()
        labels = [{int(x)} for x in rng.integers(0, 2, size=n)]
        qlab = labels[0]
        db = CodeDatabase(pack_bits(np.array(bits)), labels)
        s = rng.uniform(0.15, 0.85, size=k)
        expectation = np.zeros(k)
        for code in itertools.product([0, 1], repeat=k):
            p = np.prod([sk if qk else 1 - sk for sk, qk in zip(s, code)])
            expectation += p * policy_gradient(s, pack_bits(np.array(code)), db, qlab, CFG).grad_wrt_s
        h = 1e-5
        fd = np.array([(exact_j(s + h * e, bits, labels, qlab, 0.4) - exact_j(s - h * e, bits, labels, qlab, 0.4)) / (2 * h) for e in np.eye(k)])
        # the estimator is for the loss -J
        np.testing.assert_allclose(-expectation, fd, rtol=1e-3, atol=1e-9)


def test_triplet_degenerate_equality():
    s = np.array([0.3, 0.6])
    loss, gs, gp, gn = triplet_loss(s, s, s, TripletConfig(1.0))
    assert loss == 1.0
    assert not gs.any()


def test_triplet_inactive():
    s = np.zeros(5)
    neg = np.array([1.0, 1.0, 1.0, 1.0, 1.0])
    loss, gs, gp, gn = triplet_loss(s, s, neg, TripletConfig(2.0))
    assert loss == 0.0
    assert not (gs.any() or gp.any() or gn.any())


def test_triplet_boundary_zero_subgradient():
    s = np.zeros(1)
    loss, gs, gp, gn = triplet_loss(s, s, np.array([1.0]), TripletConfig(1.0))
    assert loss == 0.0 and not (gs.any() or gp.any() or gn.any())


def fd_triplet(s, p, n, cfg, h=1e-6):
    args = [s.copy(), p.copy(), n.copy()]
    grads = []
    for which in range(3):
        g = np.zeros_like(s)
        for j in range(s.size):
            up = [a.copy() for a in args]
            dn = [a.copy() for a in args]
            up[which][j] += h
            dn[which][j] -= h
            g[j] = (triplet_loss(*up, cfg)[0] - triplet_loss(*dn, cfg)[0]) / (2 * h)
        grads.append(g)
    return grads


def test_triplet_active_example_and_fd():
    s = np.array([0.0, 0.0])
    p = np.array([1.0, 0.0])  # |s - p|^2 = 1.0
    n = np.array([np.sqrt(1.5), 0.0])  # |s - n|^2 = 1.5
    cfg = TripletConfig(1.0)
    loss, gs, gp, gn = triplet_loss(s, p, n, cfg)
    assert loss == pytest.approx(0.5)
    for analytic, numeric in zip((gs, gp, gn), fd_triplet(s, p, n, cfg)):
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**32 - 1), st.floats(0.1, 4.0))
def test_triplet_bounds(k, seed, margin):
    rng = np.random.default_rng(seed)
    s, p, n = rng.uniform(size=(3, k))
    loss = triplet_loss(s, p, n, TripletConfig(margin))[0]
    assert 0.0 <= loss <= margin + k


def test_combined_gradient():
    rng = np.random.default_rng(3)
    ga, gp, gn, pg = rng.normal(size=(4, 6))
    a, p, n = combined_gradient((ga, gp, gn), pg)
    np.testing.assert_array_equal(a, np.array([x + y for x, y in zip(ga, pg)]))
    np.testing.assert_array_equal(p, gp)
    np.testing.assert_array_equal(n, gn)
    a0, _, _ = combined_gradient((ga, gp, gn), np.zeros(6))
    np.testing.assert_array_equal(a0, ga)
    z = np.zeros(6)
    a1, p1, n1 = combined_gradient((z, z, z), pg)
    np.testing.assert_array_equal(a1, pg)
    with pytest.raises(ValueError):
        combined_gradient((ga, gp, gn), np.zeros(5))


def test_variance_reduction_on_fixed_instance():
    rng = np.random.default_rng(11)
    bits = rng.integers(0, 2, size=(16, 6))
    labels = [{int(x)} for x in rng.integers(0, 3, size=16)]
    db = CodeDatabase(pack_bits(bits), labels)
    s = rng.uniform(0.1, 0.9, size=6)
    sampler = np.random.default_rng(0)
    with_base, without = [], []
    for _ in range(1000):
        q = pack_bits((sampler.random(6) < s).astype(np.uint8))
        out = policy_gradient(s, q, db, labels[0], CFG)
        grad_log = log_prob_grad(s, q)
        with_base.append(out.advantage * grad_log)
        without.append(out.reward * grad_log)
    assert np.var(with_base, axis=0).sum() <= np.var(without, axis=0).sum()
