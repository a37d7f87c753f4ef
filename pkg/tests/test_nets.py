"""Gradient correctness, sampling, optimizer, and checkpoint round-trips."""

import math

import numpy as np
import pytest

from auctionrl.nets import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    Adam,
    GaussianPolicy,
    Mlp,
    SoftmaxPolicy,
    ValueNet,
    load_checkpoint,
    save_checkpoint,
)


def finite_diff_check(params, grads, objective, h=1e-5):
    """Max relative error between analytic grads and central differences.

    The denominator floor keeps roundoff of the difference quotient (about
    1e-11 absolute here) from registering on gradients that are themselves
    at the 1e-8 scale.
    """
    worst = 0.0
    for p, g in zip(params, grads):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = objective()
            p[idx] = old - h
            down = objective()
            p[idx] = old
            fd = (up - down) / (2.0 * h)
            denom = max(abs(fd), abs(g[idx]), 1e-6)
            worst = max(worst, abs(fd - g[idx]) / denom)
    return worst


def test_backprop_matches_central_differences():
    # 100 random (net, state, action) cases across both policy kinds.
    rng = np.random.default_rng(0)
    worst = 0.0
    for case in range(50):
        pol = GaussianPolicy(2, rng, hidden=(6, 5), init_log_std=math.log(0.5))
        states = rng.random((3, 2))
        actions = rng.random(3)
        coeffs = rng.standard_normal(3)
        pol.zero_grads()
        pol.log_prob_backward(states, actions, coeffs)
        grads = [g.copy() for g in pol.grads()]
        obj = lambda: float(np.sum(coeffs * pol.log_prob(states, actions)))
        worst = max(worst, finite_diff_check(pol.params(), grads, obj))
    for case in range(50):
        pol = SoftmaxPolicy(2, 4, rng, hidden=(6,))
        states = rng.random((3, 2))
        actions = rng.integers(0, 4, size=3)
        coeffs = rng.standard_normal(3)
        pol.zero_grads()
        pol.log_prob_backward(states, actions, coeffs)
        grads = [g.copy() for g in pol.grads()]
        obj = lambda: float(np.sum(coeffs * pol.log_prob(states, actions)))
        worst = max(worst, finite_diff_check(pol.params(), grads, obj))
    assert worst <= 1e-4


def test_value_net_mse_gradient():
    rng = np.random.default_rng(1)
    net = ValueNet(2, rng, hidden=(7, 5))
    states = rng.random((6, 2))
    targets = rng.random(6)
    net.zero_grads()
    net.mse_backward(states, targets)
    grads = [g.copy() for g in net.grads()]
    obj = lambda: float(np.mean((net.values(states) - targets) ** 2))
    assert finite_diff_check(net.params(), grads, obj) <= 1e-4


def test_gaussian_sample_at_mean():
    # With z = 0 the sample sits at the mean and the density is 1/(sigma sqrt(2 pi)).
    rng = np.random.default_rng(2)
    pol = GaussianPolicy(1, rng, init_log_std=math.log(0.1))
    states = np.array([[0.3]])
    mu = pol.mean(states)
    lp = pol.log_prob_from_mean(mu, mu)
    assert lp[0] == pytest.approx(-math.log(0.1 * math.sqrt(2 * math.pi)))


def test_gaussian_clamps_executed_bid():
    rng = np.random.default_rng(3)
    pol = GaussianPolicy(1, rng, action_scale=1.0)
    # Force a mean far above the cap.
    pol.mean_net.biases[-1][:] = 1.2
    pol.mean_net.weights[-1][:] = 0.0
    pol.log_std[:] = LOG_STD_MIN
    _, bids, _ = pol.sample(np.array([[0.5]] * 100), rng)
    assert np.all(bids == 1.0)


def test_score_is_zero_at_the_mean():
    rng = np.random.default_rng(4)
    pol = GaussianPolicy(1, rng)
    states = np.array([[0.7]])
    mu = pol.mean(states)
    pol.zero_grads()
    pol.log_prob_backward(states, mu, np.ones(1))
    # d log pi / d mu = (a - mu) / sigma^2 = 0, so mean-net grads vanish.
    for g in pol.mean_net.grads():
        np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_softmax_uniform_and_normalisation():
    rng = np.random.default_rng(5)
    pol = SoftmaxPolicy(1, 5, rng)
    pol.logit_net.weights[-1][:] = 0.0
    pol.logit_net.biases[-1][:] = 0.0
    p = pol.probs(np.array([[0.2]]))
    np.testing.assert_allclose(p, 0.2)
    for _ in range(20):
        pol2 = SoftmaxPolicy(2, 7, rng)
        probs = pol2.probs(rng.random((4, 2)))
        assert np.all(probs > 0.0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_logit_gradient_rows_sum_to_zero():
    # Shift invariance: d log pi / d logits sums to zero across actions.
    rng = np.random.default_rng(6)
    pol = SoftmaxPolicy(1, 4, rng, hidden=())
    states = rng.random((5, 1))
    actions = rng.integers(0, 4, size=5)
    pol.zero_grads()
    pol.log_prob_backward(states, actions, np.ones(5))
    # The final bias feeds every logit equally, so its gradient is the
    # column sum of the logit gradients; shift invariance makes it vanish.
    np.testing.assert_allclose(pol.logit_net.b_grads[-1], 0.0, atol=1e-12)


def test_entropy_values():
    rng = np.random.default_rng(7)
    pol = GaussianPolicy(1, rng, init_log_std=0.0)
    assert pol.entropy() == pytest.approx(0.5 * math.log(2 * math.pi * math.e))

    soft = SoftmaxPolicy(1, 4, rng)
    soft.logit_net.weights[-1][:] = 0.0
    soft.logit_net.biases[-1][:] = 0.0
    h = soft.entropy(np.array([[0.1]]))
    assert h[0] == pytest.approx(math.log(4))
    # Near-deterministic logits push entropy toward zero from above.
    soft.logit_net.biases[-1][:] = np.array([30.0, 0.0, 0.0, 0.0])
    h = soft.entropy(np.array([[0.1]]))
    assert 0.0 < h[0] < 1e-9


def test_eglp_lemma_gaussian_and_softmax():
    # E[grad log pi] = 0 at a fixed state: every component within 4 SE of zero.
    rng = np.random.default_rng(8)
    pol = GaussianPolicy(1, rng, hidden=(8,), init_log_std=math.log(0.4))
    state = np.array([[0.6]])
    n = 100_000
    states = np.repeat(state, n, axis=0)
    actions, _, _ = pol.sample(states, rng)
    sigma = pol.std
    mu = pol.mean(states)
    z = (actions - mu) / sigma
    # Collect per-sample gradients analytically for the output layer and the
    # log-std; hidden layers are linear images of the same statistics.
    per_sample_mu_grad = z / sigma
    per_sample_logstd_grad = z * z - 1.0
    for comp in (per_sample_mu_grad, per_sample_logstd_grad):
        se = comp.std(ddof=1) / math.sqrt(n)
        assert abs(comp.mean()) <= 4.0 * se

    soft = SoftmaxPolicy(1, 5, rng, hidden=(6,))
    probs = soft.probs(state)[0]
    idx, _ = soft.sample(np.repeat(state, n, axis=0), rng)
    onehot = np.zeros((n, 5))
    onehot[np.arange(n), idx] = 1.0
    score = onehot - probs[None, :]  # d log pi / d logits
    se = score.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(score.mean(axis=0)) <= 4.0 * np.maximum(se, 1e-12))


def test_adam_zero_gradient_keeps_params():
    rng = np.random.default_rng(9)
    net = Mlp([2, 3, 1], rng)
    before = [p.copy() for p in net.params()]
    opt = Adam(net.params(), lr=0.1)
    opt.step(net.params(), [np.zeros_like(p) for p in net.params()])
    for b, p in zip(before, net.params()):
        np.testing.assert_array_equal(b, p)


def test_adam_first_step_magnitude():
    x = np.array([0.0])
    opt = Adam([x], lr=0.05)
    opt.step([x], [np.array([3.7])])
    assert abs(x[0]) == pytest.approx(0.05, rel=1e-6)


def test_adam_minimises_quadratic_bowl():
    target = np.array([1.3, -0.4])
    x = np.zeros(2)
    opt = Adam([x], lr=0.01)
    for _ in range(1000):
        opt.step([x], [2.0 * (x - target)])
    assert np.max(np.abs(x - target)) < 1e-3


def test_adam_rejects_nonfinite_gradients():
    x = np.zeros(2)
    opt = Adam([x], lr=0.01)
    with pytest.raises(FloatingPointError):
        opt.step([x], [np.array([np.nan, 0.0])])


def test_log_std_stays_clamped():
    rng = np.random.default_rng(10)
    pol = GaussianPolicy(1, rng)
    opt = Adam(pol.params(), lr=0.5, maximize=True)
    for _ in range(200):
        pol.zero_grads()
        pol.log_std_grad += 5.0  # push upward hard
        opt.step(pol.params(), pol.grads())
        pol.clamp_log_std()
        assert LOG_STD_MIN <= pol.log_std[0] <= LOG_STD_MAX
    for _ in range(400):
        pol.zero_grads()
        pol.log_std_grad -= 5.0
        opt.step(pol.params(), pol.grads())
        pol.clamp_log_std()
        assert LOG_STD_MIN <= pol.log_std[0] <= LOG_STD_MAX
    assert math.exp(pol.log_std[0]) >= 1e-3


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    pol = GaussianPolicy(1, rng, hidden=(8, 8))
    val = ValueNet(1, rng, hidden=(8, 8))
    meta = {"auction_id": "fpa_uniform", "seed": 3, "iteration": 17}
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, {"policy_0": pol, "value_0": val}, meta)

    pol2 = GaussianPolicy(1, np.random.default_rng(99), hidden=(8, 8))
    val2 = ValueNet(1, np.random.default_rng(98), hidden=(8, 8))
    loaded = load_checkpoint(path, {"policy_0": pol2, "value_0": val2})
    assert loaded == meta
    for a, b in zip(pol.params(), pol2.params()):
        np.testing.assert_array_equal(a, b)
    states = rng.random((4, 1))
    np.testing.assert_array_equal(val.values(states), val2.values(states))


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    rng = np.random.default_rng(12)
    pol = GaussianPolicy(1, rng, hidden=(8, 8))
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, {"policy_0": pol}, {})
    other = GaussianPolicy(1, rng, hidden=(4, 4))
    with pytest.raises(ValueError):
        load_checkpoint(path, {"policy_0": other})
