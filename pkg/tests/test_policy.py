import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dem.errors import EmptySampleSet, EmptySelection, NonFiniteReward, ShapeMismatch
from dem.nn_core import init_column, zero_column
from dem.policy import (
    MUTATION,
    P_MIN,
    SELECTION,
    ActionBatch,
    PolicyModel,
    action_entropy,
    agreement_score,
    bernoulli_log_prob,
    blend_reward,
    compute_reward,
    policy_loss,
    policy_loss_and_grad,
    sample_mutation_action,
    sample_selection_action,
    update_policy,
)
from dem.synth_domains import DomainDataset


def constant_policy(p, hidden=8):
    """A policy emitting probability ``p`` for every sample."""
    pol = PolicyModel.create(0, hidden=hidden)
    pol.params[2][...] = 0.0
    pol.params[3][...] = math.log(p / (1 - p)) if 0 < p < 1 else (60.0 if p >= 1 else -60.0)
    return pol


def feats(k, seed=0):
    return np.random.default_rng(seed).random((k, 3))


# -- log-probabilities ------------------------------------------------------------

def test_certain_pattern_has_zero_log_prob():
    assert bernoulli_log_prob([1, 0, 1], [1.0, 0.0, 1.0]) == 0.0


def test_half_probabilities():
    for mask in ([0, 0], [0, 1], [1, 1]):
        assert abs(bernoulli_log_prob(mask, [0.5, 0.5]) - 2 * math.log(0.5)) < 1e-12
    _, _, lp = sample_mutation_action(constant_policy(0.5), [0, 1, 0], feats(3), np.random.default_rng(0))
    assert abs(lp - 3 * math.log(0.5)) < 1e-12
    assert abs(3 * math.log(0.5) + 2.0794) < 1e-4


def test_selection_sampling_deterministic():
    pol = PolicyModel.create(3)
    a = sample_selection_action(pol, feats(20), np.random.default_rng(9))
    b = sample_selection_action(pol, feats(20), np.random.default_rng(9))
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_selection_log_prob_matches_emitted_probabilities():
    pol = PolicyModel.create(4)
    f = feats(15, 2)
    mask, lp = sample_selection_action(pol, f, np.random.default_rng(1))
    p = pol.probs(f)
    assert abs(lp - np.sum(mask * np.log(p) + (1 - mask) * np.log(1 - p))) < 1e-12


def test_mutation_examples():
    labels = np.array([0, 1, 0])
    out, mask, lp = sample_mutation_action(constant_policy(0.0), labels, feats(3), np.random.default_rng(0))
    assert np.array_equal(out, labels) and not mask.any() and abs(lp) < 1e-5
    out, mask, _ = sample_mutation_action(constant_policy(1.0), labels, feats(3), np.random.default_rng(0))
    assert out.tolist() == [1, 0, 1] and mask.all()


def test_empty_inputs():
    with pytest.raises(EmptySampleSet):
        sample_selection_action(PolicyModel.create(0), np.zeros((0, 3)), np.random.default_rng(0))
    with pytest.raises(EmptySampleSet):
        sample_mutation_action(PolicyModel.create(0), [], np.zeros((0, 3)), np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        PolicyModel.create(0).probs(np.zeros((4, 2)))


@pytest.mark.parametrize("k", range(1, 11))
def test_enumeration_oracle(k):
    p = np.random.default_rng(k).uniform(0.02, 0.98, k)
    total = 0.0
    for bits in itertools.product((0, 1), repeat=k):
        lp = bernoulli_log_prob(bits, p)
        direct = 1.0
        for b, q in zip(bits, p):
            direct *= q if b else 1 - q
        assert abs(math.exp(lp) - direct) < 1e-12
        total += math.exp(lp)
    assert abs(total - 1.0) < 1e-12


def test_sampled_frequencies_match_pattern_probabilities():
    k = 3
    pol = PolicyModel.create(11)
    f = feats(k, 5)
    p = pol.probs(f)
    rng = np.random.default_rng(0)
    n = 100_000
    counts = {}
    for _ in range(n):
        mask, _ = sample_selection_action(pol, f, rng)
        key = tuple(mask.tolist())
        counts[key] = counts.get(key, 0) + 1
    for bits in itertools.product((0, 1), repeat=k):
        q = math.exp(bernoulli_log_prob(bits, p))
        sd = math.sqrt(n * q * (1 - q))
        assert abs(counts.get(bits, 0) - n * q) <= 3 * sd + 1


def test_probabilities_clamped():
    pol = constant_policy(1.0)
    assert pol.probs(feats(4)).max() == 1 - P_MIN
    assert constant_policy(0.0).probs(feats(4)).min() == P_MIN


# -- entropy -------------------------------------------------------------------------

def test_entropy_examples():
    assert abs(action_entropy([0.5]) - math.log(2)) < 1e-12
    assert action_entropy([0.0, 1.0, 0.0]) == 0.0
    assert abs(action_entropy([0.5, 0.5]) - 1.3863) < 1e-4


@settings(max_examples=60)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(0, 1)),
       arrays(np.float64, st.integers(1, 10), elements=st.floats(0, 1)))
def test_entropy_additive_and_maximal_at_half(a, b):
    assert abs(action_entropy(np.r_[a, b]) - action_entropy(a) - action_entropy(b)) < 1e-12
    assert action_entropy(a) <= len(a) * math.log(2) + 1e-12


# -- policy loss ----------------------------------------------------------------------

def test_policy_loss_examples():
    b = ActionBatch(SELECTION, feats(2), beta=0.0)
    b.add([1, 0], -1.0, 0.0, 1.0)
    assert policy_loss(b) == 1.0
    b = ActionBatch(SELECTION, feats(2), beta=0.0)
    for lp in (-1.0, -2.5):
        b.add([1, 0], lp, 0.3, 0.0)
    assert policy_loss(b) == 0.0
    b = ActionBatch(SELECTION, feats(2), beta=0.1)
    b.add([1, 0], -1.0, 0.6931, 1.0)
    assert abs(policy_loss(b) - 0.93069) < 1e-12


def test_policy_loss_rejects_bad_rewards():
    b = ActionBatch(SELECTION, feats(2))
    b.add([1, 0], -1.0, 0.5, float("nan"))
    with pytest.raises(NonFiniteReward):
        policy_loss(b)
    b = ActionBatch(SELECTION, feats(2))
    b.add([1, 0], -1.0, 0.5)
    with pytest.raises(NonFiniteReward):
        policy_loss(b)
    with pytest.raises(EmptySampleSet):
        policy_loss(ActionBatch(SELECTION, feats(2)))


def _random_batch(pol, k=6, n=5, seed=0, beta=0.05):
    f = feats(k, seed)
    rng = np.random.default_rng(seed)
    b = ActionBatch(MUTATION, f, beta=beta)
    for _ in range(n):
        mask, lp = sample_selection_action(pol, f, rng)
        b.add(mask, lp, action_entropy(pol.probs(f)), rng.random())
    return b


def test_policy_loss_and_grad_agrees_with_recorded_loss():
    pol = PolicyModel.create(2)
    b = _random_batch(pol)
    loss, _ = policy_loss_and_grad(pol, b)
    assert abs(loss - policy_loss(b)) < 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_policy_gradient_finite_differences(seed):
    pol = PolicyModel.create(seed)
    b = _random_batch(pol, seed=seed)
    _, grads = policy_loss_and_grad(pol, b)
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in pol.params])
    for _ in range(20):
        i = int(rng.choice(4, p=sizes / sizes.sum()))
        j = int(rng.integers(pol.params[i].size))
        flat = pol.params[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + 1e-6
        up = policy_loss_and_grad(pol, b)[0]
        flat[j] = orig - 1e-6
        down = policy_loss_and_grad(pol, b)[0]
        flat[j] = orig
        num = (up - down) / 2e-6
        ana = grads[i].reshape(-1)[j]
        assert abs(ana - num) / max(abs(ana), abs(num), 1e-6) < 1e-4


def test_equal_rewards_leave_policy_unchanged_without_entropy():
    pol = PolicyModel.create(1)
    b = _random_batch(pol, beta=0.0)
    b.rewards = [0.4] * len(b)
    before = [p.copy() for p in pol.params]
    update_policy(pol, b)
    assert all(np.array_equal(a, c) for a, c in zip(before, pol.params))


def test_rewarded_sample_probability_rises():
    pol = PolicyModel.create(7)
    f = feats(4, 3)
    rng = np.random.default_rng(0)
    trace = [pol.probs(f)[2]]
    for _ in range(50):
        b = ActionBatch(SELECTION, f, beta=0.0)
        for _ in range(8):
            mask, lp = sample_selection_action(pol, f, rng)
            b.add(mask, lp, 0.0, float(mask[2]))
        if len(set(b.rewards)) == 1:
            # an all-equal batch carries no signal after centring
            mask = mask.copy()
            mask[2] = 1 - mask[2]
            b.add(mask, bernoulli_log_prob(mask, pol.probs(f)), 0.0, float(mask[2]))
        update_policy(pol, b)
        trace.append(pol.probs(f)[2])
    assert all(b > a for a, b in zip(trace, trace[1:]))


def test_update_trajectory_deterministic():
    out = []
    for _ in range(2):
        pol = PolicyModel.create(5)
        for s in range(5):
            update_policy(pol, _random_batch(pol, seed=s))
        out.append(np.concatenate([p.ravel() for p in pol.params]).tobytes())
    assert out[0] == out[1]


# -- reward -----------------------------------------------------------------------------

def confident_column(label, d=3):
    col = zero_column((d, 4, 2))
    for name in ("cls_a", "cls_b"):
        col.head(name)[1][...] = 60.0 if label == 1 else -60.0
    return col


def ds(x, y, tag="source"):
    return DomainDataset(x, y, None, tag, np.arange(len(x)))


def test_reward_ceiling_and_projection():
    col = confident_column(1)
    x = np.ones((4, 3))
    src = ds(x, np.ones(4, dtype=int))
    assert compute_reward(col, src, ds(x, np.ones(4, dtype=int), "target")) == 1.0
    half = ds(x, np.array([1, 1, 0, 0]))
    assert compute_reward(col, half, ds(x, np.array([0, 0, 0, 1]), "target"), alpha=1.0) == 0.5


def test_reward_blend_example():
    assert abs(blend_reward(0.8, 0.6, 0.5) - 0.7) < 1e-12


def test_reward_empty_selection():
    col = confident_column(1)
    with pytest.raises(EmptySelection):
        compute_reward(col, ds(np.ones((2, 3)), np.array([0, 1])), ds(np.ones((0, 3)), np.zeros(0, dtype=int), "target"))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 1))
def test_reward_in_unit_interval(seed, alpha):
    rng = np.random.default_rng(seed)
    col = init_column((3, 5, 4), seed)
    src = ds(rng.standard_normal((10, 3)), rng.integers(0, 2, 10))
    tgt = ds(rng.standard_normal((7, 3)), rng.integers(0, 2, 7), "target")
    r = compute_reward(col, src, tgt, alpha)
    assert 0.0 <= r <= 1.0
    assert 0.0 <= agreement_score(col, tgt.features, tgt.labels) <= 1.0
