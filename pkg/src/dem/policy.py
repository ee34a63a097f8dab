"""Bernoulli action policies for subset selection and pseudo-label mutation.

One action is a whole binary pattern over the K target samples; its
log-probability is the full Bernoulli likelihood of that pattern and its
entropy the sum of per-component entropies.  Policies are tiny
``3 -> 8 -> 1`` tanh/sigmoid networks over per-sample features
``[calibrated confidence, predicted probability, |p_a - p_b|]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, xlogy

from .errors import EmptySampleSet, EmptySelection, NonFiniteReward, ShapeMismatch
from .nn_core import OptimizerState, accuracy, adam_step, predict_proba

P_MIN = 1e-6
SELECTION = "selection"
MUTATION = "mutation"
N_FEATURES = 3


@dataclass
class PolicyModel:
    params: list
    optimizer: OptimizerState

    @classmethod
    def create(cls, rng, hidden: int = 8, init_bias: float = 0.0, learning_rate: float = 1e-2) -> "PolicyModel":
        rng = np.random.default_rng(rng)
        b1 = 1.0 / np.sqrt(N_FEATURES)
        b2 = 1.0 / np.sqrt(hidden)
        params = [
            rng.uniform(-b1, b1, (N_FEATURES, hidden)),
            rng.uniform(-b1, b1, hidden),
            rng.uniform(-b2, b2, (hidden, 1)),
            np.array([init_bias]),
        ]
        return cls(params, OptimizerState.for_params(params, learning_rate))

    def logits(self, features):
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != N_FEATURES:
            raise ShapeMismatch(f"policy features must be [K, {N_FEATURES}]")
        W1, b1, W2, b2 = self.params
        a = np.tanh(f @ W1 + b1)
        return a @ W2[:, 0] + b2[0], a

    def probs(self, features) -> np.ndarray:
        return np.clip(expit(self.logits(features)[0]), P_MIN, 1.0 - P_MIN)

    def copy(self) -> "PolicyModel":
        return PolicyModel([p.copy() for p in self.params], self.optimizer.copy())


@dataclass
class ActionBatch:
    kind: str
    features: np.ndarray            # [K, 3], shared by every action of the batch
    masks: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    entropies: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    beta: float = 0.01

    def add(self, mask, log_prob, entropy, reward=None):
        self.masks.append(np.asarray(mask, dtype=np.int64))
        self.log_probs.append(float(log_prob))
        self.entropies.append(float(entropy))
        if reward is not None:
            self.rewards.append(float(reward))

    def __len__(self):
        return len(self.masks)


def bernoulli_log_prob(mask, p) -> float:
    mask = np.asarray(mask)
    p = np.asarray(p, dtype=np.float64)
    on = mask == 1
    return float(np.sum(np.log(p[on])) + np.sum(np.log1p(-p[~on])))


def action_entropy(probs) -> float:
    """Sum of per-component Bernoulli entropies (nats), with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    return float(-np.sum(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p)))


def _sample(p, rng):
    return (rng.random(len(p)) < p).astype(np.int64)


def sample_selection_action(policy: PolicyModel, sample_features, rng):
    """Draw a selection mask; returns ``(mask, joint_log_prob)``."""
    if len(sample_features) == 0:
        raise EmptySampleSet("no target samples to select from")
    p = policy.probs(sample_features)
    mask = _sample(p, rng)
    return mask, bernoulli_log_prob(mask, p)


def sample_mutation_action(policy: PolicyModel, current_pseudo_labels, sample_features, rng):
    """Flip each pseudo-label with its policy probability.

    Returns ``(mutated_labels, mutation_mask, joint_log_prob)``.
    """
    labels = np.asarray(current_pseudo_labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptySampleSet("no pseudo-labels to mutate")
    p = policy.probs(sample_features)
    mask = _sample(p, rng)
    return np.where(mask == 1, 1 - labels, labels), mask, bernoulli_log_prob(mask, p)


def policy_loss(batch: ActionBatch) -> float:
    """mean_n(-log P(a_n) * R_n - beta * H(a_n)) from the recorded values."""
    if len(batch) == 0:
        raise EmptySampleSet("empty action batch")
    r = np.asarray(batch.rewards, dtype=np.float64)
    if r.shape != (len(batch),) or not np.all(np.isfinite(r)):
        raise NonFiniteReward("every action needs a finite reward")
    lp = np.asarray(batch.log_probs)
    h = np.asarray(batch.entropies)
    return float(np.mean(-lp * r - batch.beta * h))


def policy_loss_and_grad(policy: PolicyModel, batch: ActionBatch, rewards=None):
    """Score-function loss re-evaluated at the policy's current parameters.

    ``rewards`` overrides the batch rewards (e.g. baseline-centred values);
    they are treated as constants.
    """
    r = np.asarray(batch.rewards if rewards is None else rewards, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise NonFiniteReward("non-finite reward")
    masks = np.stack(batch.masks).astype(np.float64)      # [N, K]
    n = len(masks)
    z, a = policy.logits(batch.features)
    p = np.clip(expit(z), P_MIN, 1.0 - P_MIN)
    lp = masks @ np.log(p) + (1.0 - masks) @ np.log1p(-p)
    H = action_entropy(p)
    loss = float(np.mean(-lp * r) - batch.beta * H)
    # d lp_n / dz = m_n - p ;  dH/dz = -z p (1 - p)
    dz = -(r @ (masks - p)) / n + batch.beta * z * p * (1.0 - p)
    W1, b1, W2, b2 = policy.params
    gW2 = (a.T @ dz)[:, None]
    gb2 = np.array([dz.sum()])
    da = np.outer(dz, W2[:, 0]) * (1.0 - a * a)
    f = np.asarray(batch.features, dtype=np.float64)
    return loss, [f.T @ da, da.sum(axis=0), gW2, gb2]


def update_policy(policy: PolicyModel, batch: ActionBatch, center: bool = True) -> PolicyModel:
    """One Adam step on the policy loss, rewards centred on the batch mean."""
    r = np.asarray(batch.rewards, dtype=np.float64)
    if len(r) != len(batch) or len(r) == 0:
        raise NonFiniteReward("every action needs a reward before the update")
    if center:
        r = r - r.mean()
    _, grads = policy_loss_and_grad(policy, batch, r)
    adam_step(policy.params, grads, policy.optimizer)
    return policy


# -- reward --------------------------------------------------------------------

def blend_reward(source_accuracy: float, agreement: float, alpha: float = 0.5) -> float:
    return float(alpha * source_accuracy + (1.0 - alpha) * agreement)


def agreement_score(candidate_column, features, pseudo_labels) -> float:
    """Mean of ``confidence * [prediction == pseudo-label]`` over the samples."""
    p = predict_proba(candidate_column, features)
    pred = (p > 0.5).astype(np.int64)
    conf = np.maximum(p, 1.0 - p)
    return float(np.mean(conf * (pred == np.asarray(pseudo_labels))))


def compute_reward(candidate_column, source_val, selected_target, alpha: float = 0.5,
                   pseudo_labels: Optional[np.ndarray] = None) -> float:
    """Blend of source-validation accuracy and pseudo-label agreement.

    ``selected_target`` carries the pseudo-labels in ``labels`` unless
    ``pseudo_labels`` is given explicitly.
    """
    y = selected_target.labels if pseudo_labels is None else pseudo_labels
    if len(selected_target) == 0 or y is None:
        raise EmptySelection("reward needs a non-empty pseudo-labeled selection")
    acc = accuracy(candidate_column, source_val.features, source_val.labels) if alpha > 0 else 0.0
    agree = agreement_score(candidate_column, selected_target.features, y) if alpha < 1 else 0.0
    return blend_reward(acc, agree, alpha)
