"""The adaptation pipeline: source-led pretraining, a screening phase that
searches for trustworthy target subsets, and an evolving phase that mutates
and recombines pseudo-labels, all ranked through a small beam of candidates.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import logit

from .calibration import ConfidenceState, screening_probabilities, update_confidences
from .da_losses import SOURCE_PRETRAIN, TARGET_ADAPT, LossWeights, joint_objective
from .errors import (
    DegeneratePseudoLabels,
    EmptySelection,
    InvalidConfig,
    NonFiniteReward,
    SingleParent,
)
from .metrics import metrics_with_ci
from .nn_core import (
    Batch,
    ModelColumn,
    OptimizerState,
    UtilityState,
    accuracy,
    adam_step,
    cbp_step,
    early_stopping_loop,
    init_column,
    predict_both,
    predict_proba,
    save_checkpoint,
    supervised_objective,
    TrainConfig,
    train_supervised,
)
from .policy import (
    MUTATION,
    SELECTION,
    ActionBatch,
    PolicyModel,
    action_entropy,
    agreement_score,
    blend_reward,
    sample_mutation_action,
    sample_selection_action,
    update_policy,
)
from .synth_domains import DomainDataset, make_split

FRAMEWORKS = ("dem", "rl")
SCREENING = "screening"
EVOLVING = "evolving"


@dataclass
class LoopConfig:
    beam_width: int = 5
    patience: int = 5
    min_improvement: float = 1e-3
    screening_iterations: int = 30
    evolving_iterations: int = 30
    actions_per_iteration: int = 8
    action_epochs: int = 5
    crossover_children: int = 2
    alpha: float = 0.5
    beta: float = 0.01
    seed: int = 0
    # optimisation
    learning_rate: float = 1e-4
    policy_learning_rate: float = 1e-2
    batch_size: int = 64
    hidden_dims: tuple = (64, 32)
    pretrain_max_epochs: int = 100
    pretrain_patience: int = 20
    # calibration / policies
    lambda_scale: float = 10.0
    mutation_init_rate: float = 0.02
    # data splits
    test_fraction: float = 0.2
    k_folds: int = 5
    # continual backprop
    cbp_decay: float = 0.99
    cbp_replacement_rate: float = 1e-4
    cbp_maturity: int = 100
    # ablation switches
    framework: str = "dem"
    warm_start: bool = True
    calibration: bool = True
    adaptation_losses: bool = True
    rf_threshold: float = 0.8
    bootstrap_resamples: int = 2000

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self) -> None:
        counts = ("beam_width", "patience", "screening_iterations", "evolving_iterations",
                  "actions_per_iteration", "action_epochs", "batch_size", "pretrain_max_epochs",
                  "pretrain_patience", "k_folds", "cbp_maturity", "bootstrap_resamples")
        for name in counts:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise InvalidConfig(f"{name} must be an integer >= 1")
        if self.min_improvement < 0:
            raise InvalidConfig("min_improvement must be >= 0")
        if self.crossover_children < 0:
            raise InvalidConfig("crossover_children must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfig("alpha must lie in [0, 1]")
        if self.beta < 0 or self.learning_rate <= 0 or self.policy_learning_rate <= 0:
            raise InvalidConfig("beta must be >= 0 and learning rates > 0")
        if self.lambda_scale <= 0:
            raise InvalidConfig("lambda_scale must be > 0")
        if not 0.0 < self.mutation_init_rate < 1.0 or not 0.0 <= self.rf_threshold <= 1.0:
            raise InvalidConfig("mutation_init_rate must lie in (0, 1), rf_threshold in [0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise InvalidConfig("test_fraction must lie in (0, 1)")
        if self.framework not in FRAMEWORKS:
            raise InvalidConfig(f"framework must be one of {FRAMEWORKS}")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise InvalidConfig("hidden_dims must be positive widths")

    @classmethod
    def from_dict(cls, d: dict) -> "LoopConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown LoopConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    def pretrain_weights(self, weights: LossWeights) -> LossWeights:
        if self.adaptation_losses:
            return weights
        return dataclasses.replace(weights, w_disc=0.0, w_coral=0.0, w_mcd=0.0)

    def adapt_weights(self, weights: LossWeights) -> LossWeights:
        """Weights for candidate training; the target-only framework has no
        alignment terms and no tie to the source column."""
        if self.framework == "rl":
            return dataclasses.replace(weights, w_disc=0.0, w_coral=0.0, w_mcd=0.0, w_prox=0.0)
        return self.pretrain_weights(weights)

    @property
    def reward_alpha(self) -> float:
        return 0.0 if self.framework == "rl" else self.alpha


# -- beam ----------------------------------------------------------------------

@dataclass
class BeamCandidate:
    pseudo_labels: np.ndarray
    confidence_state: ConfidenceState
    reward: float
    checkpoint_ref: str
    birth_iteration: int
    selection: Optional[np.ndarray] = None   # target indices the candidate trained on
    phase: str = SCREENING


@dataclass
class ReplayBuffer:
    width: int = 5
    beam: list = field(default_factory=list)

    def __len__(self):
        return len(self.beam)

    @property
    def best(self) -> Optional[BeamCandidate]:
        return self.beam[0] if self.beam else None

    @property
    def best_reward(self) -> float:
        return self.beam[0].reward if self.beam else -np.inf

    def refs(self) -> set:
        return {c.checkpoint_ref for c in self.beam}


def check_candidate(candidate: BeamCandidate, n_labels: Optional[int] = None) -> None:
    y = np.asarray(candidate.pseudo_labels)
    if not np.isfinite(candidate.reward) or not 0.0 <= candidate.reward <= 1.0:
        raise NonFiniteReward(f"candidate reward {candidate.reward!r} outside [0, 1]")
    if n_labels is not None and len(y) != n_labels:
        raise InvalidConfig("pseudo-label vectors must keep a constant length")
    if y.min() == y.max():
        raise DegeneratePseudoLabels("pseudo-labels collapsed to a single class")


def buffer_insert(buffer: ReplayBuffer, candidate: BeamCandidate) -> ReplayBuffer:
    """Insert by reward (descending), older entries first among ties, and
    keep at most ``width`` entries.  A candidate identical to a stored one
    (same checkpoint and pseudo-labels) is not stored twice."""
    n = len(buffer.beam[0].pseudo_labels) if buffer.beam else None
    check_candidate(candidate, n)
    for c in buffer.beam:
        if c.checkpoint_ref == candidate.checkpoint_ref and np.array_equal(c.pseudo_labels, candidate.pseudo_labels):
            return buffer
    pos = len(buffer.beam)
    for i, c in enumerate(buffer.beam):
        if candidate.reward > c.reward:
            pos = i
            break
    buffer.beam.insert(pos, candidate)
    del buffer.beam[buffer.width:]
    return buffer


def uniform_crossover(labels_a, labels_b, rng) -> np.ndarray:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    coin = rng.random(len(a)) < 0.5
    return np.where(coin, a, b)


# -- pipeline state --------------------------------------------------------------

@dataclass
class TrainedModel:
    column: ModelColumn
    optimizer: OptimizerState
    utility: UtilityState


@dataclass
class Evaluation:
    reward: float
    checkpoint_ref: str
    model: Optional[TrainedModel] = None
    confidences: Optional[np.ndarray] = None   # candidate confidence on the evaluated subset


@dataclass
class PipelineState:
    config: LoopConfig
    weights: LossWeights
    source_train: DomainDataset
    source_val: DomainDataset
    source_test: DomainDataset
    target_train: DomainDataset
    target_test: DomainDataset
    source_column: ModelColumn
    initial_pseudo_labels: np.ndarray
    confidence: ConfidenceState
    buffer: ReplayBuffer
    selection_policy: PolicyModel
    mutation_policy: PolicyModel
    store: dict = field(default_factory=dict)
    evaluator: Optional[Callable] = None
    iteration: int = 0
    prev_reward: Optional[float] = None
    log: dict = field(default_factory=lambda: {SCREENING: [], EVOLVING: []})
    phase_reports: dict = field(default_factory=dict)

    def rng(self, *key) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.config.seed, *key]))

    def top_model(self) -> TrainedModel:
        if self.buffer.best is None:
            return self.store["pretrained"]
        # evaluators that return no model leave the pretrained column in charge
        return self.store.get(self.buffer.best.checkpoint_ref, self.store["pretrained"])

    def current_labels(self) -> np.ndarray:
        return self.initial_pseudo_labels if self.buffer.best is None else self.buffer.best.pseudo_labels


# -- training --------------------------------------------------------------------

def _epoch_batches(rng, n, batch_size):
    order = rng.permutation(n)
    out = [order[i: i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


class _Cycler:
    """Endless shuffled minibatches over ``n`` indices."""

    def __init__(self, rng, n, batch_size):
        self.rng, self.n, self.bs = rng, n, batch_size
        self.pending = []

    def next(self):
        if not self.pending:
            self.pending = _epoch_batches(self.rng, self.n, self.bs)[::-1]
        return self.pending.pop()


def pretrain_source_led(source_train: DomainDataset, source_val: DomainDataset,
                        target_unlabeled: DomainDataset, config: LoopConfig, weights: LossWeights):
    """Train a source column on the joint objective, freeze it and label the target.

    Returns ``(frozen_column, pseudo_labels, ConfidenceState, history)``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11]))
    dims = (source_train.d, *config.hidden_dims)
    column = init_column(dims, rng)
    opt = OptimizerState.for_params(column.params, config.learning_rate)
    w = config.pretrain_weights(weights)
    xs, ys = source_train.features, source_train.labels
    xt = target_unlabeled.features
    targets = _Cycler(rng, len(xt), config.batch_size)

    def step_epoch(_):
        losses = []
        for idx in _epoch_batches(rng, len(ys), config.batch_size):
            batch = Batch(x_source=xs[idx], y_source=ys[idx],
                          x_target=xt[targets.next()] if w.adapts else None)
            loss, grads, _ = joint_objective(column, batch, w, SOURCE_PRETRAIN)
            adam_step(column.params, grads, opt)
            losses.append(loss)
        return float(np.mean(losses))

    val_batch = Batch(x=source_val.features, y=source_val.labels)
    history = early_stopping_loop(column, step_epoch, lambda: supervised_objective(column, val_batch)[0],
                                  config.pretrain_max_epochs, config.pretrain_patience)
    column.freeze()
    p = predict_proba(column, xt)
    labels = (p > 0.5).astype(np.int64)
    return column, labels, ConfidenceState.from_probs(p, config.lambda_scale), history


def train_action(state: PipelineState, parent: TrainedModel, selection: np.ndarray,
                 labels: np.ndarray, rng) -> TrainedModel:
    """Train one candidate column on the selected pseudo-labeled target rows."""
    cfg = state.config
    w = cfg.adapt_weights(state.weights)
    if cfg.warm_start:
        column = parent.column.clone()
        opt = parent.optimizer.copy()
        utility = parent.utility.copy()
    else:
        column = init_column(parent.column.dims, rng)
        opt = OptimizerState.for_params(column.params, cfg.learning_rate)
        utility = UtilityState.for_column(column)
    rl = cfg.framework == "rl"
    xs, ys = state.source_train.features, state.source_train.labels
    xt = state.target_train.features
    xp, yp = xt[selection], labels[selection]
    targets = _Cycler(rng, len(xt), cfg.batch_size)
    pseudo = _Cycler(rng, len(selection), cfg.batch_size)
    n_steps = len(_epoch_batches(rng, len(ys), cfg.batch_size))
    cache = {}
    for _ in range(cfg.action_epochs):
        src = _epoch_batches(rng, len(ys), cfg.batch_size) if not rl else [None] * n_steps
        for idx in src:
            p_idx = pseudo.next()
            batch = Batch(x_pseudo=xp[p_idx], y_pseudo=yp[p_idx])
            if not rl:
                if w.adapts:
                    batch.x_source, batch.x_target = xs[idx], xt[targets.next()]
            _, grads, _ = joint_objective(column, batch, w, TARGET_ADAPT, state.source_column, cache=cache)
            adam_step(column.params, grads, opt)
            if cfg.warm_start:
                cbp_step(column, utility, rng, cache["hidden"], opt)
    return TrainedModel(column, opt, utility)


def candidate_reward(state: PipelineState, column: ModelColumn, selection, labels) -> float:
    cfg = state.config
    alpha = cfg.reward_alpha
    src_acc = accuracy(column, state.source_val.features, state.source_val.labels) if alpha > 0 else 0.0
    agree = agreement_score(column, state.target_train.features[selection], labels[selection])
    return blend_reward(src_acc, agree, alpha)


def train_and_score(state: PipelineState, parent: TrainedModel, selection, labels, rng) -> Evaluation:
    """Default evaluator: train a candidate, then score it."""
    model = train_action(state, parent, selection, labels, rng)
    reward = candidate_reward(state, model.column, selection, labels)
    p = predict_proba(model.column, state.target_train.features[selection])
    return Evaluation(reward, model.column.digest(), model, np.maximum(p, 1.0 - p))


def _evaluate(state, parent, selection, labels, rng) -> Evaluation:
    fn = state.evaluator or train_and_score
    ev = fn(state, parent, selection, labels, rng)
    if not np.isfinite(ev.reward):
        raise NonFiniteReward("evaluator returned a non-finite reward")
    return ev


def refreshed_labels(state: PipelineState, ev: Evaluation, fallback: np.ndarray) -> np.ndarray:
    """Pseudo-labels a trained candidate predicts over the whole target set.

    Beam entries carry these rather than the labels the candidate was
    trained on, so every accepted candidate also relabels the target set.

    A prediction that collapses to one class keeps the parent's labels.
    """
    if ev.model is None:
        return fallback.copy()
    labels = (predict_proba(ev.model.column, state.target_train.features) > 0.5).astype(np.int64)
    return fallback.copy() if labels.min() == labels.max() else labels


def policy_features(state: PipelineState, model: TrainedModel, idx=None) -> np.ndarray:
    x = state.target_train.features
    conf = screening_probabilities(state.confidence)
    if idx is not None:
        x, conf = x[idx], conf[idx]
    pa, pb = predict_both(model.column, x)
    return np.column_stack([conf, 0.5 * (pa + pb), np.abs(pa - pb)])


# -- phases ----------------------------------------------------------------------

SPLIT_KEYS = ("source_train", "source_val", "source_test", "target_train", "target_test")


def split_domains(source: DomainDataset, target: DomainDataset, config: LoopConfig) -> dict:
    """Row indices of the five working sets.

    The source pool is split into train / validation / test; the target
    training set is every non-test target row (its labels stay hidden) and
    the held-out target test set is only used for evaluation.
    """
    s_plan = make_split(source, config.test_fraction, config.k_folds, config.seed)
    # the target split never looks at target labels, visible or not
    t_plan = make_split(target.unlabeled(), config.test_fraction, config.k_folds, config.seed)
    return {
        "source_train": s_plan.train_indices, "source_val": s_plan.val_indices,
        "source_test": s_plan.test_indices,
        "target_train": np.sort(np.concatenate([t_plan.train_indices, t_plan.val_indices])),
        "target_test": t_plan.test_indices,
    }


def apply_splits(source: DomainDataset, target: DomainDataset, splits: dict) -> dict:
    sets = {k: (source if k.startswith("source") else target).subset(np.asarray(splits[k])) for k in SPLIT_KEYS}
    sets["target_train"] = sets["target_train"].unlabeled()
    return sets


def label_target(column: ModelColumn, target_train: DomainDataset, config: LoopConfig):
    """Initial pseudo-labels (threshold 0.5) and confidences max(p, 1 - p)."""
    p = predict_proba(column, target_train.features)
    labels = (p > 0.5).astype(np.int64)
    if labels.min() == labels.max():
        raise DegeneratePseudoLabels("pretrained model assigns one class to every target sample")
    return labels, ConfidenceState.from_probs(p, config.lambda_scale)


def initialize_state(source: DomainDataset, target: DomainDataset, config: LoopConfig,
                     weights: Optional[LossWeights] = None, evaluator=None,
                     pretrained: Optional[ModelColumn] = None, splits: Optional[dict] = None,
                     pretrain_log: Optional[dict] = None) -> PipelineState:
    """Split both domains, pretrain (unless a frozen column is supplied) and
    build the loop state."""
    weights = weights or LossWeights()
    sets = apply_splits(source, target, splits if splits is not None else split_domains(source, target, config))
    if pretrained is None:
        column, _, _, history = pretrain_source_led(sets["source_train"], sets["source_val"],
                                                    sets["target_train"], config, weights)
        pretrain_log = {"epochs": history.epochs_run, "best_epoch": history.best_epoch}
    else:
        column = pretrained.freeze() if not pretrained.frozen else pretrained
    labels, conf = label_target(column, sets["target_train"], config)
    sel_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5E1]))
    mut_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x307]))
    selection_policy = PolicyModel.create(sel_rng, learning_rate=config.policy_learning_rate)
    mutation_policy = PolicyModel.create(mut_rng, init_bias=float(logit(config.mutation_init_rate)),
                                         learning_rate=config.policy_learning_rate)
    if config.framework == "rl":
        base = init_column(column.dims, np.random.default_rng(np.random.SeedSequence([config.seed, 0x4C])))
    else:
        base = column.clone(frozen=False)
    start = TrainedModel(base, OptimizerState.for_params(base.params, config.learning_rate),
                         UtilityState.for_column(base, decay=config.cbp_decay,
                                                 replacement_rate=config.cbp_replacement_rate,
                                                 maturity_threshold=config.cbp_maturity))
    state = PipelineState(config, weights, sets["source_train"], sets["source_val"], sets["source_test"],
                          sets["target_train"], sets["target_test"], column, labels, conf,
                          ReplayBuffer(config.beam_width), selection_policy, mutation_policy,
                          {"pretrained": start}, evaluator)
    hidden = sets["target_train"].hidden_labels
    state.log["pretrain"] = dict(pretrain_log or {})
    state.log["pretrain"]["pseudo_label_accuracy"] = None if hidden is None else float(np.mean(labels == hidden))
    if evaluator is None:
        state.prev_reward = candidate_reward(state, base, np.arange(len(labels)), labels)
    return state


def _store_model(state: PipelineState, ev: Evaluation) -> None:
    if ev.model is not None:
        state.store[ev.checkpoint_ref] = ev.model


def _prune_store(state: PipelineState) -> None:
    keep = state.buffer.refs() | {"pretrained"}
    for ref in list(state.store):
        if ref not in keep:
            del state.store[ref]


def _calibrate(state: PipelineState, best: Evaluation, selection) -> None:
    if not state.config.calibration or best.confidences is None:
        return
    delta = 0.0 if state.prev_reward is None else best.reward - state.prev_reward
    state.confidence = update_confidences(state.confidence, best.confidences, delta, selection)


def _rf_selection(state: PipelineState) -> np.ndarray:
    return np.flatnonzero(state.confidence.init >= state.config.rf_threshold)


def _run_phase(state: PipelineState, phase: str, max_iterations: int, iteration_fn) -> PipelineState:
    """Run iterations until the budget is spent or the beam's best reward has
    gained no more than ``min_improvement`` for ``patience`` iterations in a row."""
    before = -np.inf if phase == SCREENING or not state.buffer.beam else state.buffer.best_reward
    stale = 0
    for it in range(max_iterations):
        state.iteration += 1
        record = iteration_fn(state, it)
        record["beam_best"] = state.buffer.best_reward
        record["beam_size"] = len(state.buffer)
        # held-out accuracy of the current best candidate; reported, never used for decisions
        record["top_target_accuracy"] = accuracy(state.top_model().column, state.target_test.features,
                                                 state.target_test.eval_labels())
        state.log[phase].append(record)
        if state.buffer.best_reward > before + state.config.min_improvement:
            stale = 0
        else:
            stale += 1
            if stale >= state.config.patience:
                break
        before = state.buffer.best_reward
    state.phase_reports[phase] = evaluate_top(state, phase)
    return state


def screening_phase(state: PipelineState) -> PipelineState:
    """Search for high-confidence target subsets with the selection policy."""
    return _run_phase(state, SCREENING, state.config.screening_iterations, _screening_iteration)


def _screening_iteration(state: PipelineState, it: int) -> dict:
    cfg = state.config
    parent = state.top_model()
    labels = state.current_labels()
    feats = policy_features(state, parent)
    batch = ActionBatch(SELECTION, feats, beta=cfg.beta)
    probs = state.selection_policy.probs(feats)
    evals, selections = [], []
    for a in range(cfg.actions_per_iteration):
        rng = state.rng(1, state.iteration, a)
        if cfg.calibration:
            mask, lp = sample_selection_action(state.selection_policy, feats, rng)
            if not mask.any():
                mask, lp = sample_selection_action(state.selection_policy, feats, rng)
        else:
            mask = np.zeros(len(feats), dtype=np.int64)
            mask[_rf_selection(state)] = 1
            lp = 0.0
        sel = np.flatnonzero(mask)
        if len(sel) == 0 or labels[sel].min() == labels[sel].max():
            continue
        ev = _evaluate(state, parent, sel, labels, rng)
        batch.add(mask, lp, action_entropy(probs), ev.reward)
        evals.append(ev)
        selections.append(sel)
    if not evals:
        if cfg.calibration:
            return {"iteration": state.iteration, "rewards": [], "skipped": True}
        raise EmptySelection("the fixed confidence threshold selects no usable subset")
    if cfg.calibration:
        update_policy(state.selection_policy, batch)
    k = int(np.argmax([e.reward for e in evals]))
    best, sel = evals[k], selections[k]
    _calibrate(state, best, sel)
    state.prev_reward = best.reward
    _store_model(state, best)
    refreshed = refreshed_labels(state, best, labels)
    buffer_insert(state.buffer, BeamCandidate(refreshed, state.confidence.snapshot(), best.reward,
                                              best.checkpoint_ref, state.iteration, sel, SCREENING))
    _prune_store(state)
    return {"iteration": state.iteration, "rewards": [e.reward for e in evals],
            "selected": [int(len(s)) for s in selections], "best_reward": best.reward}


def evolving_phase(state: PipelineState) -> PipelineState:
    """Mutate and recombine the beam's pseudo-labels."""
    if not state.buffer.beam:
        raise EmptySelection("evolving needs a non-empty beam")
    return _run_phase(state, EVOLVING, state.config.evolving_iterations, _evolving_iteration)


def _evolving_iteration(state: PipelineState, it: int) -> dict:
    cfg = state.config
    top = state.buffer.best
    parent = state.store.get(top.checkpoint_ref, state.top_model())
    sel = top.selection if top.selection is not None else np.arange(len(top.pseudo_labels))
    feats = policy_features(state, parent, sel)
    batch = ActionBatch(MUTATION, feats, beta=cfg.beta)
    probs = state.mutation_policy.probs(feats)
    children = []   # (labels, evaluation, is_mutation)
    for a in range(cfg.actions_per_iteration):
        rng = state.rng(2, state.iteration, a)
        if cfg.calibration:
            sub, mask, lp = sample_mutation_action(state.mutation_policy, top.pseudo_labels[sel], feats, rng)
        else:
            mask = (rng.random(len(sel)) < cfg.mutation_init_rate).astype(np.int64)
            sub, lp = np.where(mask == 1, 1 - top.pseudo_labels[sel], top.pseudo_labels[sel]), 0.0
        labels = top.pseudo_labels.copy()
        labels[sel] = sub
        if labels.min() == labels.max() or sub.min() == sub.max():
            continue
        ev = _evaluate(state, parent, sel, labels, rng)
        batch.add(mask, lp, action_entropy(probs), ev.reward)
        children.append((labels, ev))
    crossed = 0
    if cfg.crossover_children and len(state.buffer) >= 2:
        other = state.buffer.beam[1]
        for c in range(cfg.crossover_children):
            rng = state.rng(3, state.iteration, c)
            labels = uniform_crossover(top.pseudo_labels, other.pseudo_labels, rng)
            if labels[sel].min() == labels[sel].max():
                continue
            children.append((labels, _evaluate(state, parent, sel, labels, rng)))
            crossed += 1
    if len(batch) and cfg.calibration:
        update_policy(state.mutation_policy, batch)
    if not children:
        return {"iteration": state.iteration, "rewards": [], "skipped": True}
    k = int(np.argmax([ev.reward for _, ev in children]))
    labels, best = children[k]
    _calibrate(state, best, sel)
    state.prev_reward = best.reward
    _store_model(state, best)
    labels = refreshed_labels(state, best, labels)
    buffer_insert(state.buffer, BeamCandidate(labels, state.confidence.snapshot(), best.reward,
                                              best.checkpoint_ref, state.iteration, sel, EVOLVING))
    _prune_store(state)
    return {"iteration": state.iteration, "rewards": [ev.reward for _, ev in children],
            "crossover_children": crossed, "best_reward": best.reward,
            "mutations": [int(m.sum()) for m in batch.masks]}


def crossover_children(buffer: ReplayBuffer, n_children: int, rng):
    """Uniform crossover between the two best beam entries."""
    if len(buffer) < 2:
        raise SingleParent("crossover needs two beam candidates")
    a, b = buffer.beam[0].pseudo_labels, buffer.beam[1].pseudo_labels
    return [uniform_crossover(a, b, rng) for _ in range(n_children)]


# -- evaluation and outputs ------------------------------------------------------

def test_report(column: ModelColumn, dataset: DomainDataset, config: LoopConfig, phase: str, name: str) -> dict:
    """Metrics with bootstrap intervals on a held-out set, plus the raw scores."""
    y = dataset.eval_labels()
    scores = predict_proba(column, dataset.features)
    meta = {"phase": phase, "seed": config.seed, "dataset": name}
    rep = metrics_with_ci(scores, y, config.bootstrap_resamples, config.seed, meta)
    return {"report": rep.to_dict(), "scores": scores.tolist(), "labels": y.tolist(),
            "accuracy": float(np.mean((scores > 0.5) == y))}


def evaluate_top(state: PipelineState, phase: str) -> dict:
    column = state.top_model().column
    target = test_report(column, state.target_test, state.config, phase, "target")
    source = test_report(column, state.source_test, state.config, phase, "source")
    return {"target": target, "source": source,
            "target_accuracy": target["accuracy"], "source_accuracy": source["accuracy"]}


def source_only_baseline(source: DomainDataset, target: DomainDataset, config: LoopConfig,
                         splits: Optional[dict] = None) -> dict:
    """Plain supervised source training, evaluated on both held-out test sets."""
    sets = apply_splits(source, target, splits if splits is not None else split_domains(source, target, config))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11]))
    column = init_column((source.d, *config.hidden_dims), rng)
    tc = TrainConfig(config.pretrain_max_epochs, config.batch_size, config.pretrain_patience,
                     config.learning_rate, config.seed)
    _, history = train_supervised(column, sets["source_train"], sets["source_val"], tc)
    return {
        "target": test_report(column, sets["target_test"], config, "source_only", "target"),
        "source": test_report(column, sets["source_test"], config, "source_only", "source"),
        "target_accuracy": accuracy(column, sets["target_test"].features, sets["target_test"].eval_labels()),
        "source_accuracy": accuracy(column, sets["source_test"].features, sets["source_test"].labels),
        "epochs": history.epochs_run,
    }


@dataclass
class DEMResult:
    column: ModelColumn
    pseudo_labels: np.ndarray
    confidences: np.ndarray
    metrics: dict
    state: PipelineState


def run_dem(source: DomainDataset, target: DomainDataset, config: LoopConfig,
            weights: Optional[LossWeights] = None, evaluator=None, out_dir=None) -> DEMResult:
    state = initialize_state(source, target, config, weights, evaluator)
    return finish_run(state, out_dir)


def finish_run(state: PipelineState, out_dir=None) -> DEMResult:
    state.phase_reports["pretrain"] = evaluate_top(state, "pretrain")
    screening_phase(state)
    evolving_phase(state)
    model = state.top_model()
    metrics = phase_metrics(state)
    top = state.buffer.best
    result = DEMResult(model.column, top.pseudo_labels.copy(), screening_probabilities(state.confidence),
                       metrics, state)
    if out_dir is not None:
        write_run_outputs(result, out_dir)
    return result


def phase_metrics(state: PipelineState) -> dict:
    src_frozen = accuracy(state.source_column, state.source_test.features, state.source_test.labels)
    final = state.phase_reports[EVOLVING]
    return {
        "seed": state.config.seed,
        "pretrain": state.log["pretrain"],
        "frozen_source_accuracy": src_frozen,
        "initial": state.phase_reports["pretrain"],
        "phases": {p: state.phase_reports[p] for p in (SCREENING, EVOLVING)},
        "iterations": {p: state.log[p] for p in (SCREENING, EVOLVING)},
        "final": {"target_accuracy": final["target_accuracy"], "source_accuracy": final["source_accuracy"]},
    }


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not np.isfinite(o):
        return None
    return o


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_run_outputs(result: DEMResult, out_dir) -> None:
    out = Path(out_dir)
    beam_dir = out / "beam"
    beam_dir.mkdir(parents=True, exist_ok=True)
    state = result.state
    for old in beam_dir.glob("*.ckpt"):
        old.unlink()
    for rank, cand in enumerate(state.buffer.beam):
        model = state.store.get(cand.checkpoint_ref)
        if model is None:
            continue
        save_checkpoint(beam_dir / f"{rank:02d}_{cand.checkpoint_ref[:16]}.ckpt", model.column,
                        model.optimizer, {"seed": state.config.seed, "birth_iteration": cand.birth_iteration},
                        model.utility)
    dump_json(result.metrics, out / "phase_metrics.json")
    conf = result.confidences
    with open(out / "pseudo_labels_final.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "confidence"])
        for sid, lab, c in zip(state.target_train.sample_ids, result.pseudo_labels, conf):
            w.writerow([int(sid), int(lab), repr(float(c))])
