"""Per-sample confidence calibration with protecting and forgetting terms.

For every sample j of the current subset (position ``I[j]`` in the full
target set)::

    C_new[I_j] = C_prev[I_j] + lam * (C_curr[j] - C_prev[I_j])**2
                             - (1 - lam) * (C_prev[I_j] - C_init[I_j])**2
    lam = sigmoid(k * delta_acc)

clamped to [0, 1].  Samples outside the subset keep their previous value.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import IndexOutOfRange


@dataclass
class ConfidenceState:
    init: np.ndarray
    prev: np.ndarray
    curr_subset: Optional[np.ndarray] = None
    index_map: Optional[np.ndarray] = None
    lambda_scale: float = 10.0
    history: list = field(default_factory=list)

    @classmethod
    def from_probs(cls, probs, lambda_scale: float = 10.0) -> "ConfidenceState":
        p = np.asarray(probs, dtype=np.float64)
        c = np.maximum(p, 1.0 - p)
        return cls.from_confidences(c, lambda_scale)

    @classmethod
    def from_confidences(cls, conf, lambda_scale: float = 10.0) -> "ConfidenceState":
        init = np.clip(np.array(conf, dtype=np.float64), 0.0, 1.0)
        init.setflags(write=False)
        return cls(init=init, prev=init.copy(), lambda_scale=lambda_scale)

    def __len__(self):
        return len(self.init)

    def snapshot(self) -> "ConfidenceState":
        return ConfidenceState(self.init, self.prev.copy(),
                               None if self.curr_subset is None else self.curr_subset.copy(),
                               None if self.index_map is None else self.index_map.copy(),
                               self.lambda_scale, list(self.history))


def compute_lambda(delta_acc: float, k: float = 10.0) -> float:
    return float(expit(k * delta_acc))


def calibrated_values(prev, curr, init, lam):
    """The unclamped update for aligned vectors."""
    return prev + lam * (curr - prev) ** 2 - (1.0 - lam) * (prev - init) ** 2


def update_confidences(state: ConfidenceState, curr_subset_confidences, delta_acc: float,
                       index_map=None, lam: Optional[float] = None) -> ConfidenceState:
    """Return the next state; ``lam`` overrides the value derived from ``delta_acc``."""
    idx = np.asarray(state.index_map if index_map is None else index_map, dtype=np.int64)
    curr = np.asarray(curr_subset_confidences, dtype=np.float64)
    if idx.shape != curr.shape:
        raise IndexOutOfRange("subset confidences and index map differ in length")
    if idx.size and (idx.min() < 0 or idx.max() >= len(state.init)):
        raise IndexOutOfRange("index map points outside the target set")
    if len(np.unique(idx)) != len(idx):
        raise IndexOutOfRange("index map entries must be unique")
    if lam is None:
        lam = compute_lambda(delta_acc, state.lambda_scale)
    new_prev = state.prev.copy()
    new_prev[idx] = np.clip(calibrated_values(state.prev[idx], curr, state.init[idx], lam), 0.0, 1.0)
    return ConfidenceState(state.init, new_prev, curr.copy(), idx.copy(), state.lambda_scale,
                           state.history + [float(lam)])


def screening_probabilities(state: ConfidenceState) -> np.ndarray:
    """Current calibrated confidences, used as a policy input feature."""
    return state.prev.copy()
