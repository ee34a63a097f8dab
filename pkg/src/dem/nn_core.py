"""Small MLP columns with hand-written gradients, Adam, early stopping,
continual-backprop unit reinitialization and a binary checkpoint format.

A column is a ReLU feature extractor ``d -> h1 -> ... -> hk`` feeding three
linear logit heads: two classifiers (``a``, ``b``) and a domain
discriminator.  All parameters live in one flat list in canonical order::

    W1, b1, ..., Wk, bk, Wa, ba, Wb, bb, Wd, bd

with weights stored ``(fan_in, fan_out)`` so that ``h = x @ W + b``.
"""
from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .errors import (
    CorruptCheckpoint,
    DegenerateLabels,
    FrozenColumn,
    NonFiniteGradient,
    NonFiniteLoss,
    ShapeMismatch,
)

HEADS = ("cls_a", "cls_b", "disc")
PROB_EPS = 1e-12


# -- model -------------------------------------------------------------------

@dataclass
class ModelColumn:
    dims: tuple
    params: list
    frozen: bool = False

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def d(self) -> int:
        return self.dims[0]

    @property
    def width(self) -> int:
        return self.dims[-1]

    def extractor(self) -> list:
        return self.params[: 2 * self.n_layers]

    def head(self, name: str) -> tuple:
        i = 2 * self.n_layers + 2 * HEADS.index(name)
        return self.params[i], self.params[i + 1]

    def head_slot(self, name: str) -> int:
        return 2 * self.n_layers + 2 * HEADS.index(name)

    def clone(self, frozen: bool = False) -> "ModelColumn":
        return ModelColumn(tuple(self.dims), [p.copy() for p in self.params], frozen)

    def freeze(self) -> "ModelColumn":
        self.frozen = True
        return self

    def check_mutable(self) -> None:
        if self.frozen:
            raise FrozenColumn("column is frozen")

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()


def param_shapes(dims) -> list:
    shapes = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    for _ in HEADS:
        shapes += [(dims[-1], 1), (1,)]
    return shapes


def init_column(dims=(10, 64, 32), rng=None) -> ModelColumn:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    rng = np.random.default_rng(rng)
    shapes = param_shapes(dims)
    params = []
    for w_shape, b_shape in zip(shapes[::2], shapes[1::2]):
        bound = 1.0 / np.sqrt(w_shape[0])
        params.append(rng.uniform(-bound, bound, size=w_shape))
        params.append(rng.uniform(-bound, bound, size=b_shape))
    return ModelColumn(tuple(int(v) for v in dims), params)


def zero_column(dims) -> ModelColumn:
    return ModelColumn(tuple(dims), [np.zeros(s) for s in param_shapes(dims)])


# -- forward / backward ------------------------------------------------------

def _dense_relu(x, W, b):
    out = x @ W
    out += b
    np.maximum(out, 0.0, out=out)
    return out


def _dense_relu_backward(a_in, a_out, W, g_out, need_input_grad=True):
    """Backprop through ``a_out = relu(a_in @ W + b)``; returns (dW, db, d a_in)."""
    g = g_out * (a_out > 0.0)
    return a_in.T @ g, g.sum(axis=0), (g @ W.T if need_input_grad else None)

def forward_features(column: ModelColumn, x, cache: bool = False):
    """Extractor output ``[n, width]``.  With ``cache=True`` also returns the
    list of layer activations (input first) needed by :func:`backward_features`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != column.d:
        raise ShapeMismatch(f"expected [n, {column.d}] input, got {x.shape}")
    acts = [x]
    h = x
    ext = column.extractor()
    for i in range(0, len(ext), 2):
        h = _dense_relu(h, ext[i], ext[i + 1])
        acts.append(h)
    return (h, acts) if cache else h


def backward_features(column: ModelColumn, acts: list, dh: np.ndarray) -> list:
    """Gradients for the extractor parameters given dLoss/d(output)."""
    ext = column.extractor()
    grads = [None] * len(ext)
    g = dh
    for layer in range(column.n_layers - 1, -1, -1):
        W = ext[2 * layer]
        gW, gb, g = _dense_relu_backward(acts[layer], acts[layer + 1], W, g, layer > 0)
        grads[2 * layer], grads[2 * layer + 1] = gW, gb
    return grads


def forward_logit(head, h) -> np.ndarray:
    W, b = head
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"hidden batch {h.shape} does not match head width {W.shape[0]}")
    return h @ W[:, 0] + b[0]


def head_backward(head, h, dlogit):
    """(dW, db, dh) for a linear logit head."""
    W, _ = head
    return (h.T @ dlogit)[:, None], np.array([dlogit.sum()]), np.outer(dlogit, W[:, 0])


def sigmoid(z):
    return expit(z)


def clamp_prob(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def zeros_like_params(column: ModelColumn) -> list:
    return [np.zeros_like(p) for p in column.params]


# -- supervised objective ----------------------------------------------------

def bce_with_logits(logits, y):
    """Mean BCE on clamped sigmoid probabilities, and its logit gradient."""
    y = np.asarray(y, dtype=np.float64)
    p = sigmoid(logits)
    pc = clamp_prob(p)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    return float(loss), (p - y) / len(y)


@dataclass
class Batch:
    """Mini-batch handed to column objectives.  Unused slots stay ``None``."""
    x: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    x_source: Optional[np.ndarray] = None
    y_source: Optional[np.ndarray] = None
    x_target: Optional[np.ndarray] = None
    x_pseudo: Optional[np.ndarray] = None
    y_pseudo: Optional[np.ndarray] = None


def supervised_objective(column: ModelColumn, batch: Batch):
    """Average BCE of the two classifier heads on ``batch.x, batch.y``."""
    h, acts = forward_features(column, batch.x, cache=True)
    grads = zeros_like_params(column)
    dh = np.zeros_like(h)
    total = 0.0
    for name in ("cls_a", "cls_b"):
        head = column.head(name)
        loss, dl = bce_with_logits(forward_logit(head, h), batch.y)
        total += 0.5 * loss
        gW, gb, gh = head_backward(head, h, 0.5 * dl)
        slot = column.head_slot(name)
        grads[slot], grads[slot + 1] = gW, gb
        dh += gh
    grads[: 2 * column.n_layers] = backward_features(column, acts, dh)
    return total, grads


def gradient_of(loss_fn: Callable, column: ModelColumn, batch) -> list:
    """Run a column objective ``loss_fn(column, batch) -> (loss, grads)`` and
    return its parameter-shaped gradients."""
    loss, grads = loss_fn(column, batch)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss evaluated to {loss}")
    return grads


def predict_proba(column: ModelColumn, x) -> np.ndarray:
    """Mean sigmoid output of the two classifiers."""
    h = forward_features(column, x)
    return 0.5 * (sigmoid(forward_logit(column.head("cls_a"), h))
                  + sigmoid(forward_logit(column.head("cls_b"), h)))


def predict_both(column: ModelColumn, x):
    h = forward_features(column, x)
    return sigmoid(forward_logit(column.head("cls_a"), h)), sigmoid(forward_logit(column.head("cls_b"), h))


def accuracy(column: ModelColumn, x, y) -> float:
    return float(np.mean((predict_proba(column, x) > 0.5).astype(np.int64) == np.asarray(y)))


# -- Adam ---------------------------------------------------------------------

@dataclass
class OptimizerState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, learning_rate: float = 1e-4, **kw) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   learning_rate=learning_rate, **kw)

    def copy(self) -> "OptimizerState":
        return copy.deepcopy(self)


def _adam_update(p, g, m, v, lr, b1, b2, eps, c1, c2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def adam_step(params: list, grads: list, state: OptimizerState) -> tuple:
    """One bias-corrected Adam update, applied in place."""
    if len(grads) != len(params) or any(np.shape(g) != p.shape for p, g in zip(params, grads)):
        raise ShapeMismatch("gradients must match the parameter shapes")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains non-finite entries")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        _adam_update(p, g, m, v, state.learning_rate, b1, b2, state.epsilon, c1, c2)
    return params, state


# -- supervised training -----------------------------------------------------

@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 64
    patience: int = 20
    learning_rate: float = 1e-4
    seed: int = 0


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.val_loss)


def _minibatches(rng, n, batch_size):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start: start + batch_size]


def early_stopping_loop(column, step_epoch, val_loss_fn, max_epochs, patience):
    """Shared epoch loop: keeps the parameters with the lowest validation loss
    and stops after ``patience`` epochs without improvement."""
    history = TrainHistory()
    best = np.inf
    best_params = [p.copy() for p in column.params]
    since = 0
    for epoch in range(max_epochs):
        history.train_loss.append(step_epoch(epoch))
        vl = val_loss_fn()
        history.val_loss.append(vl)
        if vl < best:
            best, since, history.best_epoch = vl, 0, epoch
            best_params = [p.copy() for p in column.params]
        else:
            since += 1
            if since >= patience:
                history.stopped_early = True
                break
    for p, bp in zip(column.params, best_params):
        p[...] = bp
    return history


def train_supervised(column: ModelColumn, dataset, val_set, config: TrainConfig = None):
    """Minimise the classifiers' BCE with Adam and validation early stopping."""
    config = config or TrainConfig()
    column.check_mutable()
    y = dataset.labels
    if y is None or val_set.labels is None:
        raise DegenerateLabels("supervised training needs labeled data")
    if y.min() == y.max():
        raise DegenerateLabels("training labels contain a single class")
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState.for_params(column.params, config.learning_rate)
    x = dataset.features
    val_batch = Batch(x=val_set.features, y=val_set.labels)

    def step_epoch(_):
        losses = []
        for idx in _minibatches(rng, len(y), config.batch_size):
            loss, grads = supervised_objective(column, Batch(x=x[idx], y=y[idx]))
            adam_step(column.params, grads, opt)
            losses.append(loss)
        return float(np.mean(losses))

    def val_loss():
        return supervised_objective(column, val_batch)[0]

    history = early_stopping_loop(column, step_epoch, val_loss, config.max_epochs, config.patience)
    return column, history


# -- continual backprop --------------------------------------------------------

@dataclass
class UtilityState:
    utility: list
    age: list
    accumulated: list
    decay: float = 0.99
    replacement_rate: float = 1e-4
    maturity_threshold: int = 100

    @classmethod
    def for_column(cls, column: ModelColumn, **kw) -> "UtilityState":
        widths = column.dims[1:]
        return cls([np.zeros(w) for w in widths], [np.zeros(w, dtype=np.int64) for w in widths],
                   [0.0 for _ in widths], **kw)

    def copy(self) -> "UtilityState":
        return copy.deepcopy(self)


def _outgoing(column: ModelColumn, layer: int) -> list:
    """Weight matrices fed by hidden layer ``layer`` (rows index its units)."""
    if layer < column.n_layers - 1:
        return [column.params[2 * (layer + 1)]]
    return [column.head(name)[0] for name in HEADS]


def cbp_step(column: ModelColumn, utility: UtilityState, rng, activations=None,
             opt_state: Optional[OptimizerState] = None):
    """Refresh unit utilities and reinitialise the least useful mature units.

    ``activations`` is the list of hidden-layer outputs from the latest
    forward pass (one ``[n, width]`` array per extractor layer); when omitted
    the stored utilities are used as they are.  Returns the list of
    reinitialised unit indices per layer.
    """
    column.check_mutable()
    replaced = [None] * column.n_layers
    # deepest layer first: redrawing a layer's incoming weights must not
    # overwrite the zeroed outgoing rows of units reset in the layer below
    for layer in range(column.n_layers - 1, -1, -1):
        outs = _outgoing(column, layer)
        if activations is not None:
            out_mag = sum(np.abs(W).sum(axis=1) for W in outs)
            inst = np.abs(activations[layer]).mean(axis=0) * out_mag
            utility.utility[layer] = utility.decay * utility.utility[layer] + (1.0 - utility.decay) * inst
        utility.age[layer] += 1
        eligible = np.flatnonzero(utility.age[layer] >= utility.maturity_threshold)
        chosen = np.empty(0, dtype=np.int64)
        if len(eligible) and utility.replacement_rate > 0:
            utility.accumulated[layer] += utility.replacement_rate * len(eligible)
            n_new = int(np.floor(utility.accumulated[layer]))
            if n_new > 0:
                utility.accumulated[layer] -= n_new
                n_new = min(n_new, len(eligible))
                order = np.argsort(utility.utility[layer][eligible], kind="stable")
                chosen = np.sort(eligible[order[:n_new]])
                _reinit_units(column, layer, chosen, rng, opt_state)
                utility.age[layer][chosen] = 0
                utility.utility[layer][chosen] = 0.0
        replaced[layer] = chosen
    return replaced


def _reinit_units(column, layer, units, rng, opt_state):
    W_in, b_in = column.params[2 * layer], column.params[2 * layer + 1]
    bound = 1.0 / np.sqrt(W_in.shape[0])
    W_in[:, units] = rng.uniform(-bound, bound, size=(W_in.shape[0], len(units)))
    b_in[units] = 0.0
    slots = [2 * layer, 2 * layer + 1]
    for W in _outgoing(column, layer):
        W[units, :] = 0.0
    if layer < column.n_layers - 1:
        slots_out = [2 * (layer + 1)]
    else:
        slots_out = [column.head_slot(n) for n in HEADS]
    if opt_state is not None:
        for s in slots:
            opt_state.first_moment[s][..., units] = 0.0
            opt_state.second_moment[s][..., units] = 0.0
        for s in slots_out:
            opt_state.first_moment[s][units, :] = 0.0
            opt_state.second_moment[s][units, :] = 0.0


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"DEMCKPT1"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    dims: tuple
    params: np.ndarray
    optimizer: Optional[OptimizerState] = None
    rng_state: Optional[dict] = None
    utility: Optional[UtilityState] = None

    def column(self, frozen: bool = False) -> ModelColumn:
        out, pos = [], 0
        for shape in param_shapes(self.dims):
            size = int(np.prod(shape))
            out.append(self.params[pos: pos + size].reshape(shape).copy())
            pos += size
        return ModelColumn(tuple(self.dims), out, frozen)


def _f64(arrs) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").ravel().tobytes() for a in arrs)


def _encode_optimizer(opt: Optional[OptimizerState]) -> bytes:
    if opt is None:
        return b""
    head = struct.pack("<Q4d", opt.step_count, opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon)
    return head + _f64(opt.first_moment) + _f64(opt.second_moment)


def _encode_utility(u: Optional[UtilityState]) -> bytes:
    if u is None:
        return b""
    buf = io.BytesIO()
    buf.write(struct.pack("<3dQI", u.decay, u.replacement_rate, 0.0, u.maturity_threshold, len(u.utility)))
    for util, age, acc in zip(u.utility, u.age, u.accumulated):
        buf.write(struct.pack("<Qd", len(util), acc))
        buf.write(_f64([util]))
        buf.write(np.ascontiguousarray(age, dtype="<i8").tobytes())
    return buf.getvalue()


def encode_checkpoint(column: ModelColumn, opt=None, rng_state=None, utility=None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(column.dims)))
    buf.write(struct.pack(f"<{len(column.dims)}I", *column.dims))
    buf.write(struct.pack("<Q", column.n_params()))
    buf.write(_f64(column.params))
    rng_bytes = b"" if rng_state is None else json.dumps(rng_state, sort_keys=True).encode()
    for block in (_encode_optimizer(opt), rng_bytes, _encode_utility(utility)):
        buf.write(struct.pack("<Q", len(block)))
        buf.write(block)
    return buf.getvalue()


def save_checkpoint(path, column: ModelColumn, opt=None, rng_state=None, utility=None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(column, opt, rng_state, utility))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptCheckpoint("checkpoint truncated")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise CorruptCheckpoint("bad magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    (n_dims,) = r.unpack("<I")
    if not 2 <= n_dims <= 64:
        raise CorruptCheckpoint("implausible architecture")
    dims = r.unpack(f"<{n_dims}I")
    (count,) = r.unpack("<Q")
    shapes = param_shapes(dims)
    if count != sum(int(np.prod(s)) for s in shapes):
        raise CorruptCheckpoint("parameter count does not match architecture")
    params = r.f64(count)
    blocks = []
    for _ in range(3):
        (n,) = r.unpack("<Q")
        blocks.append(r.take(n))
    if r.pos != len(data):
        raise CorruptCheckpoint("trailing bytes after checkpoint")
    ckpt = Checkpoint(version, tuple(dims), params)
    ckpt.optimizer = _decode_optimizer(blocks[0], shapes) if blocks[0] else None
    try:
        ckpt.rng_state = json.loads(blocks[1].decode()) if blocks[1] else None
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint("unreadable RNG block") from exc
    ckpt.utility = _decode_utility(blocks[2]) if blocks[2] else None
    return ckpt


def _split(flat, shapes):
    out, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        out.append(flat[pos: pos + size].reshape(s).copy())
        pos += size
    return out


def _decode_optimizer(block: bytes, shapes) -> OptimizerState:
    r = _Reader(block)
    step, lr, b1, b2, eps = r.unpack("<Q4d")
    total = sum(int(np.prod(s)) for s in shapes)
    m, v = r.f64(total), r.f64(total)
    if r.pos != len(block):
        raise CorruptCheckpoint("optimizer block length mismatch")
    return OptimizerState(_split(m, shapes), _split(v, shapes), step, lr, b1, b2, eps)


def _decode_utility(block: bytes) -> UtilityState:
    r = _Reader(block)
    decay, rate, _, maturity, n_layers = r.unpack("<3dQI")
    util, age, acc = [], [], []
    for _ in range(n_layers):
        width, a = r.unpack("<Qd")
        util.append(r.f64(width))
        age.append(np.frombuffer(r.take(8 * width), dtype="<i8").astype(np.int64))
        acc.append(a)
    if r.pos != len(block):
        raise CorruptCheckpoint("utility block length mismatch")
    return UtilityState(util, age, acc, decay, rate, int(maturity))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
