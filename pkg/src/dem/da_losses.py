"""Joint domain-adaptation losses: adversarial discriminator, CORAL,
two-classifier discrepancy, classification, and their weighted sum.

The scalar functions take probabilities / hidden batches and return a float.
:func:`joint_objective` evaluates the same terms on a column (or a target
column plus a frozen source column) and returns parameter gradients, with
the discriminator gradient reversed on its way into the feature extractor.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import EmptyBatch, InvalidConfig, ShapeMismatch, TooFewSamples
from .nn_core import (
    Batch,
    ModelColumn,
    backward_features,
    bce_with_logits,
    clamp_prob,
    forward_features,
    forward_logit,
    head_backward,
    sigmoid,
    zeros_like_params,
)

SOURCE_PRETRAIN = "source_pretrain"
TARGET_ADAPT = "target_adapt"


@dataclass
class LossWeights:
    w_cls: float = 1.0
    w_disc: float = 1.0
    w_coral: float = 1.0
    w_mcd: float = 1.0
    w_prox: float = 1e-3
    grl_coefficient: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidConfig(f"{f.name} must be non-negative")
        if self.grl_coefficient > 1:
            raise InvalidConfig("grl_coefficient must lie in [0, 1]")

    @property
    def adapts(self) -> bool:
        return self.w_disc > 0 or self.w_coral > 0 or self.w_mcd > 0


def _nonempty(*arrs):
    for a in arrs:
        if len(a) == 0:
            raise EmptyBatch("empty batch")


def discriminator_loss(d_probs_source, d_probs_target) -> float:
    """-mean log D(source) - mean log(1 - D(target))."""
    ps = clamp_prob(np.asarray(d_probs_source, dtype=np.float64))
    pt = clamp_prob(np.asarray(d_probs_target, dtype=np.float64))
    _nonempty(ps, pt)
    return float(-np.mean(np.log(ps)) - np.mean(np.log(1.0 - pt)))


def _cov(h):
    c = h - h.mean(axis=0)
    return c, c.T @ c / (h.shape[0] - 1)


def coral_loss(h_source, h_target) -> float:
    """Squared Frobenius distance between feature covariances over 4 d^2."""
    return coral_with_grad(h_source, h_target)[0]


def coral_with_grad(h_source, h_target):
    hs = np.asarray(h_source, dtype=np.float64)
    ht = np.asarray(h_target, dtype=np.float64)
    if hs.ndim != 2 or ht.ndim != 2 or hs.shape[1] != ht.shape[1]:
        raise ShapeMismatch("CORAL needs two batches of equal width")
    if hs.shape[0] < 2 or ht.shape[0] < 2:
        raise TooFewSamples("CORAL needs at least 2 rows per batch")
    d = hs.shape[1]
    cs, Cs = _cov(hs)
    ct, Ct = _cov(ht)
    D = Cs - Ct
    loss = float(np.sum(D * D) / (4.0 * d * d))
    gs = cs @ D / (d * d * (hs.shape[0] - 1))
    gt = -(ct @ D) / (d * d * (ht.shape[0] - 1))
    return loss, gs, gt


def discrepancy_loss(probs_a, probs_b) -> float:
    pa = np.asarray(probs_a, dtype=np.float64)
    pb = np.asarray(probs_b, dtype=np.float64)
    _nonempty(pa)
    if pa.shape != pb.shape:
        raise ShapeMismatch("discrepancy needs equal-length probability vectors")
    return float(np.mean(np.abs(pa - pb)))


def classification_loss(probs, labels) -> float:
    p = clamp_prob(np.asarray(probs, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    _nonempty(p)
    if p.shape != y.shape:
        raise ShapeMismatch("probabilities and labels differ in length")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def joint_loss(terms: dict, weights: LossWeights, phase: str = SOURCE_PRETRAIN) -> float:
    """Weighted sum of precomputed terms (keys ``cls, disc, coral, mcd`` and,
    in the adaptation phase, ``prox``)."""
    total = (weights.w_cls * terms.get("cls", 0.0) + weights.w_disc * terms.get("disc", 0.0)
             + weights.w_coral * terms.get("coral", 0.0) + weights.w_mcd * terms.get("mcd", 0.0))
    if phase == TARGET_ADAPT:
        total += weights.w_prox * terms.get("prox", 0.0)
    elif phase != SOURCE_PRETRAIN:
        raise InvalidConfig(f"unknown phase {phase!r}")
    return float(total)


# -- column-level objective ------------------------------------------------------

def joint_objective(column: ModelColumn, batch: Batch, weights: LossWeights,
                    phase: str = SOURCE_PRETRAIN, source_column: Optional[ModelColumn] = None,
                    adversarial: bool = True, cache: Optional[dict] = None):
    """Evaluate the joint loss on ``column`` and return ``(loss, grads, terms)``.

    ``source_pretrain``: one column sees both domains.  ``cls`` is the mean
    BCE of both classifiers on the labeled source rows.

    ``target_adapt``: ``column`` is the trainable target column and
    ``source_column`` the frozen source column, which supplies the source
    features for the discriminator and CORAL.  ``cls`` covers the
    pseudo-labeled target rows (source labels are not used in this phase);
    ``prox`` is the squared distance to the source column.

    With ``adversarial=True`` the discriminator's gradient reaching the
    extractor is multiplied by ``-grl_coefficient``; with ``False`` the
    returned gradient is the plain gradient of the returned loss.

    If ``cache`` is a dict it receives the hidden activations of the
    forward pass under ``"hidden"``.
    """
    if phase == TARGET_ADAPT and source_column is None:
        raise InvalidConfig("target_adapt needs the frozen source column")
    w = weights
    grads = zeros_like_params(column)
    terms = {}

    parts, names = [], []
    has_src_cls = (phase == SOURCE_PRETRAIN and batch.x_source is not None
                   and batch.y_source is not None and w.w_cls > 0)
    need_src_feat = batch.x_source is not None and (has_src_cls or (phase == SOURCE_PRETRAIN and w.adapts))
    if need_src_feat:
        parts.append(batch.x_source)
        names.append("source")
    if batch.x_pseudo is not None and len(batch.x_pseudo) and w.w_cls > 0:
        parts.append(batch.x_pseudo)
        names.append("pseudo")
    use_target = batch.x_target is not None and w.adapts
    if use_target:
        parts.append(batch.x_target)
        names.append("target")
    prox_only = not parts and phase == TARGET_ADAPT and w.w_prox > 0
    if not parts and not prox_only:
        raise EmptyBatch("nothing to evaluate in batch")
    if not prox_only:
        acts = _forward_terms(column, batch, w, phase, source_column, adversarial, parts, names,
                              has_src_cls, use_target, grads, terms)
        if cache is not None:
            cache["hidden"] = acts[1:]

    if phase == TARGET_ADAPT and w.w_prox > 0:
        prox = 0.0
        for i, (p, q) in enumerate(zip(column.params, source_column.params)):
            diff = p - q
            prox += float(np.sum(diff * diff))
            grads[i] += 2.0 * w.w_prox * diff
        terms["prox"] = prox

    return joint_loss(terms, w, phase), grads, terms


def _forward_terms(column, batch, w, phase, source_column, adversarial, parts, names,
                   has_src_cls, use_target, grads, terms):
    x_all = np.concatenate(parts) if len(parts) > 1 else parts[0]
    h_all, acts = forward_features(column, x_all, cache=True)
    bounds = np.cumsum([0] + [len(p) for p in parts])
    sl = {n: slice(bounds[i], bounds[i + 1]) for i, n in enumerate(names)}
    dh = np.zeros_like(h_all)
    head_a, head_b, head_d = column.head("cls_a"), column.head("cls_b"), column.head("disc")
    sa, sb, sd = column.head_slot("cls_a"), column.head_slot("cls_b"), column.head_slot("disc")

    def add_head(slot, head, h, dlogit, rows, scale=1.0):
        gW, gb, gh = head_backward(head, h, dlogit)
        grads[slot] += gW
        grads[slot + 1] += gb
        dh[rows] += scale * gh

    # classification
    cls_rows = [n for n in ("source", "pseudo") if n in sl and (n == "pseudo" or has_src_cls)]
    if cls_rows:
        y = np.concatenate([batch.y_source if n == "source" else batch.y_pseudo for n in cls_rows])
        rows = np.concatenate([np.arange(sl[n].start, sl[n].stop) for n in cls_rows])
        h = h_all[rows]
        la, lb = forward_logit(head_a, h), forward_logit(head_b, h)
        loss_a, dla = bce_with_logits(la, y)
        loss_b, dlb = bce_with_logits(lb, y)
        terms["cls"] = 0.5 * (loss_a + loss_b)
        add_head(sa, head_a, h, 0.5 * w.w_cls * dla, rows)
        add_head(sb, head_b, h, 0.5 * w.w_cls * dlb, rows)

    if use_target:
        ht = h_all[sl["target"]]
        if phase == SOURCE_PRETRAIN:
            hs = h_all[sl["source"]]
        else:
            hs = forward_features(source_column, batch.x_source)
        grl = -w.grl_coefficient if adversarial else 1.0

        if w.w_disc > 0:
            ls, lt = forward_logit(head_d, hs), forward_logit(head_d, ht)
            ps, pt = sigmoid(ls), sigmoid(lt)
            terms["disc"] = discriminator_loss(ps, pt)
            dls = -(1.0 - ps) / len(ls) * w.w_disc
            dlt = pt / len(lt) * w.w_disc
            gW, gb, ghs = head_backward(head_d, hs, dls)
            grads[sd] += gW
            grads[sd + 1] += gb
            if phase == SOURCE_PRETRAIN:
                dh[sl["source"]] += grl * ghs
            add_head(sd, head_d, ht, dlt, sl["target"], scale=grl)

        if w.w_coral > 0:
            loss, gs, gt = coral_with_grad(hs, ht)
            terms["coral"] = loss
            dh[sl["target"]] += w.w_coral * gt
            if phase == SOURCE_PRETRAIN:
                dh[sl["source"]] += w.w_coral * gs

        if w.w_mcd > 0:
            la, lb = forward_logit(head_a, ht), forward_logit(head_b, ht)
            pa, pb = sigmoid(la), sigmoid(lb)
            terms["mcd"] = discrepancy_loss(pa, pb)
            sgn = np.sign(pa - pb) / len(pa) * w.w_mcd
            add_head(sa, head_a, ht, sgn * pa * (1.0 - pa), sl["target"])
            add_head(sb, head_b, ht, -sgn * pb * (1.0 - pb), sl["target"])

    ext_grads = backward_features(column, acts, dh)
    for i, g in enumerate(ext_grads):
        grads[i] += g
    return acts


def single_term_objective(term: str, phase: str = SOURCE_PRETRAIN, source_column=None):
    """Column objective for one loss term alone (plain gradients, no reversal)."""
    keys = {"cls": "w_cls", "disc": "w_disc", "coral": "w_coral", "mcd": "w_mcd", "prox": "w_prox"}
    kw = {k: 0.0 for k in keys.values()}
    kw[keys[term]] = 1.0
    weights = LossWeights(**kw)

    def objective(column, batch):
        loss, grads, _ = joint_objective(column, batch, weights, phase, source_column, adversarial=False)
        return loss, grads

    return objective
