"""Synthetic source/target domain pairs with controllable feature and label shift.

Source samples come from a two-component Gaussian mixture whose components
are separated along the first feature axis.  The target domain is drawn the
same way and then rotated in the (f0, f1) plane, optionally with a different
class prior and a fraction of its labels flipped.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DegenerateLabels, InvalidSpec, TooFewSamples, DataError

SOURCE = "source"
TARGET = "target"


@dataclass
class DomainDataset:
    features: np.ndarray
    labels: Optional[np.ndarray]
    continuous_outcome: Optional[np.ndarray]
    domain_tag: str
    sample_ids: np.ndarray
    # ground truth for an unlabeled domain; only read by evaluation code
    hidden_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        n = self.features.shape[0]
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.sample_ids.shape != (n,):
            raise DataError("sample_ids length must equal the number of rows")
        if len(np.unique(self.sample_ids)) != n:
            raise DataError("sample_ids must be unique")
        for name in ("labels", "hidden_labels"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.int64)
                if v.shape != (n,) or not np.isin(v, (0, 1)).all():
                    raise DataError(f"{name} must be a {{0,1}} vector of length {n}")
                setattr(self, name, v)
        if self.continuous_outcome is not None:
            self.continuous_outcome = np.asarray(self.continuous_outcome, dtype=np.float64)
        if self.domain_tag not in (SOURCE, TARGET):
            raise DataError(f"unknown domain tag {self.domain_tag!r}")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def eval_labels(self) -> Optional[np.ndarray]:
        """Labels usable for scoring: visible labels first, hidden ones otherwise."""
        return self.labels if self.labels is not None else self.hidden_labels

    def subset(self, idx) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)

        def take(v):
            return None if v is None else v[idx]

        return DomainDataset(
            features=self.features[idx],
            labels=take(self.labels),
            continuous_outcome=take(self.continuous_outcome),
            domain_tag=self.domain_tag,
            sample_ids=self.sample_ids[idx],
            hidden_labels=take(self.hidden_labels),
        )

    def unlabeled(self) -> "DomainDataset":
        """Copy with labels moved out of sight (kept only for evaluation)."""
        hidden = self.labels if self.labels is not None else self.hidden_labels
        return dataclasses.replace(self, labels=None, hidden_labels=hidden)


@dataclass
class ShiftSpec:
    d: int = 10
    n_source: int = 2000
    n_target: int = 2000
    rotation_angle: float = 0.0
    class_prior_target: float = 0.5
    label_flip_rate: float = 0.0
    noise_sigma: float = 0.5
    seed: int = 0
    # mixture geometry: components at offset -/+ separation along f0; the
    # offset and unequal widths make the mixture asymmetric under reflection,
    # so a rotated copy has a single best alignment with the source
    class_separation: float = 2.5
    class_offset: float = 1.0
    class_scales: tuple = (0.6, 1.4)

    def validate(self) -> None:
        if self.d < 2:
            raise InvalidSpec("d must be at least 2")
        if self.n_source < 2 or self.n_target < 2:
            raise InvalidSpec("need at least 2 samples per domain")
        if not 0.0 <= self.rotation_angle < 2 * math.pi:
            raise InvalidSpec("rotation_angle must lie in [0, 2*pi)")
        if not 0.0 < self.class_prior_target < 1.0:
            raise InvalidSpec("class_prior_target must lie in (0, 1)")
        if not 0.0 <= self.label_flip_rate < 1.0:
            raise InvalidSpec("label_flip_rate must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be non-negative")
        if self.class_separation <= 0 or len(self.class_scales) != 2 or min(self.class_scales) <= 0:
            raise InvalidSpec("invalid mixture geometry")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidSpec("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidSpec(f"unknown ShiftSpec keys: {sorted(unknown)}")
        kw = dict(d)
        if "class_scales" in kw:
            kw["class_scales"] = tuple(kw["class_scales"])
        return cls(**kw)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["class_scales"] = list(self.class_scales)
        return out


@dataclass
class SplitPlan:
    train_indices: np.ndarray
    val_indices: np.ndarray
    test_indices: np.ndarray
    fold_assignments: Optional[np.ndarray] = field(default=None)

    def fold(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(train, validation) indices for fold ``k`` of the non-test pool."""
        pool = np.sort(np.concatenate([self.train_indices, self.val_indices]))
        fa = self.fold_assignments[pool]
        return pool[fa != k], pool[fa == k]


def rotation_matrix(d: int, angle: float) -> np.ndarray:
    """Rotation by ``angle`` in the (f0, f1) plane, identity elsewhere."""
    R = np.eye(d)
    c, s = math.cos(angle), math.sin(angle)
    R[0, 0], R[0, 1], R[1, 0], R[1, 1] = c, -s, s, c
    return R


def _draw_mixture(rng, n, d, prior, spec: ShiftSpec):
    cls = (rng.random(n) < prior).astype(np.int64)
    x = rng.standard_normal((n, d))
    means = np.array([-spec.class_separation, spec.class_separation])
    scales = np.asarray(spec.class_scales, dtype=np.float64)
    x[:, 0] = spec.class_offset + means[cls] + scales[cls] * x[:, 0]
    # signed distance to the x0 = offset boundary, measured before any rotation
    outcome = x[:, 0] - spec.class_offset + spec.noise_sigma * rng.standard_normal(n)
    return x, outcome


def generate_domain_pair(spec: ShiftSpec) -> tuple[DomainDataset, DomainDataset]:
    spec.validate()
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(int(spec.seed)).spawn(2))

    xs, ys_out = _draw_mixture(src_rng, spec.n_source, spec.d, 0.5, spec)
    source = DomainDataset(
        features=xs,
        labels=median_split_labels(ys_out),
        continuous_outcome=ys_out,
        domain_tag=SOURCE,
        sample_ids=np.arange(spec.n_source),
    )

    xt, yt_out = _draw_mixture(tgt_rng, spec.n_target, spec.d, spec.class_prior_target, spec)
    yt = median_split_labels(yt_out)
    n_flip = int(round(spec.label_flip_rate * spec.n_target))
    if n_flip:
        flip = tgt_rng.choice(spec.n_target, size=n_flip, replace=False)
        yt[flip] = 1 - yt[flip]
    if spec.rotation_angle != 0.0:
        xt = xt @ rotation_matrix(spec.d, spec.rotation_angle).T
    target = DomainDataset(
        features=xt,
        labels=None,
        continuous_outcome=yt_out,
        domain_tag=TARGET,
        sample_ids=np.arange(spec.n_source, spec.n_source + spec.n_target),
        hidden_labels=yt,
    )
    return source, target


def median_split_labels(outcome) -> np.ndarray:
    """1 where the outcome is strictly above the median, else 0."""
    outcome = np.asarray(outcome, dtype=np.float64)
    if outcome.ndim != 1 or outcome.size < 2:
        raise DegenerateLabels("median split needs at least 2 outcomes")
    labels = (outcome > np.median(outcome)).astype(np.int64)
    if labels.min() == labels.max():
        raise DegenerateLabels("median split produced a single class")
    return labels


def _largest_remainder(counts: np.ndarray, total: int) -> np.ndarray:
    exact = counts * (total / counts.sum())
    alloc = np.floor(exact).astype(np.int64)
    short = total - alloc.sum()
    order = np.argsort(-(exact - alloc), kind="stable")
    alloc[order[:short]] += 1
    return alloc


def make_split(dataset: DomainDataset, test_fraction: float = 0.2, k_folds: int = 5, seed: int = 0) -> SplitPlan:
    if not 0.0 < test_fraction < 1.0:
        raise TooFewSamples("test_fraction must lie in (0, 1)")
    if k_folds < 2:
        raise TooFewSamples("k_folds must be at least 2")
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n - n_test < k_folds:
        raise TooFewSamples(f"cannot carve {k_folds} folds and a test set out of {n} samples")
    rng = np.random.default_rng(seed)

    labels = dataset.labels
    strata = [np.arange(n)] if labels is None else [np.flatnonzero(labels == c) for c in (0, 1)]
    if any(len(s) == 0 for s in strata):
        raise TooFewSamples("a class stratum is empty")
    strata = [rng.permutation(s) for s in strata]
    test_alloc = _largest_remainder(np.array([len(s) for s in strata]), n_test)
    if any(len(s) - t < 1 for s, t in zip(strata, test_alloc)):
        raise TooFewSamples("a class stratum would be empty outside the test set")

    test = np.concatenate([s[:t] for s, t in zip(strata, test_alloc)])
    rest = np.concatenate([s[t:] for s, t in zip(strata, test_alloc)])
    folds = np.full(n, -1, dtype=np.int64)
    folds[rest] = np.arange(len(rest)) % k_folds
    val = rest[folds[rest] == 0]
    train = rest[folds[rest] != 0]
    return SplitPlan(np.sort(train), np.sort(val), np.sort(test), folds)


# -- CSV persistence ---------------------------------------------------------

def write_csv(dataset: DomainDataset, path, include_hidden: bool = True) -> None:
    labels = dataset.labels
    if labels is None and include_hidden:
        labels = dataset.hidden_labels
    outcome = dataset.continuous_outcome
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "domain", "label", "outcome"] + [f"f{j}" for j in range(dataset.d)])
        for i in range(len(dataset)):
            lab = -1 if labels is None else int(labels[i])
            out = "nan" if outcome is None else repr(float(outcome[i]))
            w.writerow([int(dataset.sample_ids[i]), dataset.domain_tag, lab, out]
                       + [repr(float(v)) for v in dataset.features[i]])


def read_csv(path) -> DomainDataset:
    """Load a dataset CSV.  Target-domain labels are kept hidden."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if header[:4] != ["id", "domain", "label", "outcome"]:
        raise DataError(f"{path}: unexpected header {header[:4]}")
    d = len(header) - 4
    if header[4:] != [f"f{j}" for j in range(d)] or not body:
        raise DataError(f"{path}: malformed feature columns or no rows")
    try:
        ids = np.array([int(r[0]) for r in body])
        tags = {r[1] for r in body}
        lab = np.array([int(r[2]) for r in body])
        out = np.array([float(r[3]) for r in body])
        feats = np.array([[float(v) for v in r[4:]] for r in body])
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(tags) != 1:
        raise DataError(f"{path}: mixed domain tags {sorted(tags)}")
    tag = tags.pop()
    labels = None if (lab < 0).any() else lab
    outcome = None if np.isnan(out).all() else out
    ds = DomainDataset(feats, labels, outcome, tag, ids)
    return ds.unlabeled() if tag == TARGET and labels is not None else ds


def load_spec(path) -> ShiftSpec:
    return ShiftSpec.from_dict(json.loads(Path(path).read_text()))
