"""Classification metrics, bootstrap intervals, cross-validation, ablation
suites and report files."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, InvalidConfig, IoFailure, SingleClass

METRICS = ("accuracy", "sensitivity", "specificity", "auc")
PERCENT_METRICS = ("accuracy", "sensitivity", "specificity")
SCHEMA_VERSION = 1


@dataclass
class MetricsReport:
    """Point estimates; accuracy, sensitivity and specificity are percentages.

    A metric that is undefined (a class is absent) is ``None`` and listed in
    ``undefined``.
    """
    accuracy: float
    sensitivity: Optional[float]
    specificity: Optional[float]
    auc: Optional[float]
    n: int
    ci: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    undefined: list = field(default_factory=list)

    def get(self, metric: str) -> Optional[float]:
        return getattr(self, metric)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "sensitivity": self.sensitivity,
            "specificity": self.specificity, "auc": self.auc, "n": self.n,
            "ci": {k: list(v) for k, v in sorted(self.ci.items())},
            "metadata": dict(sorted(self.metadata.items())), "undefined": list(self.undefined),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["accuracy"], d["sensitivity"], d["specificity"], d["auc"], d["n"],
                   {k: tuple(v) for k, v in d.get("ci", {}).items()},
                   dict(d.get("metadata", {})), list(d.get("undefined", [])))


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape or len(s) == 0:
        raise DataError("scores and labels must be equal-length non-empty vectors")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0/1")
    return s, y.astype(np.int64)


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC: mean over positive/negative pairs of
    ``[s_pos > s_neg] + 0.5 [s_pos == s_neg]``, via average ranks."""
    s, y = _check(scores, labels)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise SingleClass("AUC needs both classes")
    r = rankdata(s)
    return float((r[y == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def compute_metrics(scores, labels, threshold: float = 0.5, metadata: Optional[dict] = None) -> MetricsReport:
    s, y = _check(scores, labels)
    pred = (s > threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    undefined = []
    sens = 100.0 * tp / (tp + fn) if tp + fn else None
    spec = 100.0 * tn / (tn + fp) if tn + fp else None
    auc = None
    if sens is None:
        undefined.append("sensitivity")
    if spec is None:
        undefined.append("specificity")
    if sens is None or spec is None:
        undefined.append("auc")
    else:
        auc = auc_score(s, y)
    return MetricsReport(100.0 * (tp + tn) / len(y), sens, spec, auc, len(y),
                         metadata=dict(metadata or {}), undefined=undefined)


# -- bootstrap -----------------------------------------------------------------

def _batched_metric(metric: str, S: np.ndarray, Y: np.ndarray, threshold: float) -> np.ndarray:
    """Metric of every row of a [B, n] resample matrix."""
    pred = S > threshold
    pos = Y == 1
    if metric == "accuracy":
        return 100.0 * np.mean(pred == pos, axis=1)
    if metric == "sensitivity":
        return 100.0 * np.sum(pred & pos, axis=1) / np.sum(pos, axis=1)
    if metric == "specificity":
        return 100.0 * np.sum(~pred & ~pos, axis=1) / np.sum(~pos, axis=1)
    if metric == "auc":
        n1 = pos.sum(axis=1)
        n0 = Y.shape[1] - n1
        r = rankdata(S, axis=1)
        return (np.sum(r * pos, axis=1) - n1 * (n1 + 1) / 2.0) / (n1 * n0)
    raise InvalidConfig(f"unknown metric {metric!r}")


def bootstrap_ci(scores, labels, metric: str = "accuracy", resamples: int = 2000, seed: int = 0,
                 threshold: float = 0.5, level: float = 0.95) -> tuple:
    """Percentile interval over class-stratified resamples with replacement.

    Samples are put in a canonical order first, so the interval does not
    depend on the order they were passed in.
    """
    s, y = _check(scores, labels)
    if len(s) < 2:
        raise DataError("bootstrap needs at least 2 samples")
    pos_n, neg_n = int(y.sum()), int(len(y) - y.sum())
    if pos_n == 0 or neg_n == 0:
        raise SingleClass("stratified bootstrap needs both classes")
    order = np.lexsort((s, y))
    s, y = s[order], y[order]
    neg_idx, pos_idx = np.arange(neg_n), np.arange(neg_n, len(y))
    rng = np.random.default_rng(seed)
    idx = np.concatenate([rng.choice(neg_idx, size=(resamples, neg_n)),
                          rng.choice(pos_idx, size=(resamples, pos_n))], axis=1)
    vals = _batched_metric(metric, s[idx], y[idx], threshold)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(vals, [tail, 100.0 - tail])
    return float(lo), float(hi)


def metrics_with_ci(scores, labels, resamples: int = 2000, seed: int = 0, metadata=None) -> MetricsReport:
    report = compute_metrics(scores, labels, metadata=metadata)
    if not report.undefined:
        for m in METRICS:
            lo, hi = bootstrap_ci(scores, labels, m, resamples, seed)
            point = report.get(m)
            # the percentile interval can miss the point estimate for skewed
            # metrics; widen to keep lower <= point <= upper
            report.ci[m] = (min(lo, point), max(hi, point))
    return report


def mean_report(reports: list, metadata: Optional[dict] = None) -> MetricsReport:
    """Metric-wise mean over reports; intervals are the mean of the bounds,
    so ``lower <= point <= upper`` carries over from the inputs."""
    if not reports:
        raise DataError("nothing to aggregate")
    vals, ci, undefined = {}, {}, []
    for m in METRICS:
        pts = [r.get(m) for r in reports if r.get(m) is not None]
        vals[m] = float(np.mean(pts)) if pts else None
        if not pts:
            undefined.append(m)
        bounds = [r.ci[m] for r in reports if m in r.ci]
        if bounds and len(bounds) == len(reports):
            ci[m] = (float(np.mean([b[0] for b in bounds])), float(np.mean([b[1] for b in bounds])))
    return MetricsReport(vals["accuracy"], vals["sensitivity"], vals["specificity"], vals["auc"],
                         int(sum(r.n for r in reports)), ci, dict(metadata or {}), undefined)


# -- cross-validation ----------------------------------------------------------

@dataclass
class CrossValidationResult:
    folds: list          # MetricsReport per fold, in fold-index order
    mean: MetricsReport

    def to_dict(self) -> dict:
        return {"folds": [f.to_dict() for f in self.folds], "mean": self.mean.to_dict()}


def run_cross_validation(dataset, pipeline: Callable, k: int = 5, seed: int = 0,
                         test_fraction: float = 0.2, resamples: int = 2000,
                         fold_order=None) -> CrossValidationResult:
    """Run ``pipeline(train_set, val_set, fold)`` on each of the ``k`` folds of
    the non-test pool; it returns positive-class scores for ``val_set``.

    ``fold_order`` only changes the order the folds are executed in; every
    fold's result depends on its own data and seed alone.
    """
    from .synth_domains import make_split

    plan = make_split(dataset, test_fraction, k, seed)
    order = list(range(k)) if fold_order is None else [int(i) for i in fold_order]
    if sorted(order) != list(range(k)):
        raise InvalidConfig(f"fold_order must be a permutation of 0..{k - 1}")
    reports = {}
    for i in order:
        tr, va = plan.fold(i)
        val_set = dataset.subset(va)
        scores = pipeline(dataset.subset(tr), val_set, i)
        meta = {"fold": i, "seed": seed}
        if resamples > 0:
            reports[i] = metrics_with_ci(scores, val_set.labels, resamples, seed + i, meta)
        else:
            reports[i] = compute_metrics(scores, val_set.labels, metadata=meta)
    folds = [reports[i] for i in range(k)]
    return CrossValidationResult(folds, mean_report(folds, {"k": k, "seed": seed}))


# -- ablation suites -----------------------------------------------------------

SUITES = {
    "framework": {"RL": {"framework": "rl"}, "CRL-no-adaptation": {"adaptation_losses": False}, "DEM": {}},
    "reinit": {"scratch": {"warm_start": False}, "CBP": {}},
    "calibration": {"RF": {"calibration": False}, "CC": {}},
}


def _pooled(per_seed: list, dataset: str, resamples: int, seed: int, meta: dict) -> dict:
    scores = np.concatenate([r[dataset]["scores"] for r in per_seed])
    labels = np.concatenate([r[dataset]["labels"] for r in per_seed])
    return metrics_with_ci(scores, labels, resamples, seed, meta).to_dict()


def run_ablation(suite: str, spec, seeds, config=None, weights=None, runner: Optional[Callable] = None,
                 variants: Optional[dict] = None) -> dict:
    """Run every variant of an ablation suite on the benchmark for each seed.

    ``variants`` maps a variant name to LoopConfig overrides and replaces the
    suite's defaults.  ``runner(source, target, config, weights)`` returns
    the final ``evaluate_top`` dictionary; the default runs the full loop.
    Reports pool the held-out scores of all seeds.
    """
    import dataclasses

    from .evolution import LoopConfig, run_dem
    from .synth_domains import generate_domain_pair

    if suite not in SUITES and variants is None:
        raise InvalidConfig(f"unknown ablation suite {suite!r}; choose from {sorted(SUITES)}")
    variants = SUITES[suite] if variants is None else variants
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise InvalidConfig("at least one seed is required")
    base = config or LoopConfig()
    if runner is None:
        def runner(src, tgt, cfg, w):
            return run_dem(src, tgt, cfg, w).state.phase_reports["evolving"]
    out = {"suite": suite, "seeds": seeds, "variants": {}}
    for name, overrides in variants.items():
        per_seed = []
        for seed in seeds:
            source, target = generate_domain_pair(dataclasses.replace(spec, seed=seed))
            cfg = LoopConfig.from_dict({**base.to_dict(), **overrides, "seed": seed})
            per_seed.append(runner(source, target, cfg, weights))
        meta = {"variant": name, "seeds": ",".join(map(str, seeds))}
        out["variants"][name] = {
            "overrides": dict(overrides),
            "per_seed": [{"seed": s, "target_accuracy": r["target_accuracy"],
                          "source_accuracy": r["source_accuracy"]} for s, r in zip(seeds, per_seed)],
            "mean_target_accuracy": float(np.mean([r["target_accuracy"] for r in per_seed])),
            "mean_source_accuracy": float(np.mean([r["source_accuracy"] for r in per_seed])),
            "target": _pooled(per_seed, "target", base.bootstrap_resamples, seeds[0], {**meta, "dataset": "target"}),
            "source": _pooled(per_seed, "source", base.bootstrap_resamples, seeds[0], {**meta, "dataset": "source"}),
        }
    return out


def ablation_rows(result: dict) -> list:
    return [{"dataset": ds, "phase": "final", "variant": name, "report": v[ds]}
            for name, v in result["variants"].items() for ds in ("target", "source")]


def run_rows(phase_metrics: dict, variant: str = "DEM") -> list:
    """Report rows of one adaptation run: every phase on both held-out sets."""
    phases = [("pretrain", phase_metrics["initial"])] + sorted(phase_metrics["phases"].items())
    return [{"dataset": ds, "phase": phase, "variant": variant, "report": rep[ds]["report"]}
            for phase, rep in phases for ds in ("target", "source")]


# -- report files --------------------------------------------------------------

def format_value(metric: str, value: Optional[float]) -> str:
    if value is None:
        return "NA"
    return f"{value:#.4g}" if metric == "auc" else f"{value:.2f}"


def format_cell(metric: str, point: Optional[float], ci: Optional[tuple]) -> str:
    """Table style ``point (low-high)``."""
    text = format_value(metric, point)
    if point is None or not ci:
        return text
    return f"{text} ({format_value(metric, ci[0])}-{format_value(metric, ci[1])})"


def csv_header() -> list:
    cols = ["dataset", "phase", "variant", "n"]
    for m in METRICS:
        cols += [m, f"{m}_point", f"{m}_ci_low", f"{m}_ci_high"]
    return cols


def csv_row(row: dict) -> list:
    rep = row["report"]
    out = [row["dataset"], row["phase"], row["variant"], rep["n"]]
    for m in METRICS:
        point = rep[m]
        ci = rep["ci"].get(m)
        out += [format_cell(m, point, ci), "" if point is None else repr(float(point)),
                "" if ci is None else repr(float(ci[0])), "" if ci is None else repr(float(ci[1]))]
    return out


def emit_report(results: dict, path, formats=("json", "csv")) -> list:
    """Write ``report.json`` and/or ``report.csv`` into directory ``path``.

    ``results`` must hold a ``rows`` list of ``{dataset, phase, variant,
    report}`` entries; any other keys go to the JSON file unchanged.
    """
    formats = [f.strip().lower() for f in (formats.split(",") if isinstance(formats, str) else formats)]
    bad = set(formats) - {"json", "csv"}
    if bad or not formats:
        raise InvalidConfig(f"unsupported report formats {sorted(bad)}")
    if "rows" not in results:
        raise InvalidConfig("results need a 'rows' entry")
    out = Path(path)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if "json" in formats:
            doc = {**results, "schema_version": SCHEMA_VERSION}
            target = out / "report.json"
            target.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
            written.append(target)
        if "csv" in formats:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(csv_header())
            for row in results["rows"]:
                w.writerow(csv_row(row))
            target = out / "report.csv"
            target.write_text(buf.getvalue())
            written.append(target)
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out}: {exc}") from exc
    return written


def load_report(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read report {path}: {exc}") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported report schema {doc.get('schema_version')!r}")
    return doc
