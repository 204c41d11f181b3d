"""Inference, per-class metrics, and the paired multi-trial runner."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff.functional import softmax
from .encoder import Checkpoint, student_logits

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- inference
def nearest_prototype(embeddings: np.ndarray, prototypes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class (distance argmin, ties to the lowest index) and the probability rows."""
    e = np.asarray(embeddings, dtype=np.float64)
    p = np.asarray(prototypes, dtype=np.float64)
    d = ((e[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=1), softmax(-d, axis=1)


def classify(checkpoint: Checkpoint, images: np.ndarray, batch_size: int = 128, rule: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Labels and class-probability rows for ``images`` under the checkpoint's rule.

    ``rule`` overrides the stored rule ("prototype" or "head").
    """
    cfg = checkpoint.encoder_config
    x = np.asarray(images)
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ValueError(
            f"samples of shape {x.shape[1:]} do not match the checkpoint input "
            f"({cfg.in_channels}, {cfg.input_size}, {cfg.input_size})"
        )
    rule = rule or checkpoint.predict_rule
    encoder = checkpoint.build_encoder()
    emb = encoder.embed_numpy(x.astype(encoder.params["stem.conv"].dtype, copy=False), batch_size)
    if rule == "prototype":
        return nearest_prototype(emb, checkpoint.prototypes)
    if rule == "head":
        head = checkpoint.build_head()
        with no_grad():
            logits = student_logits(Tensor(emb), head).data.astype(np.float64)
        return logits.argmax(axis=1), softmax(logits, axis=1)
    raise ValueError(f"unknown prediction rule {rule!r}")


# ------------------------------------------------------------------ metrics
@dataclass
class MetricsReport:
    """Single-trial per-class precision/recall/F1 with macro and weighted means."""

    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray  # rows = truth, columns = prediction
    class_names: list[str] = field(default_factory=list)

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())

    def weighted(self, name: str) -> float:
        w = self.support / max(self.support.sum(), 1)
        return float((getattr(self, name) * w).sum())

    def to_dict(self) -> dict:
        return {
            "per_class": [
                {"class": n, "precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
                for n, p, r, f, s in zip(self.class_names, self.precision, self.recall, self.f1, self.support)
            ],
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1},
            "weighted": {k: self.weighted(k) for k in ("precision", "recall", "f1")},
            "confusion": self.confusion.tolist(),
        }


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_metrics(predictions: Sequence[int], truths: Sequence[int], num_classes: int, class_names: Sequence[str] | None = None) -> MetricsReport:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truths, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError(f"predictions {pred.shape} and truths {true.shape} must be equal-length vectors")
    for name, v in (("prediction", pred), ("truth", true)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} label outside [0, {num_classes})")
    conf = np.bincount(true * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    tp = np.diag(conf).astype(np.float64)
    precision = _ratio(tp, conf.sum(axis=0))
    recall = _ratio(tp, conf.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
    return MetricsReport(precision, recall, f1, conf.sum(axis=1), conf, names)


# ------------------------------------------------------------------- trials
@dataclass
class TrialResult:
    seed: int
    split_checksum: str
    report: MetricsReport | None = None
    head_report: MetricsReport | None = None  # student-head rule, when the head was trained
    best_epoch: int | None = None
    epochs_run: int | None = None
    error: str | None = None


@dataclass
class AggregateReport:
    method: str
    trials: list[TrialResult]

    @property
    def ok(self) -> list[TrialResult]:
        return [t for t in self.trials if t.report is not None]

    @property
    def trial_seeds(self) -> list[int]:
        return [t.seed for t in self.trials]

    def macro(self, name: str, head: bool = False) -> np.ndarray:
        reps = [t.head_report if head else t.report for t in self.ok]
        return np.array([getattr(r, f"macro_{name}") for r in reps if r is not None])

    def summary(self, head: bool = False) -> dict:
        out = {}
        for k in ("precision", "recall", "f1"):
            v = self.macro(k, head)
            out[k] = {"mean": float(v.mean()), "std": float(v.std())} if v.size else None
        return out

    def per_class_mean(self, name: str) -> np.ndarray | None:
        reps = [t.report for t in self.ok]
        return np.mean([getattr(r, name) for r in reps], axis=0) if reps else None

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "trial_seeds": self.trial_seeds,
            "macro": self.summary(),
            "trials": [
                {
                    "seed": t.seed,
                    "split_checksum": t.split_checksum,
                    "best_epoch": t.best_epoch,
                    "epochs_run": t.epochs_run,
                    "error": t.error,
                    "metrics": t.report.to_dict() if t.report else None,
                    "head_metrics": t.head_report.to_dict() if t.head_report else None,
                }
                for t in self.trials
            ],
        }
        if any(t.head_report is not None for t in self.ok):
            d["macro_head_rule"] = self.summary(head=True)
        return d


def _run_one(args) -> TrialResult:
    from .data import scarce_split, split_checksum
    from .trainer import TrainingDivergence, predict, train

    dataset, config, encoder_config, split_spec, policy, seed = args
    tr, va, te = scarce_split(dataset, replace(split_spec, seed=seed))
    checksum = split_checksum(tr, va, te)
    try:
        res = train(tr, va, replace(config, seed=seed), encoder_config, policy)
    except TrainingDivergence as err:
        log.warning("trial seed %d diverged: %s", seed, err)
        return TrialResult(seed, checksum, error=str(err))
    ckpt = res.checkpoint
    pred, _ = classify(ckpt, te.images)
    report = per_class_metrics(pred, te.labels, te.num_classes, te.class_names)
    head_report = None
    if ckpt.predict_rule == "prototype" and "distill" in config.active_losses:
        hp, _ = classify(ckpt, te.images, rule="head")
        head_report = per_class_metrics(hp, te.labels, te.num_classes, te.class_names)
    return TrialResult(seed, checksum, report, head_report, res.best_epoch, len(res.history))


def run_trials(
    dataset,
    methods: Mapping,
    encoder_config,
    split_spec,
    policy,
    n_trials: int = 10,
    base_seed: int = 0,
    jobs: int = 1,
    on_trial: Callable[[str, TrialResult], None] | None = None,
) -> dict[str, AggregateReport]:
    """Train and test every method on the same ``n_trials`` splits.

    Trial ``i`` uses seed ``base_seed + i`` for both its split and its
    training run, so methods are paired per trial index. Diverged trials are
    recorded with their error and do not stop the others.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    seeds = [base_seed + i for i in range(n_trials)]
    jobs_list = [(name, (dataset, cfg, encoder_config, split_spec, policy, s)) for name, cfg in methods.items() for s in seeds]
    results: dict[str, list[TrialResult]] = {name: [] for name in methods}
    if jobs <= 1:
        outs = map(_run_one, (a for _, a in jobs_list))
        for (name, _), r in zip(jobs_list, outs):
            results[name].append(r)
            if on_trial:
                on_trial(name, r)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (name, _), r in zip(jobs_list, pool.map(_run_one, [a for _, a in jobs_list])):
                results[name].append(r)
                if on_trial:
                    on_trial(name, r)
    return {name: AggregateReport(name, rs) for name, rs in results.items()}


def paired_margins(a: AggregateReport, b: AggregateReport, metric: str = "f1") -> np.ndarray:
    """Per-trial macro-metric differences ``a - b`` over trials both completed."""
    rb = {t.seed: t for t in b.ok}
    out = []
    for t in a.ok:
        if t.seed in rb:
            if t.split_checksum != rb[t.seed].split_checksum:
                raise ValueError(f"trial seed {t.seed} is not paired: split checksums differ")
            out.append(getattr(t.report, f"macro_{metric}") - getattr(rb[t.seed].report, f"macro_{metric}"))
    return np.array(out)


# ------------------------------------------------------------------- export
def write_report_json(path, report: MetricsReport | AggregateReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_confusion_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["truth \\ prediction", *report.class_names])
        for name, row in zip(report.class_names, report.confusion):
            w.writerow([name, *map(int, row)])


def write_metrics_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "precision", "recall", "f1", "support"])
        for n, p, r, f1, s in zip(report.class_names, report.precision, report.recall, report.f1, report.support):
            w.writerow([n, f"{p:.6f}", f"{r:.6f}", f"{f1:.6f}", int(s)])
        w.writerow(["macro", f"{report.macro_precision:.6f}", f"{report.macro_recall:.6f}", f"{report.macro_f1:.6f}", int(report.support.sum())])


def write_trials_csv(path, aggregates: Mapping[str, AggregateReport]) -> None:
    """One row per class per trial, then macro rows per trial and mean/std rows per method."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "seed", "split_checksum", "class", "precision", "recall", "f1", "support"])
        for name, agg in aggregates.items():
            for t in agg.trials:
                if t.report is None:
                    w.writerow([name, t.seed, t.split_checksum, "macro", "", "", "", ""])
                    continue
                r = t.report
                for cn, p, rc, f1, s in zip(r.class_names, r.precision, r.recall, r.f1, r.support):
                    w.writerow([name, t.seed, t.split_checksum, cn, f"{p:.6f}", f"{rc:.6f}", f"{f1:.6f}", int(s)])
                w.writerow([name, t.seed, t.split_checksum, "macro", f"{r.macro_precision:.6f}", f"{r.macro_recall:.6f}", f"{r.macro_f1:.6f}", int(r.support.sum())])
            s = agg.summary()
            for stat in ("mean", "std"):
                w.writerow([name, stat, "", "macro", *(f"{s[k][stat]:.6f}" if s[k] else "" for k in ("precision", "recall", "f1")), ""])


def write_class_table_csv(path, aggregates: Mapping[str, AggregateReport]) -> None:
    """Per-class mean precision and recall, one column pair per method, plus an average row."""
    names = next((a.ok[0].report.class_names for a in aggregates.values() if a.ok), [])
    cols = list(aggregates)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", *(f"{m}_{k}" for m in cols for k in ("precision", "recall"))])
        means = {m: (a.per_class_mean("precision"), a.per_class_mean("recall")) for m, a in aggregates.items()}
        for i, cn in enumerate(names):
            row = [cn]
            for m in cols:
                p, r = means[m]
                row += ["", ""] if p is None else [f"{p[i]:.3f}", f"{r[i]:.3f}"]
            w.writerow(row)
        row = ["average"]
        for m in cols:
            s = aggregates[m].summary()
            row += [f"{s['precision']['mean']:.3f}" if s["precision"] else "", f"{s['recall']['mean']:.3f}" if s["recall"] else ""]
        w.writerow(row)


def write_ablation_csv(path, aggregates: Mapping[str, AggregateReport]) -> None:
    """One row per loss combination with mean and std of the macro metrics."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["losses", "trials_ok", "precision_mean", "precision_std", "recall_mean", "recall_std", "f1_mean", "f1_std"])
        for name, agg in aggregates.items():
            s = agg.summary()
            cells = []
            for k in ("precision", "recall", "f1"):
                cells += [f"{s[k]['mean']:.4f}", f"{s[k]['std']:.4f}"] if s[k] else ["", ""]
            w.writerow([name, len(agg.ok), *cells])
