"""Confusion-matrix accounting, derived performance measures, box-plot
statistics, and the k-fold cross-validation harness.

Rates with a zero denominator are defined as 0 (never NaN), and F1 is 0 when
precision + recall is 0, so macro averages stay total even when a class is
absent from the scored sample.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .dataio import VectorDataset
from .errors import EmptyList, EmptyMatrix, InvalidK, LabelOutOfRange, LengthMismatch
from .layers import HeadConfig
from .treeclf import TrainConfig, TreeTopology, predict_batch, train_tree


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """counts[t][p] = samples of true class t predicted as p."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise LabelOutOfRange(f"confusion matrix must be square, got {arr.shape}")
        if (arr < 0).any():
            raise LabelOutOfRange("confusion matrix counts must be non-negative")
        object.__setattr__(self, "counts", arr)

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def tally(true_labels: Sequence[int], predicted_labels: Sequence[int],
          n: int) -> ConfusionMatrix:
    """Count (true, predicted) pairs into an n x n matrix."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise LengthMismatch(f"label sequences disagree: {t.shape} vs {p.shape}")
    if t.size and (t.min() < 0 or t.max() >= n or p.min() < 0 or p.max() >= n):
        raise LabelOutOfRange(f"labels must lie in [0, {n})")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


# ---------------------------------------------------------------------------
# derived measures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    tpr: np.ndarray
    tnr: np.ndarray
    bacc: np.ndarray
    macro_f1: float
    ccr_percent: float
    n: int


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def report(cm: ConfusionMatrix) -> MetricsReport:
    """All per-class and aggregate measures from one confusion matrix."""
    if cm.total == 0:
        raise EmptyMatrix("cannot score an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fn = counts.sum(axis=1) - tp
    fp = counts.sum(axis=0) - tp
    tn = counts.sum() - tp - fn - fp

    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    tnr = _safe_div(tn, tn + fp)
    bacc = (recall + tnr) / 2.0
    ccr = float(tp.sum() / counts.sum() * 100.0)
    return MetricsReport(precision, recall, f1, recall.copy(), tnr, bacc,
                         float(f1.mean()), ccr, cm.n)


# ---------------------------------------------------------------------------
# box-plot statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxStats:
    minimum: float
    p25: float
    median: float
    p75: float
    maximum: float


def box_stats(values: Sequence[float]) -> BoxStats:
    """Five-number summary; quartiles interpolate linearly at p*(n-1)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise EmptyList("box_stats needs at least one value")
    lo, q1, med, q3, hi = np.percentile(arr, [0, 25, 50, 75, 100], method="linear")
    return BoxStats(float(lo), float(q1), float(med), float(q3), float(hi))


# ---------------------------------------------------------------------------
# k-fold cross-validation
# ---------------------------------------------------------------------------

def kfold_split(count: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle, then k disjoint folds with sizes differing by <= 1.

    Indices address whole samples; for stereo data one sample is one pair,
    so a pair can never straddle folds.
    """
    if k < 2:
        raise InvalidK(f"k must be >= 2, got {k}")
    if count < k:
        raise InvalidK(f"cannot split {count} samples into {k} folds")
    order = np.random.default_rng(seed).permutation(count)
    return [fold.copy() for fold in np.array_split(order, k)]


# A trainer maps (training dataset, fold seed) to a predictor that returns
# integer labels for a feature matrix.
Trainer = Callable[[VectorDataset, int], Callable[[np.ndarray], np.ndarray]]


@dataclass
class CrossValidationResult:
    fold_reports: list[MetricsReport]
    aggregate: MetricsReport
    fold_sizes: list[int]
    true_labels: np.ndarray
    predicted_labels: np.ndarray


def tree_trainer(topology: TreeTopology, cfg: TrainConfig,
                 head_cfg: HeadConfig, jobs: int = 1) -> Trainer:
    """Standard trainer: fit the classifier tree on each training split."""

    def train(ds: VectorDataset, fold_seed: int) -> Callable[[np.ndarray], np.ndarray]:
        fold_cfg = TrainConfig(cfg.lr, cfg.momentum, cfg.batch_size,
                               cfg.epochs, fold_seed)
        tree = train_tree(topology, ds, fold_cfg, head_cfg, jobs=jobs)
        index_of = {name: i for i, name in enumerate(ds.label_names)}

        def predict_indices(features: np.ndarray) -> np.ndarray:
            return np.asarray([index_of[leaf] for leaf in predict_batch(tree, features)],
                              dtype=np.int64)

        return predict_indices

    return train


def cross_validate(
    ds: VectorDataset,
    k: int,
    seed: int,
    trainer: Trainer,
    jobs: int = 1,
) -> CrossValidationResult:
    """Train on k-1 folds, score the held-out fold, aggregate out-of-fold.

    Per-fold trainings derive their seed from (seed, fold index), so the
    result does not depend on fold execution order.
    """
    n_classes = len(ds.label_names)
    folds = kfold_split(len(ds), k, seed)

    def run(item: tuple[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        fold_index, fold = item
        train_idx = np.concatenate([f for j, f in enumerate(folds) if j != fold_index])
        train_ds = VectorDataset(ds.features[train_idx], ds.labels[train_idx],
                                 ds.label_names)
        fold_seed = int(np.random.SeedSequence(seed, spawn_key=(fold_index,))
                        .generate_state(1)[0])
        predictor = trainer(train_ds, fold_seed)
        return ds.labels[fold], predictor(ds.features[fold])

    items = list(enumerate(folds))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(item) for item in items]

    fold_reports = [report(tally(t, p, n_classes)) for t, p in results]
    all_true = np.concatenate([t for t, _ in results])
    all_pred = np.concatenate([p for _, p in results])
    aggregate = report(tally(all_true, all_pred, n_classes))
    return CrossValidationResult(fold_reports, aggregate,
                                 [len(f) for f in folds], all_true, all_pred)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def write_report_csv(rep: MetricsReport, label_names: Sequence[str], path) -> None:
    """One row per class, then a summary row ``summary,<macro_f1>,<ccr>``."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "precision", "recall", "f1", "tpr", "tnr", "bacc"])
        for i in range(rep.n):
            name = label_names[i] if i < len(label_names) else str(i)
            writer.writerow([
                name,
                f"{rep.precision[i]:.10f}", f"{rep.recall[i]:.10f}",
                f"{rep.f1[i]:.10f}", f"{rep.tpr[i]:.10f}",
                f"{rep.tnr[i]:.10f}", f"{rep.bacc[i]:.10f}",
            ])
        writer.writerow(["summary", f"{rep.macro_f1:.10f}", f"{rep.ccr_percent:.10f}"])


def write_box_csv(stats: dict[str, BoxStats], path) -> None:
    """Rows of (metric, min, p25, median, p75, max) for external plotting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "min", "p25", "median", "p75", "max"])
        for name, s in stats.items():
            writer.writerow([name, f"{s.minimum:.10f}", f"{s.p25:.10f}",
                             f"{s.median:.10f}", f"{s.p75:.10f}", f"{s.maximum:.10f}"])
