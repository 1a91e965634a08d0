"""Two-stage inference, evaluation, the single-stage ablation, latency, reports."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .classifier import FoodClassifier
from .data import WindowPair
from .detector import EatingDetector
from .errors import ConfigError, EmptyTestSet
from .nn import Checkpoint
from .nn.checkpoint import atomic_write

NON_EATING = -1
NON_EATING_NAME = "Non-eating"
DEFAULT_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass
class Pipeline:
    detector: EatingDetector
    classifier: FoodClassifier

    def __post_init__(self):
        if self.detector.calibration is None:
            raise ConfigError("detector checkpoint lacks field 'calibration'; run `calibrate` first")
        d, c = self.detector.cfg, self.classifier.cfg
        if (d.in_channels, d.seq_len) != (c.in_channels, c.seq_len):
            raise ConfigError(
                f"detector expects {d.in_channels}x{d.seq_len} input, classifier {c.in_channels}x{c.seq_len}"
            )

    @classmethod
    def load(cls, detector_path: str | Path, classifier_path: str | Path) -> "Pipeline":
        return cls(
            EatingDetector.from_checkpoint(Checkpoint.load(detector_path)),
            FoodClassifier.from_checkpoint(Checkpoint.load(classifier_path)),
        )

    @property
    def num_classes(self) -> int:
        return self.classifier.cfg.num_classes

    @property
    def class_names(self) -> list[str]:
        return list(self.classifier.class_names)

    def predict(self, windows: Sequence[WindowPair]) -> tuple[np.ndarray, np.ndarray]:
        """Returns ``(labels, reconstruction errors)``; label -1 is non-eating."""
        errors = self.detector.errors(windows)
        eating = errors <= self.detector.calibration.tau
        labels = np.full(len(windows), NON_EATING, dtype=np.int64)
        if eating.any():
            gated = [w for w, e in zip(windows, eating) if e]
            # argmax picks the lowest class id on exact ties
            labels[eating] = self.classifier.probabilities(gated).argmax(axis=1)
        return labels, errors

    def run(self, w: WindowPair) -> int:
        return int(self.predict([w])[0][0])


def run_two_stage(pipe: Pipeline, w: WindowPair) -> int:
    return pipe.run(w)


def true_label(w: WindowPair) -> int:
    return NON_EATING if w.food_label is None else int(w.food_label)


# --- metrics -------------------------------------------------------------------------------------


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> np.ndarray:
    """Rows are true labels, columns predictions; index ``num_classes`` is non-eating."""
    n = num_classes + 1
    cm = np.zeros((n, n), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[num_classes if t == NON_EATING else t, num_classes if p == NON_EATING else p] += 1
    return cm


@dataclass
class EvalReport:
    overall_accuracy: float
    stage1_accuracy: float
    confusion: np.ndarray
    labels: list[str]
    precision: list[float]
    recall: list[float]
    latency_ms: dict | None = None
    n_windows: int = 0
    notes: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "stage1_accuracy": self.stage1_accuracy,
            "per_class": [
                {"name": n, "precision": p, "recall": r}
                for n, p, r in zip(self.labels, self.precision, self.recall)
            ],
            "latency_ms": self.latency_ms or {"mean": None, "std": None, "p95": None},
            "n_windows": self.n_windows,
            "notes": self.notes,
        }


def report_from_predictions(
    y_true: Sequence[int],
    y_pred: Sequence[int],
    num_classes: int,
    class_names: Sequence[str],
) -> EvalReport:
    if len(y_true) == 0:
        raise EmptyTestSet("no windows to evaluate")
    cm = confusion_matrix(y_true, y_pred, num_classes)
    diag = np.diag(cm).astype(np.float64)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    recall = np.divide(diag, rows, out=np.zeros_like(diag), where=rows > 0)
    precision = np.divide(diag, cols, out=np.zeros_like(diag), where=cols > 0)
    yt, yp = np.asarray(y_true), np.asarray(y_pred)
    stage1 = float(np.mean((yt == NON_EATING) == (yp == NON_EATING)))
    return EvalReport(
        overall_accuracy=float(diag.sum() / cm.sum()),
        stage1_accuracy=stage1,
        confusion=cm,
        labels=list(class_names[:num_classes]) + [NON_EATING_NAME],
        precision=[float(x) for x in precision],
        recall=[float(x) for x in recall],
        n_windows=int(cm.sum()),
    )


def evaluate(pipe: Pipeline, windows: Sequence[WindowPair]) -> EvalReport:
    if not windows:
        raise EmptyTestSet("no windows to evaluate")
    pred, _ = pipe.predict(windows)
    report = report_from_predictions([true_label(w) for w in windows], pred, pipe.num_classes, pipe.class_names)
    report.notes = {
        "label_space": f"{pipe.num_classes} foods + non-eating",
        "threshold_tau": pipe.detector.calibration.tau,
        "threshold_percentile": pipe.detector.calibration.percentile,
        "mask_ratio": pipe.detector.cfg.mask_ratio,
        "ablation_accuracy": "over all windows, non-eating included",
    }
    return report


# --- single-stage ablation -------------------------------------------------------------------------


@dataclass
class AblationRow:
    threshold: float
    accuracy: float
    non_eating_predictions: int


def ablate_single_stage(
    classifier: FoodClassifier,
    windows: Sequence[WindowPair],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> list[AblationRow]:
    """Classifier alone: non-eating when the top probability is below the threshold.

    Accuracy is over the full label space (foods plus non-eating), the same
    windows and labels the two-stage evaluation uses.
    """
    if not windows:
        raise EmptyTestSet("no windows to evaluate")
    probs = classifier.probabilities(windows)
    top = probs.max(axis=1)
    arg = probs.argmax(axis=1)
    y = np.array([true_label(w) for w in windows])
    rows = []
    for cst in thresholds:
        pred = np.where(top < cst, NON_EATING, arg)
        rows.append(AblationRow(float(cst), float(np.mean(pred == y)), int(np.sum(pred == NON_EATING))))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "accuracy", "non_eating_predictions"])
    for r in rows:
        w.writerow([repr(r.threshold), repr(r.accuracy), r.non_eating_predictions])
    return buf.getvalue()


# --- latency -----------------------------------------------------------------------------------------


def measure_latency(pipe: Pipeline, w: WindowPair, n_trials: int = 100, warmup: int = 10) -> dict:
    """Wall-clock of one full two-stage inference, single-threaded, in milliseconds."""
    if n_trials < 2:
        raise ValueError("need at least two timed trials")
    times = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            pipe.run(w)
        for _ in range(n_trials):
            t0 = time.perf_counter()
            pipe.run(w)
            times.append((time.perf_counter() - t0) * 1e3)
    arr = np.asarray(times)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)),
        "p95": float(np.percentile(arr, 95)),
        "n_trials": n_trials,
        "warmup": warmup,
    }


# --- export --------------------------------------------------------------------------------------------


def confusion_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + report.labels)
    for name, row in zip(report.labels, report.confusion.tolist()):
        w.writerow([name] + row)
    return buf.getvalue()


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def export_report(
    report: EvalReport | None,
    out_dir: str | Path,
    ablation: Sequence[AblationRow] | None = None,
    grid_csv_text: str | None = None,
) -> list[Path]:
    """Write ``metrics.json``, ``confusion.csv`` and, when given, ``ablation.csv`` / ``gridsearch.csv``."""
    out = Path(out_dir)
    written = []
    files: list[tuple[str, str]] = []
    if report is not None:
        files += [("metrics.json", dump_json(report.metrics())), ("confusion.csv", confusion_csv(report))]
    if ablation is not None:
        files.append(("ablation.csv", ablation_csv(ablation)))
    if grid_csv_text is not None:
        files.append(("gridsearch.csv", grid_csv_text))
    for name, text in files:
        atomic_write(out / name, text.encode())
        written.append(out / name)
    return written
