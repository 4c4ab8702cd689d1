"""Point-level (P-metric) and component-level (C-metric) segmentation accuracy.

Both are computed on the original sampled points only; padding duplicates are
ignored. A component is the group of points sharing one ground-truth label
within a sketch, and it counts as correct when at least 75% of its points
carry that label in the prediction.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .sketchio import LabeledPointSet

COMPONENT_THRESHOLD = 0.75


class LengthMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


def _originals(pred, truth: LabeledPointSet) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    if pred.shape != truth.labels.shape:
        raise LengthMismatch(f"{pred.shape[0] if pred.ndim else 0} predictions for {len(truth)} points")
    n = truth.n_original
    return pred[:n], truth.labels[:n]


def point_counts(pred, truth: LabeledPointSet) -> tuple[int, int]:
    p, t = _originals(pred, truth)
    return int(np.count_nonzero(p == t)), int(t.size)


def p_metric(pred, truth: LabeledPointSet) -> float:
    correct, total = point_counts(pred, truth)
    return correct / total


def c_metric(pred, truth: LabeledPointSet, threshold: float = COMPONENT_THRESHOLD) -> tuple[int, int]:
    """Return ``(correct_components, total_components)`` for one sketch."""
    p, t = _originals(pred, truth)
    classes, inverse = np.unique(t, return_inverse=True)
    sizes = np.bincount(inverse, minlength=classes.size)
    hits = np.bincount(inverse, weights=(p == t), minlength=classes.size)
    # integer form of hits / sizes >= threshold, exact at the boundary
    correct = int(np.count_nonzero(hits >= threshold * sizes))
    return correct, int(classes.size)


def confusion_matrix(pred, truth: LabeledPointSet, num_classes: int) -> np.ndarray:
    p, t = _originals(pred, truth)
    return np.bincount(t * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass
class CategoryStats:
    n_sketches: int = 0
    correct_points: int = 0
    n_points: int = 0
    correct_components: int = 0
    n_components: int = 0

    @property
    def p_metric(self) -> float:
        return self.correct_points / self.n_points if self.n_points else 0.0

    @property
    def c_metric(self) -> float:
        return self.correct_components / self.n_components if self.n_components else 0.0


@dataclass
class EvalReport:
    categories: dict[str, CategoryStats]
    confusion: np.ndarray
    per_category_confusion: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def p_metric(self) -> float:
        return float(np.mean([s.p_metric for s in self.categories.values()]))

    @property
    def c_metric(self) -> float:
        return float(np.mean([s.c_metric for s in self.categories.values()]))

    @property
    def n_sketches(self) -> int:
        return sum(s.n_sketches for s in self.categories.values())

    @property
    def n_points(self) -> int:
        return sum(s.n_points for s in self.categories.values())

    @property
    def n_components(self) -> int:
        return sum(s.n_components for s in self.categories.values())

    def rows(self) -> list[tuple[str, float, float]]:
        out = [(name, s.p_metric, s.c_metric) for name, s in sorted(self.categories.items())]
        out.append(("Average", self.p_metric, self.c_metric))
        return out

    def to_text(self) -> str:
        width = max(len("category"), *(len(r[0]) for r in self.rows()))
        lines = [f"{'category':<{width}}  {'P-metric':>8}  {'C-metric':>8}"]
        for i, (name, p, c) in enumerate(self.rows()):
            if i == len(self.categories):
                lines.append("-" * (width + 20))
            lines.append(f"{name:<{width}}  {100 * p:8.1f}  {100 * c:8.1f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "p_metric", "c_metric"])
        for name, p, c in self.rows():
            w.writerow([name, f"{p:.6f}", f"{c:.6f}"])
        return buf.getvalue()


def evaluate_predictions(items, num_classes: int) -> EvalReport:
    """Aggregate ``(category, pred, truth)`` triples into a report.

    Counts are summed within a category before dividing; the overall figure is
    the unweighted mean over categories.
    """
    cats: dict[str, CategoryStats] = {}
    per_cat: dict[str, np.ndarray] = {}
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for category, pred, truth in items:
        s = cats.setdefault(category, CategoryStats())
        cp, tp = point_counts(pred, truth)
        cc, tc = c_metric(pred, truth)
        s.n_sketches += 1
        s.correct_points += cp
        s.n_points += tp
        s.correct_components += cc
        s.n_components += tc
        cm = confusion_matrix(pred, truth, num_classes)
        confusion += cm
        per_cat[category] = per_cat.get(category, 0) + cm
    if not cats:
        raise EmptyDataset("nothing to evaluate")
    return EvalReport(cats, confusion, per_cat)


def report(model, dataset) -> EvalReport:
    """Evaluate ``model`` on ``dataset``: an iterable of ``(category, LabeledPointSet)``."""
    items = [(cat, model.predict(lps.base), lps) for cat, lps in dataset]
    return evaluate_predictions(items, model.config.num_classes)
