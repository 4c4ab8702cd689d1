"""Mini-batch SGD with momentum on the summed per-point cross-entropy."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import LabelSpace, Sample, batches
from .metrics import EmptyDataset, evaluate_predictions
from .model import MCPNet
from .sketchio import LabeledPointSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 50
    seed: int = 0
    eval_every: int = 5
    reduction: str = "mean"
    finalize_bn: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class OptimizerState:
    velocity: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> OptimizerState:
        return cls([np.zeros_like(p.data) for p in params])


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState,
             cfg: TrainConfig) -> None:
    """In place: ``v = momentum*v + g + wd*p``, then ``p -= lr*v``."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ad.ShapeMismatch("params, grads and velocity buffers differ in count")
    for p, g, v in zip(params, grads, state.velocity):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or v.shape != p.shape:
            raise ad.ShapeMismatch(f"parameter {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * p.data
        p.data -= cfg.learning_rate * v


def stack_batch(batch: Sequence, label_space: LabelSpace | None = None, dtype=np.float32):
    """Stack samples into ``(B, N, 2)`` points and ``(B, N)`` global labels."""
    pts, labels = [], []
    for item in batch:
        lps = item.points if isinstance(item, Sample) else item
        lab = lps.labels
        if label_space is not None and isinstance(item, Sample):
            lab = label_space.to_global(item.category, lab)
        pts.append(lps.points)
        labels.append(lab)
    n = {len(p) for p in pts}
    if len(n) != 1:
        raise ad.ShapeMismatch(f"batch mixes point counts {sorted(n)}")
    return np.stack(pts).astype(dtype), np.stack(labels)


def loss_batch(model: MCPNet, batch: Sequence, label_space: LabelSpace | None = None,
               mode: str = "train") -> Tensor:
    """Summed cross-entropy over every sample and point of ``batch`` (padding included).

    The whole batch goes through the network at once, so batch norm sees
    batch-times-point statistics.
    """
    points, labels = stack_batch(batch, label_space, model.dtype)
    logits = model.logits(Tensor(points), mode)
    return ad.softmax_cross_entropy(logits, labels)


def labels_in(batch: Sequence) -> int:
    return sum(len(item.points if isinstance(item, Sample) else item) for item in batch)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_train_loss", "val_p_metric", "val_c_metric"])
        for r in self.rows:
            w.writerow([r["epoch"], f"{r['mean_train_loss']:.6f}",
                        "" if r["val_p_metric"] is None else f"{r['val_p_metric']:.6f}",
                        "" if r["val_c_metric"] is None else f"{r['val_c_metric']:.6f}"])
        return buf.getvalue()

    def __len__(self) -> int:
        return len(self.rows)


def predict_samples(model: MCPNet, samples: Sequence[Sample], chunk: int = 32) -> list[np.ndarray]:
    out = []
    for lo in range(0, len(samples), chunk):
        pts = np.stack([s.points.points for s in samples[lo:lo + chunk]]).astype(model.dtype)
        out.extend(model.forward(pts, "eval").labels())
    return out


def evaluate(model: MCPNet, samples: Sequence[Sample], label_space: LabelSpace | None = None):
    """Evaluation report for ``samples``.

    Predictions are compared in the global label space; without one, sample
    labels are taken to be model classes already.
    """
    preds = predict_samples(model, samples)
    items = []
    for s, pred in zip(samples, preds):
        truth = s.points
        if label_space is not None:
            truth = LabeledPointSet(truth.base, label_space.to_global(s.category, truth.labels))
        items.append((s.category, pred, truth))
    return evaluate_predictions(items, model.config.num_classes)


def finalize_batch_norm(model: MCPNet, samples: Sequence[Sample], batch_size: int,
                        label_space: LabelSpace | None = None) -> None:
    """Replace running statistics by population estimates under the current weights.

    Averages per-batch means and unbiased variances over one unshuffled pass,
    the inference rule of the original batch-norm formulation.
    """
    layers = [b.bn for b in model.blocks() if b.bn is not None]
    saved = [(bn.mean.copy(), bn.var.copy(), bn.momentum) for bn in layers]
    sums = [(np.zeros_like(bn.mean, dtype=np.float64), np.zeros_like(bn.var, dtype=np.float64)) for bn in layers]
    count = 0
    for lo in range(0, len(samples), batch_size):
        points, _ = stack_batch(samples[lo:lo + batch_size], label_space, model.dtype)
        for bn in layers:
            bn.momentum = 0.0
        model.logits(Tensor(points), "train")
        for (m, v), bn in zip(sums, layers):
            m += bn.mean
            v += bn.var
        count += 1
    for bn, (m, v), (_, _, momentum) in zip(layers, sums, saved):
        bn.mean[...] = m / count
        bn.var[...] = v / count
        bn.momentum = momentum


def fit(model: MCPNet, train_set: Sequence[Sample], val_set: Sequence[Sample] | None, cfg: TrainConfig,
        label_space: LabelSpace | None = None,
        callback: Callable[[dict], None] | None = None) -> tuple[MCPNet, History]:
    """Train ``model`` in place; returns it with the per-epoch history."""
    if not train_set:
        raise EmptyDataset("training set is empty")
    params = model.parameters()
    state = OptimizerState.zeros_like(params)
    history = History()
    for epoch in range(1, cfg.epochs + 1):
        total, n_points = 0.0, 0
        for batch in batches(train_set, cfg.batch_size, (cfg.seed, epoch)):
            model.zero_grad()
            loss = loss_batch(model, batch, label_space, "train")
            loss.backward(np.asarray(1.0 / labels_in(batch), dtype=loss.dtype) if cfg.reduction == "mean" else None)
            sgd_step(params, [p.grad for p in params], state, cfg)
            total += float(loss.data)
            n_points += labels_in(batch)
        if cfg.finalize_bn:
            finalize_batch_norm(model, train_set, cfg.batch_size, label_space)
        row = {"epoch": epoch, "mean_train_loss": total / n_points, "val_p_metric": None, "val_c_metric": None}
        if val_set and cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            rep = evaluate(model, val_set, label_space)
            row["val_p_metric"], row["val_c_metric"] = rep.p_metric, rep.c_metric
        history.rows.append(row)
        log.info("epoch %d loss %.4f val_p %s", epoch, row["mean_train_loss"], row["val_p_metric"])
        if callback is not None:
            callback(row)
    return model, history
