"""Loss, training loop and per-status evaluation metrics."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .errors import ContractError, NumericError, ShapeError
from .functional import cross_entropy
from .optim import Adam
from .rng import make_rng

log = logging.getLogger(__name__)

STATUS_NAMES = ("straight_pass", "straight_stop", "left_pass", "left_stop")


def total_loss(straight_logits, left_logits, label):
    """Unweighted sum of the two heads' cross-entropies.

    ``label`` is a pair of class indices, or a (B, 2) array for batches.
    """
    label = np.asarray(label)
    if label.ndim == 1:
        return cross_entropy(straight_logits, int(label[0])) + cross_entropy(left_logits, int(label[1]))
    return cross_entropy(straight_logits, label[:, 0]) + cross_entropy(left_logits, label[:, 1])


# -- metrics ------------------------------------------------------------------
@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class StatusMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    undefined: tuple = ()  # names of metrics whose denominator was zero


@dataclass
class MetricsReport:
    statuses: dict = field(default_factory=dict)  # name -> StatusMetrics

    def __getitem__(self, name):
        return self.statuses[name]

    def to_text(self):
        head = f"{'status':<15}{'accuracy':>10}{'precision':>11}{'recall':>9}{'f1':>9}"
        rows = [head, "-" * len(head)]
        for name, m in self.statuses.items():
            flag = "  *" if m.undefined else ""
            rows.append(f"{name:<15}{m.accuracy:>10.4f}{m.precision:>11.4f}{m.recall:>9.4f}"
                        f"{m.f1:>9.4f}{flag}")
        if any(m.undefined for m in self.statuses.values()):
            rows.append("* zero denominator: metric reported as 0")
        return "\n".join(rows)

    def to_key_values(self):
        lines = []
        for name, m in self.statuses.items():
            for metric in ("accuracy", "precision", "recall", "f1"):
                lines.append(f"{name}.{metric}={getattr(m, metric):.6f}")
            c = m.counts
            lines.append(f"{name}.counts={c.tp},{c.fp},{c.fn},{c.tn}")
            if m.undefined:
                lines.append(f"{name}.undefined={','.join(m.undefined)}")
        return "\n".join(lines)


def _ratio(num, den):
    return (num / den, False) if den else (0.0, True)


def binary_metrics(pred, true, positive):
    pred, true = np.asarray(pred), np.asarray(true)
    tp = int(np.sum((pred == positive) & (true == positive)))
    fp = int(np.sum((pred == positive) & (true != positive)))
    fn = int(np.sum((pred != positive) & (true == positive)))
    tn = int(np.sum((pred != positive) & (true != positive)))
    counts = ConfusionCounts(tp, fp, fn, tn)
    accuracy, _ = _ratio(tp + tn, counts.total)
    precision, p_undef = _ratio(tp, tp + fp)
    recall, r_undef = _ratio(tp, tp + fn)
    f1, f_undef = _ratio(2 * precision * recall, precision + recall)
    undefined = tuple(n for n, u in (("precision", p_undef), ("recall", r_undef), ("f1", f_undef)) if u)
    return StatusMetrics(accuracy, precision, recall, f1, counts, undefined)


def metrics_from_predictions(pred, true):
    """Four per-status reports from (n, 2) predicted and true class indices."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(f"need matching (n, 2) arrays, got {pred.shape} and {true.shape}")
    if len(pred) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    report = MetricsReport()
    for col, direction in enumerate(("straight", "left")):
        for cls, status in enumerate(("pass", "stop")):
            report.statuses[f"{direction}_{status}"] = binary_metrics(pred[:, col], true[:, col], cls)
    return report


def predict_batches(model, X, batch_size=16):
    preds = []
    with T.no_grad():
        for start in range(0, len(X), batch_size):
            preds.append(model.forward(X[start:start + batch_size]).predictions())
    return np.concatenate(preds)


def evaluate(model, X, y, batch_size=16):
    """Margin-free inference over ``X`` and per-status metrics against ``y``."""
    if len(X) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    return metrics_from_predictions(predict_batches(model, X, batch_size), y)


# -- training -----------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float

    def to_line(self):
        return f"{self.epoch}\t{self.loss:.6f}\t{self.train_acc:.6f}"


@dataclass
class TrainResult:
    history: list
    checkpoint: object = None  # path, when one was written


def train(model, X, y, config=None, checkpoint_path=None, on_epoch=None):
    """Adam training on the summed two-head arcface loss.

    Each epoch visits ``X`` in a seeded permutation. ``train_acc`` is the
    fraction of samples with both directions predicted correctly (margin-free),
    measured on the forward passes of that epoch.
    """
    config = config or TrainConfig()
    X, y = np.asarray(X), np.asarray(y)
    if len(X) == 0:
        raise ContractError("training needs a non-empty dataset")
    if len(X) != len(y):
        raise ShapeError(f"{len(X)} buffers but {len(y)} labels")
    opt = Adam(model.params, lr=config.learning_rate)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = (make_rng(config.seed, f"shuffle.{epoch}").permutation(len(X))
                 if config.shuffle else np.arange(len(X)))
        total, correct = 0.0, 0
        for batch, start in enumerate(range(0, len(X), config.batch_size)):
            idx = order[start:start + config.batch_size]
            out = model.forward(X[idx], targets=y[idx])
            loss = total_loss(out.straight_logits, out.left_logits, y[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            correct += int(np.sum(np.all(out.predictions() == y[idx], axis=1)))
        record = EpochRecord(epoch, total / len(X), correct / len(X))
        history.append(record)
        log.debug("epoch %d loss %.5f acc %.4f", epoch, record.loss, record.train_acc)
        if on_epoch is not None:
            on_epoch(record)
    path = save_checkpoint(model, checkpoint_path) if checkpoint_path else None
    return TrainResult(history, path)
