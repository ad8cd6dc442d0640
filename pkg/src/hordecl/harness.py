"""Training protocol, evaluation, metrics and per-run orchestration."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class TrainProtocol:
    base_lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    patience: int = 5
    lr_decay_factor: float = 0.1
    max_decay_steps: int = 2
    max_epochs: int = 60
    clip_norm: float | None = 10.0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


class Trainable(Protocol):
    def train_epoch(self, lr: float, momentum: float, rng: np.random.Generator) -> None: ...

    def val_loss(self) -> float | None: ...

    def get_state(self) -> Any: ...

    def set_state(self, state: Any) -> None: ...


@dataclass
class StopInfo:
    epochs: int
    decay_steps: int
    best_epoch: int
    best_loss: float
    history: list[float] = field(default_factory=list)


def early_stop_loop(model: Trainable, protocol: TrainProtocol,
                    rng: np.random.Generator) -> StopInfo:
    """Patience-based early stopping with step decay and best-checkpoint reversion.

    After ``patience`` epochs without a new best validation loss the weights are
    reset to the best checkpoint and the learning rate is multiplied by the
    decay factor.  Once the decay budget is spent the next patience expiry ends
    training.  The best checkpoint overall is always what remains loaded.
    """
    lr = protocol.base_lr
    if model.val_loss() is None:
        log.warning("no validation data: training for a fixed %d epochs", protocol.max_epochs)
        for _ in range(protocol.max_epochs):
            model.train_epoch(lr, protocol.momentum, rng)
        return StopInfo(protocol.max_epochs, 0, protocol.max_epochs, float("nan"))

    best_loss = np.inf
    best_state = model.get_state()
    best_epoch = 0
    wait = 0
    decays = 0
    history = []
    epoch = 0
    while epoch < protocol.max_epochs:
        epoch += 1
        model.train_epoch(lr, protocol.momentum, rng)
        loss = model.val_loss()
        history.append(loss)
        if loss < best_loss:
            best_loss, best_state, best_epoch, wait = loss, model.get_state(), epoch, 0
            continue
        wait += 1
        if wait >= protocol.patience:
            if decays >= protocol.max_decay_steps:
                break
            decays += 1
            lr *= protocol.lr_decay_factor
            model.set_state(best_state)
            wait = 0
    model.set_state(best_state)
    return StopInfo(epoch, decays, best_epoch, float(best_loss), history)


def confusion_matrix(true: np.ndarray, pred: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    pos = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(true, pred):
        cm[pos[int(t)], pos[int(p)]] += 1
    return cm


def evaluate(logits: np.ndarray, row_classes: Sequence[int], labels: np.ndarray,
             seen_classes: Sequence[int]):
    """Accuracy and confusion matrix with prediction restricted to seen classes.

    ``logits`` has one column per entry of ``row_classes``; only columns of
    ``seen_classes`` compete in the argmax.
    """
    seen = sorted(int(c) for c in seen_classes)
    if not seen:
        raise ValueError("evaluation needs at least one seen class")
    col = {int(c): i for i, c in enumerate(row_classes)}
    cols = [col[c] for c in seen]
    pred = np.asarray(seen)[np.argmax(logits[:, cols], axis=1)]
    cm = confusion_matrix(labels, pred, seen)
    acc = float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0
    return acc, cm


def error_rate(cm: np.ndarray) -> float:
    """Mean over non-empty rows of the off-diagonal share of the row.

    Integer counts are averaged as exact fractions so the result is the
    correctly rounded value, e.g. exactly 0.3 for [[8, 2], [4, 6]].
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    rows = cm.sum(1)
    keep = rows > 0
    if not keep.any():
        raise ValueError("confusion matrix has no samples")
    wrong = rows - np.diag(cm)
    if np.issubdtype(cm.dtype, np.integer):
        shares = [Fraction(int(w), int(r)) for w, r in zip(wrong[keep], rows[keep])]
        return float(sum(shares, Fraction(0)) / len(shares))
    return float(np.mean(wrong[keep] / rows[keep]))


def task_error_rate(logits: np.ndarray, row_classes: Sequence[int], labels: np.ndarray,
                    task_classes: Sequence[int]) -> float:
    """Error rate on a task's data; classes without a head row count as fully wrong."""
    labels = np.asarray(labels)
    rates = []
    for c in sorted(task_classes):
        m = labels == c
        if not m.any():
            continue
        if c not in row_classes or logits.shape[1] == 0:
            rates.append(1.0)
            continue
        pred = np.asarray(row_classes)[np.argmax(logits[m], axis=1)]
        rates.append(float(np.mean(pred != c)))
    if not rates:
        raise ValueError("task has no samples")
    return float(np.mean(rates))


def per_class_accuracy(cm: np.ndarray, classes: Sequence[int]) -> dict[int, float]:
    rows = cm.sum(1)
    return {int(c): float(cm[i, i] / rows[i]) for i, c in enumerate(classes) if rows[i] > 0}


@dataclass
class TaskResult:
    task_index: int
    seen_classes: list[int]
    accuracy: float
    confusion: np.ndarray
    error_rate: float
    decision: str = ""
    class_accuracy: dict[int, float] = field(default_factory=dict)
    ensemble_size: int = 0


@dataclass
class RunRecord:
    method: str
    scenario_kind: str
    seed: int
    config_hash: str = ""
    tasks: list[TaskResult] = field(default_factory=list)

    def add(self, result: TaskResult) -> None:
        if self.tasks and not set(self.tasks[-1].seen_classes) <= set(result.seen_classes):
            raise ValueError("seen classes must not shrink")
        self.tasks.append(result)

    @property
    def accuracies(self) -> list[float]:
        return [t.accuracy for t in self.tasks]


def compute_metrics(record: RunRecord) -> tuple[float, float]:
    """Average accuracy over tasks and average per-class forgetting.

    Forgetting for a class is its best accuracy over the sequence minus its
    final accuracy, averaged over classes seen before the last task.
    """
    if not record.tasks:
        raise ValueError("no evaluated tasks")
    avg_acc = float(np.mean(record.accuracies))
    if len(record.tasks) < 2:
        return avg_acc, 0.0
    final = record.tasks[-1].class_accuracy
    earlier = set(record.tasks[-2].seen_classes)
    drops = []
    for c in sorted(earlier):
        hist = [t.class_accuracy[c] for t in record.tasks if c in t.class_accuracy]
        if c in final and hist:
            drops.append(max(hist) - final[c])
    return avg_acc, float(np.mean(drops)) if drops else 0.0


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


RESULT_COLUMNS = ["task", "num_seen", "accuracy", "error_rate", "ensemble_size", "decision"]


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def results_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    avg_acc, avg_f = compute_metrics(record)
    buf.write(f"# method={record.method} scenario={record.scenario_kind} seed={record.seed} "
              f"config={record.config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for t in record.tasks:
        w.writerow([t.task_index, len(t.seen_classes), _fmt(t.accuracy), _fmt(t.error_rate),
                    t.ensemble_size, t.decision])
    buf.write(f"# avg_accuracy={_fmt(avg_acc)} avg_forgetting={_fmt(avg_f)}\n")
    return buf.getvalue()


def results_sidecar(record: RunRecord, config: dict) -> str:
    avg_acc, avg_f = compute_metrics(record)
    doc = {
        "method": record.method,
        "scenario_kind": record.scenario_kind,
        "seed": record.seed,
        "config_hash": record.config_hash,
        "config": config,
        "aggregate": {"avg_accuracy": avg_acc, "avg_forgetting": avg_f,
                      "final_accuracy": record.tasks[-1].accuracy},
        "class_accuracy": [{str(c): a for c, a in sorted(t.class_accuracy.items())}
                           for t in record.tasks],
        "confusion": [t.confusion.tolist() for t in record.tasks],
    }
    return json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n"


def write_results(record: RunRecord, config: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{record.method}_seed{record.seed}"
    (out / f"{stem}.csv").write_text(results_csv(record))
    (out / f"{stem}.json").write_text(results_sidecar(record, config))
    return out / f"{stem}.csv"


def read_results(path: str | Path) -> dict:
    """Parse a results CSV back into header fields, task rows and aggregates."""
    header: dict[str, str] = {}
    agg: dict[str, float] = {}
    lines = Path(path).read_text().splitlines()
    body = []
    for line in lines:
        if line.startswith("# "):
            pairs = dict(kv.split("=", 1) for kv in line[2:].split())
            if "avg_accuracy" in pairs:
                agg = {k: float(v) for k, v in pairs.items()}
            else:
                header = pairs
        else:
            body.append(line)
    rows = list(csv.DictReader(body))
    return {"header": header, "rows": rows, "aggregate": agg}


# ---------------------------------------------------------------------------
# orchestration


def run_scenario(method, scenario, dataset, seed: int, config: dict | None = None,
                 record: RunRecord | None = None) -> RunRecord:
    """Run a method over every task of a scenario, evaluating after each task.

    Results are appended to ``record`` as they come in, so a caller holding the
    record keeps the finished tasks if a later one raises.
    """
    if record is None:
        record = RunRecord(method.name, scenario.kind, seed, config_hash(config or {}))
    x_test = dataset.inputs[dataset.test_indices]
    y_test = dataset.labels[dataset.test_indices]
    seen: set[int] = set()
    for task in scenario.tasks:
        seen.update(task.class_set)
        info = method.learn_task(task, dataset) or {}
        seen_sorted = sorted(seen)
        mask = np.isin(y_test, seen_sorted)
        logits, rows = method.logits(x_test[mask])
        acc, cm = evaluate(logits, rows, y_test[mask], seen_sorted)
        tr_idx = task.train_indices()
        t_logits, t_rows = method.logits(dataset.inputs[tr_idx])
        e = task_error_rate(t_logits, t_rows, dataset.labels[tr_idx], task.class_set)
        record.add(TaskResult(task.task_index, seen_sorted, acc, cm, e,
                              info.get("decision", ""), per_class_accuracy(cm, seen_sorted),
                              info.get("ensemble_size", 0)))
        log.info("%s seed=%d task=%d seen=%d acc=%.4f", record.method, seed, task.task_index,
                 len(seen_sorted), acc)
    return record


def protocol_from_dict(d: dict | None) -> TrainProtocol:
    return TrainProtocol(**(d or {}))


def protocol_to_dict(p: TrainProtocol) -> dict:
    return asdict(p)
