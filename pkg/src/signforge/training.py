"""SGD training loop with early stopping, plus the multi-model comparison
harness that renders the familiar eight-column results table.

Metric histories are bit-reproducible for a fixed seed on one machine;
wall-clock fields are the only nondeterministic part of a run record.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .dataset import AugmentConfig, DatasetManifest, load_batch
from .models import Model, build, get_spec, param_count, predict
from .weights_io import save as save_weights


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class EarlyStopConfig:
    metric: str = "val_loss"  # val_loss | val_accuracy
    patience: int = 5
    min_delta: float = 0.0

    def __post_init__(self):
        if self.metric not in ("val_loss", "val_accuracy"):
            raise ValueError(f"early-stopping metric must be val_loss or val_accuracy, "
                             f"got {self.metric!r}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")

    @property
    def mode(self) -> str:
        return "min" if self.metric == "val_loss" else "max"


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.001
    optimizer: str = "sgd"
    momentum: float = 0.0
    early_stopping: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.optimizer != "sgd":
            raise ValueError(f"only the sgd optimizer is supported, got {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        es = d.pop("early_stopping", {})
        return TrainConfig(early_stopping=EarlyStopConfig(**es), **d)


@dataclass
class EpochMetrics:
    epoch: int
    train_acc: float
    train_loss: float
    val_acc: float
    val_loss: float
    seconds: float


@dataclass
class RunRecord:
    model_name: str
    epochs_executed: int
    train_acc: float
    train_loss: float
    val_acc: float
    val_loss: float
    train_seconds: float
    infer_ms: float
    history: list[EpochMetrics]
    config: dict
    completion: str  # max_epochs | early_stopped


@dataclass
class EarlyStopState:
    best_value: float = np.nan
    best_epoch: int = 0
    epochs_seen: int = 0
    since_improvement: int = 0
    best_weights: Optional[dict] = None


def early_stop_update(state: EarlyStopState, value: float, patience: int,
                      min_delta: float, mode: str) -> tuple[bool, EarlyStopState]:
    """One epoch's early-stopping decision.

    Improvement means beating the best value by MORE than min_delta, so a
    flat metric counts as "stopped improving". Returns (stop, state).
    """
    if mode not in ("min", "max"):
        raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
    state.epochs_seen += 1
    if np.isnan(state.best_value):
        improved = True
    elif mode == "min":
        improved = value < state.best_value - min_delta
    else:
        improved = value > state.best_value + min_delta
    if improved:
        state.best_value = value
        state.best_epoch = state.epochs_seen
        state.since_improvement = 0
    else:
        state.since_improvement += 1
    return state.since_improvement >= patience, state


def sgd_step(model: Model, grads: dict[str, np.ndarray], lr: float,
             momentum: float = 0.0,
             velocity: Optional[dict[str, np.ndarray]] = None
             ) -> dict[str, np.ndarray]:
    """v <- momentum*v + g; p <- p - lr*v, in place on the model's parameters.

    Gradient names must match the parameter names exactly.
    """
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(grads))
    extra = sorted(set(grads) - set(params))
    if missing or extra:
        raise TrainingError(f"gradient/parameter name mismatch: missing={missing}, extra={extra}")
    if velocity is None:
        velocity = {}
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        if momentum != 0.0:
            v = velocity.get(name)
            v = g.copy() if v is None else momentum * v + g
            velocity[name] = v
        else:
            v = g
        p -= lr * v
    return velocity


def evaluate(model: Model, manifest: DatasetManifest, split: str,
             batch_size: int = 64) -> tuple[float, float]:
    """Infer-mode pass over a whole split exactly once: (accuracy, mean loss)."""
    idx = manifest.split_indices(split)
    if not idx:
        raise TrainingError(f"split {split!r} is empty")
    correct = 0
    nll_sum = 0.0
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        x, y = load_batch(manifest, chunk)
        logits = model.forward(x, "infer")
        loss, _ = ops.softmax_cross_entropy(logits, y)
        nll_sum += loss * len(chunk)
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / len(idx), nll_sum / len(idx)


def train(model: Model, manifest: DatasetManifest, config: TrainConfig,
          augment_config: Optional[AugmentConfig] = None,
          run_dir: Optional[str] = None) -> RunRecord:
    """Full training run: seeded shuffle, augmented batches, SGD, per-epoch
    evaluation of both splits, early stopping with best-weight restore."""
    train_idx = manifest.split_indices("train")
    val_idx = manifest.split_indices("validation")
    if not train_idx or not val_idx:
        raise TrainingError("manifest must contain both train and validation samples")
    rng = np.random.default_rng(config.seed)
    es_cfg = config.early_stopping
    es = EarlyStopState()
    velocity: dict[str, np.ndarray] = {}
    history: list[EpochMetrics] = []
    completion = "max_epochs"
    t_start = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        t_epoch = time.perf_counter()
        order = rng.permutation(len(train_idx))
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [train_idx[i] for i in order[start:start + config.batch_size]]
            x, y = load_batch(manifest, chunk, augment_config=augment_config, rng=rng)
            logits, cache = model.forward_train(x)
            loss, dlogits = ops.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = model.backward(dlogits, cache)
            velocity = sgd_step(model, grads, config.learning_rate,
                                config.momentum, velocity)
        eval_batch = max(config.batch_size, 256)
        train_acc, train_loss = evaluate(model, manifest, "train", eval_batch)
        val_acc, val_loss = evaluate(model, manifest, "validation", eval_batch)
        history.append(EpochMetrics(epoch, train_acc, train_loss, val_acc, val_loss,
                                    time.perf_counter() - t_epoch))
        monitored = val_loss if es_cfg.metric == "val_loss" else val_acc
        prev_best_epoch = es.best_epoch
        stop, es = early_stop_update(es, monitored, es_cfg.patience,
                                     es_cfg.min_delta, es_cfg.mode)
        if es.best_epoch != prev_best_epoch:
            es.best_weights = model.state_snapshot()
        if stop:
            completion = "early_stopped"
            if es.best_weights is not None:
                model.restore_snapshot(es.best_weights)
            break
    train_seconds = time.perf_counter() - t_start
    final = history[es.best_epoch - 1] if completion == "early_stopped" else history[-1]

    sample, _ = load_batch(manifest, [train_idx[0]])
    for _ in range(5):
        predict(model, sample[0])
    t0 = time.perf_counter()
    for _ in range(100):
        predict(model, sample[0])
    infer_ms = (time.perf_counter() - t0) / 100 * 1000

    record = RunRecord(
        model_name=model.spec.name,
        epochs_executed=len(history),
        train_acc=final.train_acc, train_loss=final.train_loss,
        val_acc=final.val_acc, val_loss=final.val_loss,
        train_seconds=train_seconds, infer_ms=infer_ms,
        history=history, config=config.to_dict(), completion=completion,
    )
    if run_dir is not None:
        write_run_dir(run_dir, model, record)
    return record


def write_run_dir(run_dir: str, model: Model, record: RunRecord) -> None:
    d = Path(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(record.config, indent=1))
    with open(d / "history.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_acc", "train_loss", "val_acc", "val_loss", "seconds"])
        for m in record.history:
            w.writerow([m.epoch, f"{m.train_acc:.6f}", f"{m.train_loss:.6f}",
                        f"{m.val_acc:.6f}", f"{m.val_loss:.6f}", f"{m.seconds:.3f}"])
    save_weights(model, str(d / "model.sgnf"))
    (d / "report.txt").write_text(
        f"model: {record.model_name}\n"
        f"completion: {record.completion} after {record.epochs_executed} epochs\n"
        f"train accuracy: {record.train_acc:.4f}  loss: {record.train_loss:.4f}\n"
        f"val accuracy:   {record.val_acc:.4f}  loss: {record.val_loss:.4f}\n"
        f"train time: {format_duration(record.train_seconds)}\n"
        f"mean inference: {record.infer_ms:.2f}ms\n")


# ---------------------------------------------------------------------------
# Comparison report

COMPARISON_COLUMNS = ["Model Name", "Epochs Executed", "Train Accuracy", "Train Loss",
                      "Validation Accuracy", "Validation Loss", "Time Train",
                      "Time Execution"]


def format_duration(seconds: float) -> str:
    s = int(round(seconds))
    if s >= 3600:
        return f"{s // 3600}h {s % 3600 // 60:02d}m"
    if s >= 60:
        return f"{s // 60}m"
    return f"{s}s"


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    epochs: Optional[int] = None
    train_acc: Optional[float] = None
    train_loss: Optional[float] = None
    val_acc: Optional[float] = None
    val_loss: Optional[float] = None
    time_train_s: Optional[float] = None
    time_exec_ms: Optional[float] = None
    failed: bool = False
    error: str = ""


def sort_rows(rows: list[ComparisonRow]) -> list[ComparisonRow]:
    """Descending validation accuracy; ties by lower validation loss, then
    name. Failed rows sink to the bottom."""
    return sorted(rows, key=lambda r: (r.failed, -(r.val_acc if r.val_acc is not None else -1),
                                       r.val_loss if r.val_loss is not None else np.inf,
                                       r.name))


def _cells(row: ComparisonRow) -> list[str]:
    if row.failed:
        return [row.name, "failed", "", "", "", "", "", ""]
    return [row.name, str(row.epochs),
            f"{row.train_acc:.4f}", f"{row.train_loss:.4f}",
            f"{row.val_acc:.4f}", f"{row.val_loss:.4f}",
            format_duration(row.time_train_s), f"{int(round(row.time_exec_ms))}ms"]


def comparison_csv(rows: list[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(COMPARISON_COLUMNS)
    for row in sort_rows(rows):
        w.writerow(_cells(row))
    return buf.getvalue()


def comparison_table(rows: list[ComparisonRow]) -> str:
    table = [COMPARISON_COLUMNS] + [_cells(r) for r in sort_rows(rows)]
    widths = [max(len(line[i]) for line in table) for i in range(len(COMPARISON_COLUMNS))]
    out = []
    for li, line in enumerate(table):
        out.append("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip())
        if li == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def record_to_row(record: RunRecord) -> ComparisonRow:
    return ComparisonRow(
        name=record.model_name, epochs=record.epochs_executed,
        train_acc=record.train_acc, train_loss=record.train_loss,
        val_acc=record.val_acc, val_loss=record.val_loss,
        time_train_s=record.train_seconds, time_exec_ms=record.infer_ms)


def compare(model_names: list[str], manifest: DatasetManifest, config: TrainConfig,
            out_dir: Optional[str] = None,
            augment_config: Optional[AugmentConfig] = None,
            num_classes: Optional[int] = None,
            input_size: Optional[int] = None) -> list[ComparisonRow]:
    """Train every named model under the identical config and report the
    sorted comparison. A run that raises is recorded as failed; the report
    is produced regardless."""
    if len(model_names) < 2:
        raise TrainingError("compare needs at least 2 models")
    k = num_classes if num_classes is not None else len(manifest.classes)
    size = input_size if input_size is not None else manifest.image_size[0]
    rows: list[ComparisonRow] = []
    for name in model_names:
        try:
            spec = get_spec(name, input_size=size, num_classes=k)
            if k == len(manifest.classes):
                spec = spec.with_classes(manifest.classes)
            model = build(spec, seed=config.seed)
            run_dir = str(Path(out_dir) / "runs" / name) if out_dir else None
            record = train(model, manifest, config, augment_config, run_dir=run_dir)
            rows.append(record_to_row(record))
        except Exception as e:  # noqa: BLE001 - a failed run must not sink the report
            rows.append(ComparisonRow(name=name, failed=True, error=str(e)))
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "comparison.csv").write_text(comparison_csv(rows))
        (d / "comparison.txt").write_text(comparison_table(rows))
    return rows
