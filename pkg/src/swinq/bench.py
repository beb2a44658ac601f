"""Measurement harness: latency protocol, classification metrics, reports.

Latency is wall time of a single batch-1 inference on a monotonic clock with
warmup excluded; FPS is derived from the mean so the FPS = 1000/latency
identity holds exactly. Precision/recall/F1 are macro-averaged over the
confusion matrix; zero-support classes contribute 0 to the macro mean.
"""

from __future__ import annotations

import csv
import io
import json
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import engine as engine_mod

# report row ordering: original first, ablation methods, TensorRT-style rows last
METHOD_ORDER = (
    "original", "minmax", "ema", "omse", "percentile", "fqvit",
    "int8", "default_range", "fp16",
)
CSV_COLUMNS = (
    "dataset", "method", "bits", "accuracy", "precision", "recall", "f1",
    "latency_ms", "fps", "model_size_mb", "thread_count", "host",
)


def host_descriptor() -> str:
    return f"{platform.system()}-{platform.machine()}-python{platform.python_version()}"


@dataclass(frozen=True)
class LatencyStats:
    warmup_iters: int
    measured_iters: int
    times_ms: tuple[float, ...]
    mean_ms: float
    median_ms: float
    p95_ms: float

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms


def measure_latency(engine, image: np.ndarray, warmup: int = 10, iters: int = 100) -> LatencyStats:
    """Time single-image inference; warmup iterations are discarded."""
    if iters < 10:
        raise ValueError("need at least 10 measured iterations")
    for _ in range(warmup):
        engine_mod.engine_forward(engine, image)
    times = []
    for _ in range(iters):
        start = time.perf_counter_ns()
        engine_mod.engine_forward(engine, image)
        times.append((time.perf_counter_ns() - start) / 1e6)
    arr = np.asarray(times, dtype=np.float64)
    return LatencyStats(
        warmup_iters=warmup,
        measured_iters=iters,
        times_ms=tuple(times),
        mean_ms=float(arr.mean()),
        median_ms=float(np.median(arr)),
        p95_ms=float(np.percentile(arr, 95)),
    )


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: tuple[tuple[int, ...], ...]


def compute_metrics(predictions, labels, num_classes: int) -> Metrics:
    """Accuracy plus macro precision/recall/F1 from the KxK confusion matrix
    (confusion[label][pred])."""
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape or preds.size == 0:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    if preds.min() < 0 or labs.min() < 0 or preds.max() >= num_classes or labs.max() >= num_classes:
        raise ValueError(f"class index out of range for K={num_classes}")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labs, preds), 1)

    diag = np.diag(confusion).astype(np.float64)
    col = confusion.sum(axis=0).astype(np.float64)
    row = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(diag), where=pr > 0)
    return Metrics(
        accuracy=float(diag.sum() / confusion.sum()),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        f1=float(f1.mean()),
        confusion=tuple(tuple(int(v) for v in r) for r in confusion),
    )


@dataclass
class Prediction:
    path: str
    label: int
    pred: int
    logits: list[float]


def evaluate(
    engine,
    index: data_mod.DatasetIndex,
    spec: data_mod.PreprocessSpec,
    split: str = "test",
) -> tuple[Metrics, list[Prediction], int]:
    """Run the engine over a split in index order. Undecodable images are
    skipped, counted, and reported."""
    samples = index.split(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    predictions: list[Prediction] = []
    skipped = 0
    for sample in samples:
        try:
            image = data_mod.load_sample(index, sample, spec)
        except data_mod.DecodeError as exc:
            print(f"warning: {exc}; skipping")
            skipped += 1
            continue
        logits = engine_mod.engine_forward(engine, image)
        predictions.append(
            Prediction(
                path=sample.path,
                label=sample.class_index,
                pred=int(np.argmax(logits)),
                logits=[float(v) for v in logits],
            )
        )
    metrics = compute_metrics(
        [p.pred for p in predictions], [p.label for p in predictions], len(index.classes)
    )
    return metrics, predictions, skipped


def write_predictions(predictions: list[Prediction], path) -> None:
    with open(path, "w") as f:
        for p in predictions:
            f.write(json.dumps({"path": p.path, "label": p.label, "pred": p.pred, "logits": p.logits}))
            f.write("\n")


@dataclass
class BenchRow:
    dataset: str
    method: str
    bits: tuple[int, int, int]
    accuracy: float
    precision: float
    recall: float
    f1: float
    latency_ms: float
    fps: float
    model_size_mb: float
    thread_count: int = 1
    host: str = field(default_factory=host_descriptor)

    def __post_init__(self):
        if self.method not in METHOD_ORDER:
            raise ValueError(f"unknown method label {self.method!r}")
        for name in ("accuracy", "precision", "recall", "f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.model_size_mb <= 0:
            raise ValueError("model size must be positive")

    @property
    def bits_label(self) -> str:
        return "/".join(str(b) for b in self.bits)


def _check_rows(rows: list[BenchRow]) -> None:
    if not rows:
        raise ValueError("no rows to report")
    seen = set()
    for row in rows:
        key = (row.dataset, row.method)
        if key in seen:
            raise ValueError(f"duplicate (dataset, method) row {key}")
        seen.add(key)
        ideal = 1000.0 / row.latency_ms
        if abs(row.fps - ideal) / row.fps > 0.005:
            raise ValueError(
                f"{key}: fps {row.fps} violates the 1000/latency identity ({ideal})"
            )


def sort_rows(rows: list[BenchRow]) -> list[BenchRow]:
    return sorted(rows, key=lambda r: (r.dataset, METHOD_ORDER.index(r.method)))


def render_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([
            r.dataset, r.method, r.bits_label,
            f"{r.accuracy:.4f}", f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}",
            f"{r.latency_ms:.2f}", f"{r.fps:.2f}", f"{r.model_size_mb:.2f}",
            r.thread_count, r.host,
        ])
    return buf.getvalue()


def render_markdown(rows: list[BenchRow]) -> str:
    headers = ["Dataset", "Method (w/a/att)", "Accuracy", "Precision", "Recall", "F1",
               "Latency [ms]", "FPS", "Model Size [MB]"]
    table = [headers]
    for r in rows:
        table.append([
            r.dataset, f"{r.method} {r.bits_label}",
            f"{r.accuracy:.4f}", f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}",
            f"{r.latency_ms:.2f}", f"{r.fps:.2f}", f"{r.model_size_mb:.2f}",
        ])
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = []
    for ri, row in enumerate(table):
        lines.append("| " + " | ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) + " |")
        if ri == 0:
            lines.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    return "\n".join(lines) + "\n"


def emit_report(rows: list[BenchRow], csv_path=None, md_path=None) -> tuple[str, str]:
    """Validate, order, and render the report; returns (csv, markdown)."""
    _check_rows(rows)
    ordered = sort_rows(rows)
    csv_text = render_csv(ordered)
    md_text = render_markdown(ordered)
    if csv_path is not None:
        with open(csv_path, "w") as f:
            f.write(csv_text)
    if md_path is not None:
        with open(md_path, "w") as f:
            f.write(md_text)
    return csv_text, md_text
