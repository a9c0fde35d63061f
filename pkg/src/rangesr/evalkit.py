"""Confusion accounting, IoU, throughput benchmarking and report emission."""

from __future__ import annotations

import csv
import io
import json
import platform
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateMetric, InvalidFormat, ShapeMismatch
from .rangeview import IGNORE_INDEX

REPORT_SCHEMA = "rangesr-report/1"
REPORT_FORMATS = ("csv", "json", "markdown_table")


class ConfusionMatrix:
    """counts[gt, pred] over non-ignore ground-truth pixels."""

    def __init__(self, num_classes, ignore_index=IGNORE_INDEX, counts=None):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = (np.zeros((num_classes, num_classes), dtype=np.int64)
                       if counts is None else np.asarray(counts, dtype=np.int64).copy())

    def __add__(self, other):
        return ConfusionMatrix(self.num_classes, self.ignore_index, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    pred = np.asarray(getattr(pred, "labels", pred))
    gt = np.asarray(getattr(gt, "labels", gt))
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    keep = gt != cm.ignore_index
    n = cm.num_classes
    idx = gt[keep].astype(np.int64) * n + pred[keep].astype(np.int64)
    cm.counts += np.bincount(idx, minlength=n * n).reshape(n, n)
    return cm


def iou(cm: ConfusionMatrix):
    """Per-class IoU (nan for classes absent from both gt and pred) and mIoU."""
    if cm.total == 0:
        raise DegenerateMetric("confusion matrix is empty")
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = np.full(cm.num_classes, np.nan)
    present = denom > 0
    per_class[present] = tp[present] / denom[present]
    scored = present.copy()
    scored[cm.ignore_index] = False
    per_class[cm.ignore_index] = np.nan
    miou = float(per_class[scored].mean()) if scored.any() else float("nan")
    return per_class, miou


@dataclass
class EvalResult:
    name: str
    class_names: list
    per_class: list  # IoU by train id, index 0 (ignore) excluded from reports
    miou: float
    params: dict = field(default_factory=dict)  # {"sr": int, "seg": int}
    fps: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def class_iou(self):
        return {self.class_names[c]: self.per_class[c]
                for c in range(1, len(self.per_class))}

    def to_json(self):
        return {
            "schema": REPORT_SCHEMA,
            "name": self.name,
            "classes": list(self.class_iou()),  # column order; keys below get sorted
            "per_class": {k: (None if v is None or np.isnan(v) else float(v))
                          for k, v in self.class_iou().items()},
            "miou": float(self.miou),
            "params": dict(self.params),
            "fps": self.fps,
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_json(cls, d):
        order = d.get("classes") or list(d["per_class"])
        names = ["unlabeled"] + order
        per = [float("nan")] + [float("nan") if d["per_class"][c] is None else d["per_class"][c]
                                for c in order]
        return cls(d.get("name", ""), names, per, d["miou"], d.get("params", {}),
                   d.get("fps"), d.get("extra", {}))


def result_from_confusion(name, cm, class_names, params=None, fps=None):
    per, miou = iou(cm)
    return EvalResult(name, list(class_names), [float(v) for v in per], miou,
                      dict(params or {}), fps)


# -- throughput --------------------------------------------------------------


def hardware_string():
    import torch

    return f"{platform.machine()} {platform.processor() or 'cpu'}, torch {torch.__version__}, " \
           f"{torch.get_num_threads()} threads"


def bench_fps(checkpoint, scans, warmup=2, iters=10):
    """Wall-clock throughput of inference on `scans` (cycled).

    `checkpoint` is a Checkpoint, a path, or an already built model.
    """
    import torch.nn as nn

    from .pipeline import build_model, infer_with_model

    if not scans:
        raise DegenerateMetric("bench needs at least one scan")
    if iters < 1:
        raise DegenerateMetric("iters must be >= 1")
    if isinstance(checkpoint, nn.Module):
        model, cfg = checkpoint.eval(), checkpoint.cfg
    else:
        model, cfg = build_model(checkpoint)
    for i in range(warmup):
        infer_with_model(model, cfg, scans[i % len(scans)])
    lat = []
    start = time.perf_counter()
    for i in range(iters):
        t0 = time.perf_counter()
        infer_with_model(model, cfg, scans[i % len(scans)])
        lat.append(time.perf_counter() - t0)
    total = time.perf_counter() - start
    lat_ms = np.array(lat) * 1e3
    return {
        "fps": iters / total,
        "total_time_s": total,
        "iters": iters,
        "latency_ms": {
            "mean": float(lat_ms.mean()),
            "median": float(np.median(lat_ms)),
            "p95": float(np.percentile(lat_ms, 95)),
        },
        "params": model.parameter_counts(),
        "hardware": hardware_string(),
    }


# -- reports -----------------------------------------------------------------


def _fmt_iou(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.4f}"


def _as_list(results):
    if isinstance(results, EvalResult):
        return [results], True
    return list(results), False


def render_report(results, format) -> str:
    """Serialize one EvalResult or a list of them.

    csv: a single result gives `class,iou` rows and a `miou` footer; a list
    gives one header plus one row per configuration.
    """
    if format not in REPORT_FORMATS:
        raise InvalidFormat(f"unknown report format {format!r}; choose from {REPORT_FORMATS}")
    items, single = _as_list(results)
    if format == "json":
        if single:
            payload = items[0].to_json()
        else:
            payload = {"schema": REPORT_SCHEMA, "results": [r.to_json() for r in items]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    classes = list(items[0].class_iou()) if items else []
    if format == "csv":
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        if single:
            wr.writerow(["class", "iou"])
            for k, v in items[0].class_iou().items():
                wr.writerow([k, _fmt_iou(v)])
            wr.writerow(["miou", _fmt_iou(items[0].miou)])
        else:
            wr.writerow(["config", "sr_params", "seg_params", "fps", *classes, "miou"])
            for r in items:
                ious = r.class_iou()
                wr.writerow([r.name, r.params.get("sr", ""), r.params.get("seg", ""),
                             "" if r.fps is None else f"{r.fps:.2f}",
                             *[_fmt_iou(ious.get(c)) for c in classes], _fmt_iou(r.miou)])
        return buf.getvalue()

    def mparams(n):
        return "-" if not n else f"{n / 1e6:.2f}"

    head = ["", "SR Params (M)", "Segmentation Params (M)", "FPS", *classes, "mIoU"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in items:
        ious = r.class_iou()
        row = [r.name, mparams(r.params.get("sr")), mparams(r.params.get("seg")),
               "-" if r.fps is None else f"{r.fps:.1f}",
               *[_fmt_iou(ious.get(c)) or "-" for c in classes], _fmt_iou(r.miou)]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def emit_report(results, format, path):
    text = render_report(results, format)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def load_results(path):
    with open(path) as fh:
        d = json.load(fh)
    if "results" in d:
        return [EvalResult.from_json(r) for r in d["results"]]
    return [EvalResult.from_json(d)]
