"""Pixel-wise segmentation metrics and result summaries.

Empty-vs-empty masks count as perfect agreement (precision = recall =
dice = 1); summaries use the population standard deviation.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    dice: float


@dataclass(frozen=True)
class Summary:
    n: int
    precision_mean: float
    precision_std: float
    recall_mean: float
    recall_std: float
    dice_mean: float
    dice_std: float
    histogram: np.ndarray  # fraction of cases with dice >= t, t = 0.00..1.00


def prf_dice(pred: np.ndarray, gt: np.ndarray) -> Metrics:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    if tp + fp + fn == 0:
        return Metrics(tp=0, fp=0, fn=0, precision=1.0, recall=1.0, dice=1.0)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    dice = 2.0 * tp / (2.0 * tp + fp + fn)
    return Metrics(tp=tp, fp=fp, fn=fn, precision=precision, recall=recall,
                   dice=dice)


def summarize(metrics: list[Metrics]) -> Summary:
    if not metrics:
        raise ValueError("cannot summarize an empty list")
    pr = np.array([m.precision for m in metrics])
    rc = np.array([m.recall for m in metrics])
    dc = np.array([m.dice for m in metrics])
    thresholds = np.round(np.arange(101) * 0.01, 2)
    hist = np.array([(dc >= t).mean() for t in thresholds])
    return Summary(n=len(metrics),
                   precision_mean=float(pr.mean()), precision_std=float(pr.std()),
                   recall_mean=float(rc.mean()), recall_std=float(rc.std()),
                   dice_mean=float(dc.mean()), dice_std=float(dc.std()),
                   histogram=hist)


def metrics_csv(rows: list[tuple[str, Metrics]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "tp", "fp", "fn", "precision", "recall", "dice"])
    for sid, m in rows:
        w.writerow([sid, m.tp, m.fp, m.fn, f"{m.precision:.10g}",
                    f"{m.recall:.10g}", f"{m.dice:.10g}"])
    return buf.getvalue()


def histogram_csv(summary: Summary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "fraction_at_or_above"])
    for i, frac in enumerate(summary.histogram):
        w.writerow([f"{i * 0.01:.2f}", f"{frac:.10g}"])
    return buf.getvalue()


def summary_json(summary: Summary) -> str:
    return json.dumps({
        "n": summary.n,
        "precision": {"mean": summary.precision_mean,
                      "std": summary.precision_std},
        "recall": {"mean": summary.recall_mean, "std": summary.recall_std},
        "dice": {"mean": summary.dice_mean, "std": summary.dice_std},
    }, sort_keys=True, indent=2) + "\n"
