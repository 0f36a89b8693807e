"""Count-error metrics and the bushels-per-acre yield estimate."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

from .groundtruth import load_points

YIELD_CONSTANT = 0.48
DEFAULT_KERNELS_PER_HEAD = 22.0
COUNT_SOURCES = ("avg", "density", "peak")


@dataclass
class EvalReport:
    n_images: int
    mae: float
    rmse: float
    pct_error: float
    rows: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "mae": self.mae,
            "rmse": self.rmse,
            "pct_error": self.pct_error,
            "rows": self.rows,
        }

    def text_table(self) -> str:
        lines = [
            f"{'image':<24} {'pred':>10} {'gt':>8} {'abs_err':>9}",
            "-" * 54,
        ]
        for r in self.rows:
            lines.append(
                f"{r['id']:<24} {r['pred']:>10.2f} {r['gt']:>8.1f} "
                f"{r['abs_err']:>9.2f}"
            )
        lines.append("-" * 54)
        lines.append(
            f"n={self.n_images}  MAE={self.mae:.4f}  RMSE={self.rmse:.4f}  "
            f"pct_error={self.pct_error:.4f} ({self.pct_error * 100:.2f}%)"
        )
        return "\n".join(lines)


@dataclass
class YieldInput:
    heads_per_foot: float
    kernels_per_head: float = DEFAULT_KERNELS_PER_HEAD
    row_spacing_inches: float = 12.0

    def __post_init__(self):
        for name in ("heads_per_foot", "kernels_per_head",
                     "row_spacing_inches"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if not 5.0 <= self.row_spacing_inches <= 40.0:
            warnings.warn(
                f"row spacing {self.row_spacing_inches} in is outside the "
                f"usual field range [5, 40]"
            )


def mae(preds, gts) -> float:
    preds, gts = list(preds), list(gts)
    if not preds:
        raise ValueError("empty prediction list")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} truths")
    return sum(abs(p - g) for p, g in zip(preds, gts)) / len(preds)


def rmse(preds, gts) -> float:
    preds, gts = list(preds), list(gts)
    if not preds:
        raise ValueError("empty prediction list")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} truths")
    return math.sqrt(
        sum((p - g) ** 2 for p, g in zip(preds, gts)) / len(preds)
    )


def percentage_error(mae_value: float, n_images: int,
                     total_gt: float) -> float:
    """mae * n / total ground-truth count, as a fraction."""
    if total_gt <= 0:
        raise ValueError("total ground-truth count must be positive")
    return mae_value * n_images / total_gt


def yield_estimate(y: YieldInput) -> float:
    """(heads/ft * kernels/head) / row spacing * 0.48, in bu/acre."""
    return (
        y.heads_per_foot * y.kernels_per_head / y.row_spacing_inches
        * YIELD_CONSTANT
    )


def evaluate(predictions, annotations, count_source: str = "avg") -> EvalReport:
    """Score prediction records against point annotations.

    predictions: path to a JSON list of records as written by the infer
    command, or the list itself. annotations: path to a points file
    (CSV/JSON) or a {image_id: points} mapping. Every prediction must
    have a matching annotation id. count_source picks which predicted
    count is scored: avg (default), density, or peak.
    """
    if count_source not in COUNT_SOURCES:
        raise ValueError(
            f"count_source must be one of {COUNT_SOURCES}, "
            f"got {count_source!r}"
        )
    if isinstance(predictions, (str, bytes)) or hasattr(predictions, "read"):
        with open(predictions) as fh:
            predictions = json.load(fh)
    if not isinstance(annotations, dict):
        annotations = load_points(annotations)
    key = {"avg": "avg_count", "density": "density_count",
           "peak": "peak_count"}[count_source]

    unmatched = sorted(
        {p["image_id"] for p in predictions} - set(annotations)
    )
    if unmatched:
        raise ValueError(f"predictions without ground truth: {unmatched}")
    if not predictions:
        raise ValueError("no predictions to evaluate")

    rows = []
    for p in sorted(predictions, key=lambda r: r["image_id"]):
        pred = float(p[key])
        gt = float(len(annotations[p["image_id"]]))
        rows.append(
            {
                "id": p["image_id"],
                "pred": pred,
                "gt": gt,
                "abs_err": abs(pred - gt),
            }
        )
    preds = [r["pred"] for r in rows]
    gts = [r["gt"] for r in rows]
    m = mae(preds, gts)
    total_gt = sum(gts)
    return EvalReport(
        n_images=len(rows),
        mae=m,
        rmse=rmse(preds, gts),
        pct_error=percentage_error(m, len(rows), total_gt),
        rows=rows,
    )
