"""Per-image confusion counts, the five segmentation metrics, failure
classification, and fold-wise aggregation.

Metric conventions: a 0/0 denominator resolves to 1 when both operand
sets (foreground for overlap metrics, background for specificity) are
empty, and to 0 otherwise. Both the binarization threshold and the
failure floor are harness definitions and can be overridden.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

METRIC_NAMES = ("jaccard", "precision", "recall", "specificity", "dice")

DEFAULT_THRESHOLD = 0.5
DEFAULT_JACCARD_FLOOR = 0.05


def binarize(prob_map: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Strict threshold: 1 where value > threshold, else 0."""
    return (np.asarray(prob_map) > threshold).astype(np.uint8)


@dataclass
class MetricRecord:
    """Confusion counts and derived metrics for one image."""

    id: str
    tp: int
    fp: int
    fn: int
    tn: int
    jaccard: float
    precision: float
    recall: float
    specificity: float
    dice: float
    fold: int | None = None

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def evaluate(pred_bin: np.ndarray, gt_bin: np.ndarray, id: str = "",
             fold: int | None = None) -> MetricRecord:
    """Compute the five metrics from binary prediction and ground truth."""
    pred = np.asarray(pred_bin)
    gt = np.asarray(gt_bin)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        vals = np.unique(arr)
        if not np.isin(vals, (0, 1)).all():
            raise DataError(f"{name} is not binary; found values {vals[:5]}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))

    fg_empty = tp + fp == 0 and tp + fn == 0     # neither mask has foreground
    bg_empty = tn + fn == 0 and tn + fp == 0     # neither mask has background
    return MetricRecord(
        id=id,
        fold=fold,
        tp=tp, fp=fp, fn=fn, tn=tn,
        jaccard=_ratio(tp, tp + fp + fn, fg_empty),
        precision=_ratio(tp, tp + fp, fg_empty),
        recall=_ratio(tp, tp + fn, fg_empty),
        specificity=_ratio(tn, tn + fp, bg_empty),
        dice=_ratio(2 * tp, 2 * tp + fp + fn, fg_empty),
    )


def is_failure(record: MetricRecord, jaccard_floor: float = DEFAULT_JACCARD_FLOOR) -> bool:
    """A segmentation fails when its Jaccard falls below the floor."""
    return record.jaccard < jaccard_floor


@dataclass
class AggregateSummary:
    """Mean +- std per metric plus the failure rate.

    `by_fold` averages per-image metrics within each fold and reports
    mean and population std across the fold means; `by_image` reports
    mean and population std straight across images.
    """

    n_images: int
    n_folds: int
    fold_means: dict[int, dict[str, float]]
    by_fold: dict[str, tuple[float, float]]
    by_image: dict[str, tuple[float, float]]
    n_failures: int
    failure_rate: float
    jaccard_floor: float


def aggregate(records: list[MetricRecord],
              jaccard_floor: float = DEFAULT_JACCARD_FLOOR) -> AggregateSummary:
    """Aggregate per-image records into per-fold and pooled statistics."""
    if not records:
        raise DataError("cannot aggregate an empty record list")
    folds: dict[int, list[MetricRecord]] = {}
    for rec in records:
        folds.setdefault(rec.fold if rec.fold is not None else 0, []).append(rec)

    fold_means = {
        fold: {name: float(np.mean([getattr(r, name) for r in recs])) for name in METRIC_NAMES}
        for fold, recs in sorted(folds.items())
    }
    by_fold = {}
    for name in METRIC_NAMES:
        means = np.array([fm[name] for fm in fold_means.values()])
        by_fold[name] = (float(means.mean()), float(means.std()))
    by_image = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in records])
        by_image[name] = (float(vals.mean()), float(vals.std()))
    n_failures = sum(is_failure(r, jaccard_floor) for r in records)
    return AggregateSummary(
        n_images=len(records),
        n_folds=len(folds),
        fold_means=fold_means,
        by_fold=by_fold,
        by_image=by_image,
        n_failures=n_failures,
        failure_rate=n_failures / len(records),
        jaccard_floor=jaccard_floor,
    )


RECORD_COLUMNS = ("id", "fold", "TP", "FP", "FN", "TN",
                  "jaccard", "precision", "recall", "specificity", "dice", "failure")


def records_to_csv(records: list[MetricRecord],
                   jaccard_floor: float = DEFAULT_JACCARD_FLOOR,
                   header_comment: str | None = None) -> str:
    """Render records as CSV (one row per image)."""
    out = io.StringIO()
    if header_comment:
        out.write(f"# {header_comment}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for r in records:
        writer.writerow([
            r.id, "" if r.fold is None else r.fold, r.tp, r.fp, r.fn, r.tn,
            f"{r.jaccard:.6f}", f"{r.precision:.6f}", f"{r.recall:.6f}",
            f"{r.specificity:.6f}", f"{r.dice:.6f}",
            int(is_failure(r, jaccard_floor)),
        ])
    return out.getvalue()


def records_from_csv(text: str) -> list[MetricRecord]:
    """Parse records written by records_to_csv."""
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    reader = csv.DictReader(rows)
    records = []
    for row in reader:
        records.append(MetricRecord(
            id=row["id"],
            fold=int(row["fold"]) if row["fold"] != "" else None,
            tp=int(row["TP"]), fp=int(row["FP"]), fn=int(row["FN"]), tn=int(row["TN"]),
            jaccard=float(row["jaccard"]), precision=float(row["precision"]),
            recall=float(row["recall"]), specificity=float(row["specificity"]),
            dice=float(row["dice"]),
        ))
    return records


@dataclass
class EvalReport:
    """Evaluation result of one method: per-image records plus aggregates."""

    method: str
    records: list[MetricRecord]
    config_fingerprint: str = ""
    fold_plan_fingerprint: str = ""
    jaccard_floor: float = DEFAULT_JACCARD_FLOOR
    notes: dict = field(default_factory=dict)

    @property
    def summary(self) -> AggregateSummary:
        return aggregate(self.records, self.jaccard_floor)

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        comment = (f"method={self.method} config={self.config_fingerprint} "
                   f"folds={self.fold_plan_fingerprint}")
        (out_dir / "records.csv").write_text(
            records_to_csv(self.records, self.jaccard_floor, header_comment=comment))
        s = self.summary
        payload = {
            "method": self.method,
            "config_fingerprint": self.config_fingerprint,
            "fold_plan_fingerprint": self.fold_plan_fingerprint,
            "jaccard_floor": self.jaccard_floor,
            "n_images": s.n_images,
            "n_folds": s.n_folds,
            "by_fold": {k: list(v) for k, v in s.by_fold.items()},
            "by_image": {k: list(v) for k, v in s.by_image.items()},
            "failure_rate": s.failure_rate,
            "notes": self.notes,
        }
        (out_dir / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, out_dir: str | Path) -> "EvalReport":
        out_dir = Path(out_dir)
        payload = json.loads((out_dir / "summary.json").read_text())
        records = records_from_csv((out_dir / "records.csv").read_text())
        return cls(
            method=payload["method"],
            records=records,
            config_fingerprint=payload.get("config_fingerprint", ""),
            fold_plan_fingerprint=payload.get("fold_plan_fingerprint", ""),
            jaccard_floor=payload.get("jaccard_floor", DEFAULT_JACCARD_FLOOR),
            notes=payload.get("notes", {}),
        )


def format_mean_std(mean: float, std: float, percent: bool = True) -> str:
    if percent:
        return f"{100 * mean:.2f} ± {100 * std:.2f}"
    return f"{mean:.4f} ± {std:.4f}"
