"""Loss/correlation metrics and the overall-distance model selection score."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

SPLITS = ("train", "val", "test")
REPORT_FIELDS = ["seed", "epoch", "rho_tr", "rho_val", "rho_te", "L_tr", "L_val", "L_te", "D"]


class MetricError(ValueError):
    pass


def rmse(est, tgt) -> float:
    est = np.asarray(est, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if est.shape != tgt.shape:
        raise MetricError(f"length mismatch {est.shape} vs {tgt.shape}")
    if est.size == 0:
        raise MetricError("rmse of empty input")
    return float(np.sqrt(np.mean((est - tgt) ** 2)))


def pearson(x, y) -> float:
    """Sample Pearson correlation; raises on constant input instead of returning 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"length mismatch {x.shape} vs {y.shape}")
    if x.size < 2:
        raise MetricError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise MetricError("pearson is undefined for constant input")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


@dataclass(frozen=True)
class SplitMetrics:
    """Pearson and RMSE (on the 1-5 scale) for train, validation and test."""

    rho: tuple[float, float, float]
    loss: tuple[float, float, float]

    def __post_init__(self):
        if len(self.rho) != 3 or len(self.loss) != 3:
            raise MetricError("need exactly three splits")
        for r in self.rho:
            if not (-1.0 <= r <= 1.0) and not math.isnan(r):
                raise MetricError(f"correlation {r} outside [-1, 1]")
        for v in self.loss:
            if v < 0:
                raise MetricError(f"negative loss {v}")


def rho_hat(rho) -> float:
    rho = np.asarray(rho, dtype=np.float64)
    return math.hypot(1.0 - rho.mean(), rho.max() - rho.min())


def loss_hat(loss) -> float:
    loss = np.asarray(loss, dtype=np.float64)
    return math.hypot(loss.mean(), loss.max() - loss.min())


def overall_distance(m: SplitMetrics) -> float:
    """Euclidean norm of the correlation and loss penalties.

    Each penalty combines the mean over splits with the spread
    (max - min) across splits, so over-fitting is penalized.
    """
    return math.hypot(rho_hat(m.rho), loss_hat(m.loss))


@dataclass(frozen=True)
class SelectionRecord:
    seed: int
    epoch: int
    metrics: SplitMetrics

    @property
    def distance(self) -> float:
        return overall_distance(self.metrics)

    def row(self) -> dict:
        r, l = self.metrics.rho, self.metrics.loss
        return {
            "seed": self.seed, "epoch": self.epoch,
            "rho_tr": r[0], "rho_val": r[1], "rho_te": r[2],
            "L_tr": l[0], "L_val": l[1], "L_te": l[2],
            "D": self.distance,
        }


def select_best(records) -> SelectionRecord:
    """Argmin of the overall distance; ties go to the earliest epoch, then lowest seed.

    Records whose distance is NaN (e.g. undefined correlation) are skipped.
    """
    records = list(records)
    if not records:
        raise MetricError("no epochs recorded")
    valid = [r for r in records if not math.isnan(r.distance)]
    if not valid:
        raise MetricError("every recorded epoch has an undefined distance")
    return min(valid, key=lambda r: (r.distance, r.epoch, r.seed))


def write_selection_report(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for rec in records:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.row().items()})


def read_selection_report(path) -> list[SelectionRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(SelectionRecord(
                int(row["seed"]), int(row["epoch"]),
                SplitMetrics(
                    (float(row["rho_tr"]), float(row["rho_val"]), float(row["rho_te"])),
                    (float(row["L_tr"]), float(row["L_val"]), float(row["L_te"])),
                ),
            ))
    return out
