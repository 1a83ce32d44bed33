"""Comparison of TSM methods from a table of predicted OMOS values."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import stdtr

from .metrics import pearson

PRED_FIELDS = ["file", "method", "beta", "class", "omos"]
MIN_BETA = 0.25
VAR_FLOOR = 1e-12


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredPrediction:
    file: str
    method: str
    beta: str
    cls: str
    omos: float
    smos: float | None = None

    def __post_init__(self):
        if not float(self.beta) > 0:
            raise EvaluationError(f"{self.file}: beta must be positive")
        if not 1.0 <= self.omos <= 5.0:
            raise EvaluationError(f"{self.file}: OMOS {self.omos} outside [1, 5]")


def read_predictions(path) -> list[ScoredPrediction]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PRED_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise EvaluationError(f"{path}: missing columns {sorted(missing)}")
        out = []
        for r in reader:
            smos = r.get("smos")
            out.append(ScoredPrediction(r["file"], r["method"], r["beta"].strip(), r["class"], float(r["omos"]),
                                        float(smos) if smos not in (None, "") else None))
    return out


def is_excluded(beta: str) -> bool:
    """Unity scaling and ratios below 0.25 are left out of averages."""
    b = float(beta)
    return b == 1.0 or b < MIN_BETA


def apply_exclusions(preds, exclude: bool = True) -> list[ScoredPrediction]:
    return [p for p in preds if not (exclude and is_excluded(p.beta))]


# -- aggregation -----------------------------------------------------------------------


@dataclass
class MeansTable:
    cells: dict  # (method, beta, class) -> mean OMOS
    by_class: dict  # (method, class) -> mean OMOS
    overall: dict  # method -> mean OMOS
    classes: list

    @property
    def methods(self) -> list[str]:
        """Methods ordered by overall mean, best first."""
        return sorted(self.overall, key=lambda m: (-self.overall[m], m))


def aggregate(preds, exclude: bool = True) -> MeansTable:
    kept = apply_exclusions(preds, exclude)
    if not kept:
        raise EvaluationError("no predictions left after excluding beta == 1 and beta < 0.25")
    cells, by_class, overall = defaultdict(list), defaultdict(list), defaultdict(list)
    for p in kept:
        cells[(p.method, p.beta, p.cls)].append(p.omos)
        by_class[(p.method, p.cls)].append(p.omos)
        overall[p.method].append(p.omos)
    mean = lambda d: {k: math.fsum(v) / len(v) for k, v in d.items()}  # noqa: E731
    return MeansTable(mean(cells), mean(by_class), mean(overall), sorted({p.cls for p in kept}))


def line_data(preds) -> list[dict]:
    """Mean OMOS per method, class and beta (plus an ``All`` class); nothing excluded."""
    groups = defaultdict(list)
    for p in preds:
        groups[(p.method, p.cls, p.beta)].append(p.omos)
        groups[(p.method, "All", p.beta)].append(p.omos)
    rows = []
    for (method, cls, beta), v in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], float(kv[0][2]))):
        rows.append({"method": method, "class": cls, "beta": beta, "mean_omos": math.fsum(v) / len(v), "n": len(v)})
    return rows


# -- significance testing ---------------------------------------------------------------------


@dataclass(frozen=True)
class MethodComparison:
    a: str
    b: str
    t: float
    p: float
    df: float
    reject: bool
    degenerate: bool = False
    mean_diff: float = 0.0


def two_sample_ttest(x, y, equal_var: bool = False) -> tuple[float, float, float, bool]:
    """Two-sided two-sample t-test; Welch's unequal-variance form by default.

    Returns ``(t, p, df, degenerate)``. When both samples have zero variance
    the standard error is floored at ``sqrt(1e-12)`` and ``degenerate`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = len(x), len(y)
    if nx < 2 or ny < 2:
        raise EvaluationError("each group needs at least 2 samples")
    vx, vy = x.var(ddof=1), y.var(ddof=1)
    if equal_var:
        df = nx + ny - 2
        se2 = ((nx - 1) * vx + (ny - 1) * vy) / df * (1 / nx + 1 / ny)
    else:
        ax, ay = vx / nx, vy / ny
        se2 = ax + ay
        denom = ax**2 / (nx - 1) + ay**2 / (ny - 1)
        df = se2**2 / denom if denom > 0 else nx + ny - 2
    degenerate = se2 <= 0
    if degenerate:
        se2 = VAR_FLOOR
    t = (x.mean() - y.mean()) / math.sqrt(se2)
    p = float(min(1.0, 2.0 * stdtr(df, -abs(t))))
    return float(t), p, float(df), bool(degenerate)


@dataclass
class TTestMatrix:
    methods: list
    comparisons: dict  # (a, b) -> MethodComparison
    alpha: float

    def p_matrix(self) -> np.ndarray:
        n = len(self.methods)
        out = np.empty((n, n))
        for i, a in enumerate(self.methods):
            for j, b in enumerate(self.methods):
                out[i, j] = self.comparisons[(a, b)].p
        return out

    def masked(self) -> np.ndarray:
        """p-values where equal means could not be rejected, NaN elsewhere."""
        p = self.p_matrix()
        return np.where(p > self.alpha, p, np.nan)


def ttest_matrix(preds, alpha: float = 0.05, exclude: bool = True, equal_var: bool = False) -> TTestMatrix:
    """Pairwise tests between methods pooling every (non-excluded) OMOS of each method."""
    groups = defaultdict(list)
    for p in apply_exclusions(preds, exclude):
        groups[p.method].append(p.omos)
    for m, v in groups.items():
        if len(v) < 2:
            raise EvaluationError(f"method {m!r} has fewer than 2 predictions")
    methods = sorted(groups, key=lambda m: (-np.mean(groups[m]), m))
    comps = {}
    for i, a in enumerate(methods):
        for b in methods[i:]:
            if a == b:
                n = len(groups[a])
                comps[(a, a)] = MethodComparison(a, a, 0.0, 1.0, float(2 * n - 2), False)
                continue
            t, p, df, degen = two_sample_ttest(groups[a], groups[b], equal_var)
            diff = float(np.mean(groups[a]) - np.mean(groups[b]))
            comps[(a, b)] = MethodComparison(a, b, t, p, df, p <= alpha, degen, diff)
            comps[(b, a)] = MethodComparison(b, a, -t, p, df, p <= alpha, degen, -diff)
    return TTestMatrix(methods, comps, alpha)


def ttest_by_class(preds, alpha: float = 0.05, exclude: bool = True, equal_var: bool = False) -> dict:
    classes = sorted({p.cls for p in preds})
    return {c: ttest_matrix([p for p in preds if p.cls == c], alpha, exclude, equal_var) for c in classes}


def rejection_by_difference(matrix: TTestMatrix, threshold: float) -> tuple[int, int]:
    """(rejected, total) over distinct pairs whose absolute mean difference exceeds ``threshold``."""
    rejected = total = 0
    for i, a in enumerate(matrix.methods):
        for b in matrix.methods[i + 1 :]:
            c = matrix.comparisons[(a, b)]
            if abs(c.mean_diff) > threshold:
                total += 1
                rejected += c.reject
    return rejected, total


# -- distributions ---------------------------------------------------------------------------------


def mos_bin_edges(width: float = 0.25) -> np.ndarray:
    n = int(round(4.0 / width))
    return np.linspace(1.0, 5.0, n + 1)


def frames_per_mos(smos, frame_counts, width: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Total frame count per SMOS bin over [1, 5]; the last bin includes 5."""
    edges = mos_bin_edges(width)
    smos = np.asarray(smos, dtype=np.float64)
    counts = np.asarray(frame_counts, dtype=np.float64)
    if smos.shape != counts.shape:
        raise EvaluationError("need one frame count per SMOS value")
    hist, _ = np.histogram(smos, bins=edges, weights=counts)
    return edges, hist


def omos_confusion(x, y, bins: int = 16) -> tuple[np.ndarray, np.ndarray, float]:
    """Joint histogram of two score sets over [1, 5]^2 and their Pearson correlation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise EvaluationError(f"length mismatch {x.shape} vs {y.shape}")
    edges = np.linspace(1.0, 5.0, bins + 1)
    hist, _, _ = np.histogram2d(x, y, bins=[edges, edges])
    return hist, edges, pearson(x, y)


# -- report files -----------------------------------------------------------------------------------


def write_report(preds, out_dir, alpha: float = 0.05, equal_var: bool = False) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = aggregate(preds)
    with open(out / "means.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *table.classes, "overall"])
        for m in table.methods:
            w.writerow([m, *[_f(table.by_class.get((m, c))) for c in table.classes], _f(table.overall[m])])
    with open(out / "means_by_beta.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "beta", "class", "mean_omos"])
        for (m, b, c), v in sorted(table.cells.items(), key=lambda kv: (kv[0][0], float(kv[0][1]), kv[0][2])):
            w.writerow([m, b, c, _f(v)])
    mat = ttest_matrix(preds, alpha, equal_var=equal_var)
    masked = mat.masked()
    with open(out / "pvalues_masked.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *mat.methods])
        for i, m in enumerate(mat.methods):
            w.writerow([m, *["" if np.isnan(v) else _f(v) for v in masked[i]]])
    with open(out / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method_a", "method_b", "mean_diff", "t", "p", "reject", "degenerate"])
        for i, a in enumerate(mat.methods):
            for b in mat.methods[i + 1 :]:
                c = mat.comparisons[(a, b)]
                w.writerow([a, b, _f(c.mean_diff), _f(c.t), _f(c.p), int(c.reject), int(c.degenerate)])
    with open(out / "line_data.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "class", "beta", "mean_omos", "n"])
        w.writeheader()
        for row in line_data(preds):
            w.writerow({**row, "mean_omos": _f(row["mean_omos"])})
    summary = {"methods": mat.methods, "alpha": alpha}
    scored = [p for p in preds if p.smos is not None]
    if len(scored) >= 2:
        summary["pearson_omos_smos"] = pearson([p.omos for p in scored], [p.smos for p in scored])
    return summary


def _f(v):
    return "" if v is None else repr(float(v))
