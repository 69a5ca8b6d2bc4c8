"""Evaluation metrics over accuracy matrices and raw score tables.

The continual metrics (LS, mS, mU, mH, BWT) are pure functions of the
accuracy matrix R[t][k]: accuracy on task k's target-domain test set under
the snapshot taken after task t. The single-split metrics (mSA, mUA, SUAUC)
read per-example class-score tables and sweep a calibration penalty that is
subtracted from seen-class scores.

mS/mU normalize their inner sums (a plain sum would leave the percentage
scale); the raw-sum variants are available behind ``normalized=False``,
and the same goes for BWT's 1/(T-1) factor.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, TextIO

import numpy as np

REPORT_KEYS = ("LS", "mS", "mU", "mH", "BWT", "mSA", "mUA", "SUAUC",
               "seed", "ablation", "mode")


class UndefinedMetricError(ValueError):
    """The metric is not defined for this input (e.g. mU with a single task)."""


def _check_matrix(matrix: Sequence[Sequence[float]]) -> list[list[float]]:
    rows = [list(map(float, row)) for row in matrix]
    if not rows:
        raise UndefinedMetricError("accuracy matrix is empty")
    t = len(rows)
    for row in rows:
        if len(row) != t:
            raise ValueError(f"accuracy matrix must be square, got row of {len(row)} in {t}x?")
        for v in row:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {v} outside [0, 1]")
    return rows


def last_seen(matrix: Sequence[Sequence[float]]) -> float:
    """Mean accuracy over all tasks under the final snapshot."""
    rows = _check_matrix(matrix)
    final = rows[-1]
    return sum(final) / len(final)


def mean_seen(matrix: Sequence[Sequence[float]], normalized: bool = True) -> float:
    """Average over snapshots of the (mean) accuracy on already-seen tasks."""
    rows = _check_matrix(matrix)
    t_total = len(rows)
    acc = 0.0
    for t in range(t_total):
        inner = sum(rows[t][k] for k in range(t + 1))
        acc += inner / (t + 1) if normalized else inner
    return acc / t_total


def mean_unseen(matrix: Sequence[Sequence[float]], normalized: bool = True) -> float:
    """Average over snapshots of the (mean) accuracy on not-yet-seen tasks."""
    rows = _check_matrix(matrix)
    t_total = len(rows)
    if t_total < 2:
        raise UndefinedMetricError("mean_unseen needs at least two tasks")
    acc = 0.0
    for t in range(t_total - 1):
        inner = sum(rows[t][k] for k in range(t + 1, t_total))
        acc += inner / (t_total - t - 1) if normalized else inner
    return acc / (t_total - 1)


def harmonic(a: float, b: float) -> float:
    """Harmonic mean; zero whenever either side is zero."""
    if a < 0 or b < 0:
        raise ValueError("harmonic mean expects non-negative inputs")
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def backward_transfer(matrix: Sequence[Sequence[float]],
                      normalized: bool = True) -> float:
    """Change in past-task accuracy between learning time and the end of training.

    Negative values indicate forgetting. The final task's self term is
    identically zero and excluded.
    """
    rows = _check_matrix(matrix)
    t_total = len(rows)
    if t_total < 2:
        raise UndefinedMetricError("backward transfer needs at least two tasks")
    total = sum(rows[-1][t] - rows[t][t] for t in range(t_total - 1))
    return total / (t_total - 1) if normalized else total


# ---------------------------------------------------------------------------
# score tables


@dataclass
class ScoreTable:
    """Per-example compatibility scores over one fixed class pool."""

    pool: list[int]
    seen_mask: list[bool]
    scores: np.ndarray        # (N, len(pool))
    true_classes: np.ndarray  # (N,)

    def __post_init__(self):
        self.pool = [int(c) for c in self.pool]
        if sorted(set(self.pool)) != self.pool:
            raise ValueError("pool must be strictly ascending class ids")
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.true_classes = np.asarray(self.true_classes, dtype=np.int64)
        if self.scores.shape != (len(self.true_classes), len(self.pool)):
            raise ValueError(
                f"scores shape {self.scores.shape} does not match "
                f"{len(self.true_classes)} examples x {len(self.pool)} pool classes")
        if len(self.seen_mask) != len(self.pool):
            raise ValueError("seen_mask length must match the pool")

    def seen_classes(self) -> list[int]:
        return [c for c, s in zip(self.pool, self.seen_mask) if s]

    def unseen_classes(self) -> list[int]:
        return [c for c, s in zip(self.pool, self.seen_mask) if not s]


def _predictions(table: ScoreTable, gamma: float = 0.0) -> np.ndarray:
    shifted = table.scores.copy()
    if gamma != 0.0:
        shifted[:, np.asarray(table.seen_mask, dtype=bool)] -= gamma
    # np.argmax takes the first maximum, i.e. the lowest class index on ties.
    return np.asarray(table.pool, dtype=np.int64)[np.argmax(shifted, axis=1)]


def _macro_accuracy(table: ScoreTable, classes: Sequence[int],
                    predictions: np.ndarray, warn_empty: bool) -> float:
    per_class = []
    counts = {}
    for c in classes:
        members = table.true_classes == c
        total = int(members.sum())
        counts[c] = total
        if total == 0:
            continue
        per_class.append(float((predictions[members] == c).sum()) / total)
    if not per_class:
        raise UndefinedMetricError(
            f"no test examples for any of the classes {list(classes)}")
    if warn_empty and len(per_class) < len(list(classes)):
        empty = [c for c, n in counts.items() if n == 0]
        warnings.warn(
            f"classes without test examples excluded from macro accuracy: "
            f"{empty}; per-class counts: {counts}")
    acc = 0.0
    for v in per_class:
        acc += v
    return acc / len(per_class)


def class_macro_accuracy(table: ScoreTable, pool_subset: Sequence[int]) -> float:
    """Mean per-class accuracy over ``pool_subset``; prediction over the full pool."""
    subset = sorted(set(int(c) for c in pool_subset))
    unknown = [c for c in subset if c not in table.pool]
    if unknown:
        raise ValueError(f"classes {unknown} are not in the score-table pool")
    return _macro_accuracy(table, subset, _predictions(table), warn_empty=True)


def default_gamma_grid(table: ScoreTable, points: int = 201) -> np.ndarray:
    """Strictly increasing grid spanning +-(max score span)."""
    span = float(table.scores.max() - table.scores.min())
    if span == 0.0:
        span = 1.0
    return np.linspace(-span, span, points)


def suauc(table: ScoreTable,
          gamma_grid: Optional[Sequence[float]] = None) -> tuple[float, list[tuple[float, float, float]]]:
    """Area under the seen-vs-unseen macro-accuracy curve.

    For each calibration factor gamma, seen-class scores are penalized by
    gamma before the argmax; the resulting (seen, unseen) accuracy points,
    sorted by seen accuracy (descending unseen on ties) and closed with the
    endpoints (0, u_max) and (s_max, 0), are integrated by the trapezoid
    rule. Returns the area and the raw (gamma, seen, unseen) curve points.
    """
    seen = [c for c in table.seen_classes()
            if np.any(table.true_classes == c)]
    unseen = [c for c in table.unseen_classes()
              if np.any(table.true_classes == c)]
    if not seen or not unseen:
        raise UndefinedMetricError(
            "SUAUC needs test examples of both seen and unseen classes")
    if gamma_grid is None:
        gamma_grid = default_gamma_grid(table)
    grid = [float(g) for g in gamma_grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("gamma grid must be strictly increasing")

    points = []
    for gamma in grid:
        preds = _predictions(table, gamma)
        s = _macro_accuracy(table, seen, preds, warn_empty=False)
        u = _macro_accuracy(table, unseen, preds, warn_empty=False)
        points.append((gamma, s, u))

    return _curve_area(points), points


def _curve_area(points: Sequence[tuple[float, float, float]]) -> float:
    curve = sorted(((s, u) for _, s, u in points), key=lambda p: (p[0], -p[1]))
    u_max = max(u for _, u in curve)
    s_max = max(s for s, _ in curve)
    curve = [(0.0, u_max)] + curve + [(s_max, 0.0)]
    curve.sort(key=lambda p: (p[0], -p[1]))
    area = 0.0
    for (s0, u0), (s1, u1) in zip(curve, curve[1:]):
        area += (s1 - s0) * (u0 + u1) / 2.0
    return area


# ---------------------------------------------------------------------------
# serialization


def format_float(v: float) -> str:
    return repr(float(v))


def write_matrix(fh: TextIO, matrix: Sequence[Sequence[float]]) -> None:
    for row in _check_matrix(matrix):
        fh.write(",".join(format_float(v) for v in row) + "\n")


def read_matrix(fh: TextIO) -> list[list[float]]:
    rows = []
    for line in fh:
        line = line.strip()
        if line:
            rows.append([float(p) for p in line.split(",")])
    return _check_matrix(rows)


def report_to_json(report: dict) -> str:
    ordered = {k: report.get(k) for k in REPORT_KEYS}
    return json.dumps(ordered, sort_keys=False, indent=2) + "\n"


def report_from_json(text: str) -> dict:
    return json.loads(text)


def report_to_csv(report: dict) -> str:
    header = ",".join(REPORT_KEYS)
    values = []
    for k in REPORT_KEYS:
        v = report.get(k)
        if v is None:
            values.append("")
        elif isinstance(v, float):
            values.append(format_float(v))
        else:
            values.append(str(v))
    return header + "\n" + ",".join(values) + "\n"


def report_from_csv(text: str) -> dict:
    lines = [l for l in text.splitlines() if l]
    header = lines[0].split(",")
    values = lines[1].split(",")
    out: dict = {}
    for k, v in zip(header, values):
        if v == "":
            out[k] = None
        elif k in ("seed",):
            out[k] = int(v)
        elif k in ("ablation", "mode"):
            out[k] = v
        else:
            out[k] = float(v)
    return out


def write_curve(fh: TextIO, points: Sequence[tuple[float, float, float]]) -> None:
    fh.write("gamma,seen_acc,unseen_acc\n")
    for gamma, s, u in points:
        fh.write(f"{format_float(gamma)},{format_float(s)},{format_float(u)}\n")


def read_curve(fh: TextIO) -> list[tuple[float, float, float]]:
    lines = [l.strip() for l in fh if l.strip()]
    points = []
    for line in lines[1:]:
        g, s, u = line.split(",")
        points.append((float(g), float(s), float(u)))
    return points
