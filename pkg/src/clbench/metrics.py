"""Accuracy matrix, average accuracy and average forgetting.

Indices follow the usual notation: ``a[t][i]`` is the accuracy on task ``i``
after training task ``t``, both 1-based, with ``i <= t``. Entries are kept
as exact fractions until they are reported.
"""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DataError, ProtocolViolation, StateError


def accuracy(preds, labels) -> Fraction:
    preds = np.asarray(preds).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if preds.shape != labels.shape:
        raise DataError(f"{preds.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise DataError("accuracy of an empty set is undefined")
    return Fraction(int(np.sum(preds == labels)), int(labels.size))


class AccuracyMatrix:
    def __init__(self, tasks: Optional[int] = None):
        self.tasks = tasks
        self._rows: List[List[Optional[Fraction]]] = []

    @property
    def T(self) -> int:
        return len(self._rows)

    def _ensure_row(self, t: int) -> None:
        if self.tasks is not None and t > self.tasks:
            raise ProtocolViolation(f"task {t} exceeds the scenario length {self.tasks}")
        while len(self._rows) < t:
            self._rows.append([None] * (len(self._rows) + 1))

    def record_entry(self, t: int, i: int, value) -> "AccuracyMatrix":
        if not (1 <= i <= t):
            raise ProtocolViolation(f"a[{t},{i}] is outside the lower triangle")
        self._ensure_row(t)
        if self._rows[t - 1][i - 1] is not None:
            raise ProtocolViolation(f"a[{t},{i}] has already been recorded")
        value = Fraction(value)
        if not 0 <= value <= 1:
            raise DataError(f"accuracy {float(value)} outside [0, 1]")
        self._rows[t - 1][i - 1] = value
        return self

    def get(self, t: int, i: int) -> Fraction:
        try:
            v = self._rows[t - 1][i - 1]
        except IndexError:
            v = None
        if v is None or t < 1 or i < 1:
            raise StateError(f"a[{t},{i}] has not been recorded")
        return v

    def row_complete(self, t: int) -> bool:
        return 1 <= t <= self.T and all(v is not None for v in self._rows[t - 1])

    def complete(self) -> bool:
        return self.T > 0 and all(self.row_complete(t) for t in range(1, self.T + 1))

    def rows(self) -> List[List[Fraction]]:
        return [list(r) for r in self._rows]

    def as_floats(self) -> List[List[Optional[float]]]:
        return [[None if v is None else float(v) for v in r] for r in self._rows]

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence]) -> "AccuracyMatrix":
        m = cls()
        for t, row in enumerate(rows, start=1):
            if len(row) != t:
                raise DataError(f"row {t} has {len(row)} entries; a lower-triangular row needs {t}")
            for i, v in enumerate(row, start=1):
                m.record_entry(t, i, v)
        return m

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and self._rows == other._rows


def record_entry(m: AccuracyMatrix, t: int, i: int, value) -> AccuracyMatrix:
    return m.record_entry(t, i, value)


def average_accuracy(m: AccuracyMatrix, t: Optional[int] = None) -> float:
    """A_t = mean of row t."""
    t = m.T if t is None else t
    if not m.row_complete(t):
        raise StateError(f"row {t} of the accuracy matrix is incomplete")
    row = m.rows()[t - 1]
    return float(sum(row, Fraction(0)) / t)


def average_forgetting(m: AccuracyMatrix) -> float:
    """F = 1/(T-1) * sum_{i<T} max_{t<T} (a[t,i] - a[T,i]); may be negative."""
    T = m.T
    if T < 2:
        raise StateError("forgetting needs at least two tasks")
    if not m.complete():
        raise StateError("accuracy matrix is incomplete")
    total = Fraction(0)
    for i in range(1, T):
        final = m.get(T, i)
        total += max(m.get(t, i) - final for t in range(i, T))
    return float(total / (T - 1))


@dataclass
class RunRecord:
    scenario: Dict
    strategy: str
    seed: int
    matrix: AccuracyMatrix
    wall_clock_s: List[Optional[float]] = field(default_factory=list)
    status: str = "complete"
    error: Optional[str] = None

    @property
    def avg_accuracy(self) -> List[float]:
        return [average_accuracy(self.matrix, t) for t in range(1, self.matrix.T + 1)
                if self.matrix.row_complete(t)]

    @property
    def forgetting(self) -> Optional[float]:
        if self.matrix.T < 2 or not self.matrix.complete():
            return None
        return average_forgetting(self.matrix)

    @property
    def final_accuracy(self) -> Optional[float]:
        acc = self.avg_accuracy
        return acc[-1] if acc else None

    def to_json(self) -> Dict:
        return {
            "scenario": self.scenario,
            "strategy": self.strategy,
            "seed": self.seed,
            "status": self.status,
            "error": self.error,
            "matrix": self.matrix.as_floats(),
            "matrix_counts": [[None if v is None else [v.numerator, v.denominator] for v in r]
                              for r in self.matrix.rows()],
            "avg_accuracy": self.avg_accuracy,
            "forgetting": self.forgetting,
            "wall_clock_s": self.wall_clock_s,
        }

    @classmethod
    def from_json(cls, obj: Dict) -> "RunRecord":
        m = AccuracyMatrix()
        for t, row in enumerate(obj["matrix_counts"], start=1):
            m._ensure_row(t)
            for i, cell in enumerate(row, start=1):
                if cell is not None:
                    m.record_entry(t, i, Fraction(cell[0], cell[1]))
        return cls(obj["scenario"], obj["strategy"], obj["seed"], m, list(obj.get("wall_clock_s", [])),
                   obj.get("status", "complete"), obj.get("error"))

    def __eq__(self, other):
        if not isinstance(other, RunRecord):
            return NotImplemented
        return self.to_json() == other.to_json()


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def matrix_csv(m: AccuracyMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in m.as_floats():
        writer.writerow(["" if v is None else repr(v) for v in row] + [""] * (m.T - len(row)))
    return buf.getvalue()


def read_matrix_csv(path) -> AccuracyMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    m = AccuracyMatrix()
    for t, row in enumerate(rows, start=1):
        for i, cell in enumerate(row[:t], start=1):
            if cell.strip():
                m.record_entry(t, i, float(cell))
            else:
                m._ensure_row(t)
    return m


def emit_results(record: RunRecord, directory) -> Dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"results": d / "results.json", "matrix": d / "matrix.csv", "running_avg": d / "running_avg.csv"}
    paths["results"].write_text(_dumps(record.to_json()), encoding="utf-8", newline="\n")
    paths["matrix"].write_text(matrix_csv(record.matrix), encoding="utf-8", newline="\n")
    lines = ["t,avg_accuracy"] + [f"{t},{a!r}" for t, a in enumerate(record.avg_accuracy, start=1)]
    paths["running_avg"].write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return paths


def _mean_std(values: Sequence[float]) -> Dict:
    values = [v for v in values if v is not None]
    if not values:
        return {"mean": None, "std": None, "n": 0}
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return {"mean": math.fsum(values) / len(values), "std": std, "n": len(values)}


def aggregate(records: Sequence[RunRecord]) -> Dict:
    """Mean and sample standard deviation of the final A_T and F across seeds."""
    done = [r for r in records if r.status == "complete"]
    return {
        "strategy": records[0].strategy if records else None,
        "scenario": records[0].scenario if records else None,
        "seeds": [r.seed for r in done],
        "failed_seeds": [r.seed for r in records if r.status != "complete"],
        "statistic": "mean and sample standard deviation across seeds",
        "final_avg_accuracy": _mean_std([r.final_accuracy for r in done]),
        "forgetting": _mean_std([r.forgetting for r in done]),
    }


def emit_aggregate(records: Sequence[RunRecord], directory) -> Path:
    path = Path(directory) / "aggregate.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dumps(aggregate(records)), encoding="utf-8", newline="\n")
    return path
