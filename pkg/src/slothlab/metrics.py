"""Early-exit capability (EEC) curves, efficacy and evaluation reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exitpolicy import ExitPolicy, InferenceRecord, infer_batch
from .multiexit import MultiExitNetwork

GRID_SIZE = 1001


@dataclass
class EECCurve:
    grid: np.ndarray
    values: np.ndarray

    def validate(self) -> None:
        if self.grid.shape != self.values.shape or self.grid.size < 2:
            raise ValueError("curve grid and values must be equal-length with at least two points")
        if self.grid[0] != 0.0 or self.grid[-1] != 1.0 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("curve grid must increase strictly from 0 to 1")
        if np.any(np.diff(self.values) < 0) or self.values.min() < 0 or self.values[-1] != 1.0:
            raise ValueError("curve values must be a non-decreasing CDF ending at 1")


@dataclass
class EvalReport:
    tag: str
    efficacy: float
    accuracy: float
    per_exit_counts: list[int]
    mean_cost_fraction: float
    n: int
    crafting_seconds: float | None = None
    curve: EECCurve | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {"tag": self.tag, "efficacy": self.efficacy, "accuracy": self.accuracy,
                "mean_cost": self.mean_cost_fraction, "n": self.n}


def _costs(records) -> np.ndarray:
    if len(records) and isinstance(records[0], InferenceRecord):
        return np.array([r.cost_fraction for r in records], dtype=np.float64)
    return np.asarray(records, dtype=np.float64)


def build_eec(records, grid_size: int = GRID_SIZE) -> EECCurve:
    """Right-continuous empirical CDF of per-sample cost fractions on a uniform grid.

    ``records`` may be InferenceRecords or raw cost fractions.
    """
    costs = _costs(records)
    if costs.size == 0:
        raise ValueError("cannot build an EEC curve from zero records")
    grid = np.linspace(0.0, 1.0, grid_size)
    values = np.searchsorted(np.sort(costs), grid, side="right") / costs.size
    return EECCurve(grid, values)


def efficacy(curve: EECCurve) -> float:
    """Area under the EEC curve by the trapezoidal rule."""
    curve.validate()
    return float(np.trapezoid(curve.values, curve.grid))


def summarize(records: list[InferenceRecord], labels, K: int, tag: str = "",
              crafting_seconds: float | None = None) -> EvalReport:
    labels = np.asarray(labels)
    preds = np.array([r.predicted_label for r in records])
    curve = build_eec(records)
    counts = np.bincount([r.exit_index - 1 for r in records], minlength=K)
    return EvalReport(
        tag=tag,
        efficacy=efficacy(curve),
        accuracy=float(np.mean(preds == labels)),
        per_exit_counts=[int(c) for c in counts],
        mean_cost_fraction=float(np.mean(_costs(records))),
        n=len(records),
        crafting_seconds=crafting_seconds,
        curve=curve,
    )


def evaluate(net: MultiExitNetwork, policy: ExitPolicy, X, y, tag: str = "",
             crafting_seconds: float | None = None) -> EvalReport:
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= net.num_classes):
        raise ValueError("label out of range")
    records = infer_batch(net, policy, X)
    return summarize(records, y, net.K, tag, crafting_seconds)


def write_eec_csv(curve: EECCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cost_fraction", "cumulative_fraction"])
        for c, v in zip(curve.grid, curve.values):
            w.writerow([repr(float(c)), repr(float(v))])


def read_eec_csv(path) -> EECCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return EECCurve(np.array([float(r["cost_fraction"]) for r in rows]),
                    np.array([float(r["cumulative_fraction"]) for r in rows]))


REPORT_HEADER = ["tag", "efficacy", "accuracy", "mean_cost", "n"]


def write_reports_csv(reports: list[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow([r.tag, repr(r.efficacy), repr(r.accuracy), repr(r.mean_cost_fraction), r.n])


def read_reports_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return [
            {"tag": r["tag"], "efficacy": float(r["efficacy"]), "accuracy": float(r["accuracy"]),
             "mean_cost": float(r["mean_cost"]), "n": int(r["n"])}
            for r in csv.DictReader(fh)
        ]
