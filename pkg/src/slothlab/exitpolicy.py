"""Stopping criteria, adaptive inference and RAD-constrained threshold calibration."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .multiexit import MultiExitNetwork, forward_all_exits, iter_exit_logits
from .tensorcore import check_finite, entropy, softmax

CRITERIA = ("confidence", "entropy")


@dataclass
class ExitPolicy:
    """Per-exit thresholds; ``None`` means the exit never fires.

    The final exit always fires regardless of its threshold.
    """

    criterion: str
    thresholds: list
    rad_budget: float | None = None
    holdout_accuracy: float | None = None
    full_accuracy: float | None = None
    holdout_efficacy: float | None = None
    feasible: bool = True

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        for t in self.thresholds:
            if t is None:
                continue
            if self.criterion == "confidence" and not 0.0 <= t <= 1.0:
                raise ValueError(f"confidence threshold {t} outside [0, 1]")
            if self.criterion == "entropy" and not t >= 0.0:
                raise ValueError(f"entropy threshold {t} is negative")

    @classmethod
    def never(cls, criterion: str, K: int) -> "ExitPolicy":
        return cls(criterion, [None] * K)

    @classmethod
    def shared(cls, criterion: str, K: int, threshold: float) -> "ExitPolicy":
        return cls(criterion, [float(threshold)] * K)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ExitPolicy":
        return cls(**d)


@dataclass
class InferenceRecord:
    exit_index: int  # 1-based
    cost_fraction: float
    predicted_label: int
    score: float


def exit_score(logits, criterion: str):
    p = softmax(logits)
    if criterion == "confidence":
        return p.max(axis=-1)
    if criterion == "entropy":
        return entropy(p)
    raise ValueError(f"unknown criterion {criterion!r}")


def should_stop(logits, criterion: str, threshold) -> bool:
    check_finite(np.asarray(logits, dtype=np.float64), "logits")
    if threshold is None:
        return False
    score = float(exit_score(logits, criterion))
    return score >= threshold if criterion == "confidence" else score <= threshold


def adaptive_infer(net: MultiExitNetwork, policy: ExitPolicy, x) -> InferenceRecord:
    """Run one sample exit by exit and stop at the first exit that fires."""
    if len(policy.thresholds) != net.K:
        raise ValueError(f"policy has {len(policy.thresholds)} thresholds, network has {net.K} exits")
    for i, logits in enumerate(iter_exit_logits(net, x)):
        if i == net.K - 1 or should_stop(logits, policy.criterion, policy.thresholds[i]):
            return InferenceRecord(i + 1, net.cost_fractions[i], int(np.argmax(logits)),
                                   float(exit_score(logits, policy.criterion)))
    raise AssertionError("unreachable")


def exit_decisions(all_logits, criterion: str, thresholds) -> np.ndarray:
    """0-based exit index per sample, given batched logits of every exit."""
    K = len(all_logits)
    n = all_logits[0].shape[0]
    stop = np.zeros((n, K), dtype=bool)
    for i, logits in enumerate(all_logits[:-1]):
        t = thresholds[i]
        if t is None:
            continue
        s = exit_score(logits, criterion)
        stop[:, i] = s >= t if criterion == "confidence" else s <= t
    stop[:, K - 1] = True
    return stop.argmax(axis=1)


def infer_batch(net: MultiExitNetwork, policy: ExitPolicy, X, chunk: int = 512,
                all_logits=None) -> list[InferenceRecord]:
    """Same records as calling adaptive_infer per sample, computed in batches."""
    if len(policy.thresholds) != net.K:
        raise ValueError(f"policy has {len(policy.thresholds)} thresholds, network has {net.K} exits")
    if all_logits is None:
        all_logits = batched_logits(net, X, chunk)
    idx = exit_decisions(all_logits, policy.criterion, policy.thresholds)
    records = []
    for s, i in enumerate(idx):
        z = all_logits[i][s]
        records.append(InferenceRecord(int(i) + 1, net.cost_fractions[i], int(np.argmax(z)),
                                       float(exit_score(z, policy.criterion))))
    return records


def batched_logits(net: MultiExitNetwork, X, chunk: int = 512) -> list[np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    parts = [forward_all_exits(net, X[s:s + chunk], batched=True)[0] for s in range(0, len(X), chunk)]
    return [np.concatenate([p[i] for p in parts]) for i in range(net.K)]


def threshold_grid(criterion: str, m: int) -> list[float]:
    steps = np.round(np.arange(101) * 0.01, 2)
    if criterion == "confidence":
        return [float(v) for v in steps]
    return [float(math.log(m) * (1.0 - v)) for v in steps]


def relative_accuracy_drop(acc_full: float, acc_policy: float) -> float:
    if acc_full <= 0.0:
        return 0.0
    return (acc_full - acc_policy) / acc_full


def calibrate(net: MultiExitNetwork, X, y, criterion: str = "confidence", rad_budget: float = 0.05,
              grid=None) -> ExitPolicy:
    """Pick the shared threshold with maximal holdout efficacy within the RAD budget."""
    from .metrics import build_eec, efficacy

    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty holdout set")
    if not 0.0 < rad_budget:
        raise ValueError("rad_budget must be positive")
    grid = threshold_grid(criterion, net.num_classes) if grid is None else list(grid)
    all_logits = batched_logits(net, X)
    preds = [z.argmax(axis=1) for z in all_logits]
    acc_full = float(np.mean(preds[-1] == y))
    costs = np.asarray(net.cost_fractions)

    best = None
    for t in grid:
        idx = exit_decisions(all_logits, criterion, [t] * net.K)
        pred = np.choose(idx, preds)
        acc = float(np.mean(pred == y))
        if relative_accuracy_drop(acc_full, acc) > rad_budget + 1e-12:
            continue
        eff = efficacy(build_eec(costs[idx]))
        # conservative = higher confidence bar / lower entropy bar
        conserv = t if criterion == "confidence" else -t
        key = (eff, acc, conserv)
        if best is None or _better(key, best[0]):
            best = (key, t, acc, eff)

    if best is None:
        never = ExitPolicy.never(criterion, net.K)
        never.rad_budget, never.full_accuracy, never.holdout_accuracy = rad_budget, acc_full, acc_full
        never.holdout_efficacy = efficacy(build_eec(np.ones(len(y))))
        never.feasible = False
        return never
    _, t, acc, eff = best
    return ExitPolicy(criterion, [float(t)] * net.K, rad_budget, acc, acc_full, eff, True)


def _better(a, b) -> bool:
    if abs(a[0] - b[0]) > 1e-12:
        return a[0] > b[0]
    if a[1] != b[1]:
        return a[1] > b[1]
    return a[2] > b[2]
