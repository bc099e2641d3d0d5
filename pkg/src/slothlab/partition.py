"""Edge/cloud partitioning: transmission fraction, latency and attack amplification.

The edge device runs the network up to a split exit; samples that have
not stopped by then are sent to the cloud. Average latency is affine in
the transmitted fraction p: ``edge + p * remote``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .exitpolicy import ExitPolicy, batched_logits, exit_decisions
from .multiexit import MultiExitNetwork


@dataclass(frozen=True)
class PartitionScenario:
    split_exit: int = 1  # 1-based; the edge computes blocks up to this exit
    edge_latency_ms: float = 0.0
    remote_latency_ms: float = 11.0
    adversary_craft_ms: float = 2.0
    name: str = "partition"

    def __post_init__(self):
        if self.split_exit < 1:
            raise ValueError("split_exit must be >= 1")
        if min(self.edge_latency_ms, self.remote_latency_ms, self.adversary_craft_ms) < 0:
            raise ValueError("latencies must be non-negative")

    def check(self, net: MultiExitNetwork) -> None:
        if not 1 <= self.split_exit < net.K:
            raise ValueError(f"split_exit must lie in [1, {net.K - 1}] for a {net.K}-exit network")


@dataclass(frozen=True)
class TrafficReport:
    scenario: str
    transmission_fraction: float
    avg_latency_ms: float
    amplification: float | None = None


def latency(p: float, scenario: PartitionScenario) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError("transmission fraction must lie in [0, 1]")
    return scenario.edge_latency_ms + p * scenario.remote_latency_ms


def transmission_fraction(net: MultiExitNetwork, policy: ExitPolicy, X, split_exit: int) -> float:
    """Fraction of samples that do not stop at any exit up to ``split_exit``."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty sample set")
    idx = exit_decisions(batched_logits(net, X), policy.criterion, policy.thresholds)
    return float(np.mean(idx >= split_exit))


def simulate(net: MultiExitNetwork, policy: ExitPolicy, X, scenario: PartitionScenario) -> TrafficReport:
    scenario.check(net)
    p = transmission_fraction(net, policy, X, scenario.split_exit)
    return TrafficReport(scenario.name, p, latency(p, scenario))


def amplification(clean: TrafficReport, attacked: TrafficReport, scenario: PartitionScenario) -> float:
    """Victim latency added per millisecond the adversary spends crafting."""
    if scenario.adversary_craft_ms <= 0:
        raise ValueError("adversary_craft_ms must be positive")
    return (attacked.avg_latency_ms - clean.avg_latency_ms) / scenario.adversary_craft_ms


TRAFFIC_HEADER = ["scenario", "p", "avg_latency_ms", "amplification"]


def write_traffic_csv(reports: list[TrafficReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAFFIC_HEADER)
        for r in reports:
            amp = "" if r.amplification is None else repr(r.amplification)
            w.writerow([r.scenario, repr(r.transmission_fraction), repr(r.avg_latency_ms), amp])


def read_traffic_csv(path) -> list[TrafficReport]:
    with open(path, newline="") as fh:
        return [TrafficReport(r["scenario"], float(r["p"]), float(r["avg_latency_ms"]),
                              float(r["amplification"]) if r["amplification"] else None)
                for r in csv.DictReader(fh)]
