"""Per-module learning-rate schedules.

Three parameter groups follow three curves, all indexed by epoch:

* classifier: cosine annealing from ``eta_max`` to ``eta_min``
* backbone (CNN + encoders): linear warmup against the classifier curve,
  then geometric decay by ``beta`` per epoch
* adapters: classifier curve scaled by ``theta``
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class ScheduleParams:
    eta_min: float = 1e-7
    eta_max: float = 1e-3
    tau_tot: int = 40
    beta: float = 0.93
    theta: float = 10.0
    warmup: int = 10

    def __post_init__(self):
        if not (self.eta_min >= 0 and self.eta_max > self.eta_min):
            raise ValueError(f"need 0 <= eta_min < eta_max, got {self.eta_min}, {self.eta_max}")
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.theta <= 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if self.tau_tot < 1 or self.warmup < 1:
            raise ValueError("tau_tot and warmup must be positive")


def _check_tau(tau: int, p: ScheduleParams, low: int = 0) -> None:
    if not low <= tau <= p.tau_tot:
        raise ValueError(f"epoch {tau} outside [{low}, {p.tau_tot}]")


def lr_classifier(tau: int, p: ScheduleParams) -> float:
    _check_tau(tau, p)
    return p.eta_min + 0.5 * (p.eta_max - p.eta_min) * (1.0 + math.cos(math.pi * tau / p.tau_tot))


def lr_backbone(tau: int, p: ScheduleParams) -> float:
    """Warmup-then-decay rate for pretrained weights. ``tau`` is 1-based."""
    _check_tau(tau, p, low=1)
    if tau <= p.warmup:
        return lr_classifier(tau, p) * (tau / p.warmup)
    # iterate the recursion rather than using a power so the value is
    # exactly the product the recurrence defines
    lr = lr_classifier(p.warmup, p)
    for _ in range(tau - p.warmup):
        lr *= p.beta
    return lr


def lr_adapter(tau: int, p: ScheduleParams) -> float:
    return lr_classifier(tau, p) * p.theta


def lr_triple(tau: int, p: ScheduleParams) -> tuple[float, float, float]:
    """(classifier, backbone, adapter) rates for 1-based epoch ``tau``."""
    return lr_classifier(tau, p), lr_backbone(tau, p), lr_adapter(tau, p)


def write_schedule_csv(path: str | Path, p: ScheduleParams) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr_classifier", "lr_backbone", "lr_adapter"])
        for tau in range(1, p.tau_tot + 1):
            w.writerow([tau] + [repr(v) for v in lr_triple(tau, p)])
