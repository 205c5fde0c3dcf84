"""Training objectives.

Loss functions take channel-last torch tensors (numpy arrays are converted)
and return 0-d tensors so they can be back-propagated inside the trainer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .segcore import IGNORE_VALUE

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class RampSchedule:
    lambda0: float = 0.1
    t_max: int = 2000

    def __post_init__(self):
        # lambda0 == 0 is admitted as the source-only switch
        if self.lambda0 < 0:
            raise ValueError(f"lambda0 must be >= 0, got {self.lambda0}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")


@dataclass
class LossReport:
    step: int
    seg_loss: float
    con_loss: float
    lambda_con: float
    total: float
    masked_fraction: float


def _tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def masked_consistency_loss(student, teacher, gate, reduction: str = "mean_all") -> torch.Tensor:
    """Gated squared difference between student and teacher probability maps.

    ``mean_all`` divides by every element (H * W * C, times batch); gate-0
    pixels stay in the denominator.  ``mean_gated`` divides by the number of
    gated pixels times C instead.  The teacher is detached.
    """
    student = _tensor(student)
    teacher = _tensor(teacher).detach().to(student.dtype)
    gate = _tensor(gate).to(student.dtype)
    if student.shape != teacher.shape:
        raise ValueError(f"student {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    if gate.shape != student.shape[:-1]:
        raise ValueError(f"gate {tuple(gate.shape)} does not match maps {tuple(student.shape)}")
    sq = gate.unsqueeze(-1) * (student - teacher) ** 2
    if reduction == "mean_all":
        return sq.sum() / student.numel()
    if reduction == "mean_gated":
        denom = gate.sum() * student.shape[-1]
        return sq.sum() / denom.clamp_min(1.0)
    raise ValueError(f"unknown reduction {reduction!r}")


def supervised_ce(student, labels, ignore_value: int = IGNORE_VALUE) -> torch.Tensor:
    """Mean of -ln p(true class) over non-ignored pixels."""
    student = _tensor(student)
    labels = _tensor(labels).long()
    if student.shape[:-1] != labels.shape:
        raise ValueError(f"probs {tuple(student.shape)} vs labels {tuple(labels.shape)}")
    valid = labels != ignore_value
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no non-ignored pixels for cross-entropy")
    p_true = student[valid].gather(-1, labels[valid].unsqueeze(-1)).squeeze(-1)
    return -torch.log(p_true.clamp_min(LOG_FLOOR)).sum() / n


def ramp_weight(t: int, sched: RampSchedule) -> float:
    if t < 0 or t > sched.t_max:
        raise ValueError(f"step {t} outside [0, {sched.t_max}]")
    return sched.lambda0 * math.exp(-5.0 * (1.0 - t / sched.t_max) ** 2)


def total_loss(seg, con, lambda_con: float):
    return seg + lambda_con * con


class MetricsWriter:
    """Appends LossReport rows to a CSV file."""

    columns = [f.name for f in fields(LossReport)]

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        exists = append and self.path.exists()
        self._fh = open(self.path, "a" if exists else "w", newline="")
        self._w = csv.writer(self._fh)
        if not exists:
            self._w.writerow(self.columns)

    def write(self, report: LossReport) -> None:
        row = asdict(report)
        self._w.writerow([row["step"], *[repr(float(row[c])) for c in self.columns[1:]]])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[LossReport]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        LossReport(int(r["step"]), *(float(r[c]) for c in MetricsWriter.columns[1:]))
        for r in rows
    ]
