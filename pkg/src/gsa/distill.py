"""Adaptive knowledge distillation: tempered KL loss and progress-dependent weighting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor
from .errors import ArgumentError, ConfigError, DimensionError
from .model import SCALES, DetectorOutput


class Schedule(Enum):
    SIGMOID = "sigmoid"
    COSINE = "cosine"
    LINEAR = "linear"
    INCREASING = "increasing"
    BELL = "bell"
    FIXED = "fixed"


@dataclass
class AdaKDConfig:
    lambda0: float = 4.0
    theta: float = 15.0
    t_mid: float = 0.5
    temperature: float = 2.0
    schedule: Schedule = Schedule.SIGMOID
    fixed_weight: float = 0.5

    def __post_init__(self):
        self.schedule = Schedule(self.schedule)
        if self.lambda0 < 0 or self.temperature <= 0 or not 0 < self.t_mid < 1:
            raise ConfigError("need lambda0 >= 0, temperature > 0 and 0 < t_mid < 1")


@dataclass
class ScheduleState:
    epoch: int
    total_epochs: int

    def __post_init__(self):
        if self.total_epochs < 1 or not 0 <= self.epoch <= self.total_epochs:
            raise ArgumentError(f"epoch {self.epoch} outside [0, {self.total_epochs}]")

    @property
    def t(self) -> float:
        return self.epoch / self.total_epochs


def alpha(t: float, cfg: AdaKDConfig) -> float:
    """Distillation weight at normalized progress ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ArgumentError(f"progress t must lie in [0, 1], got {t}")
    s = cfg.schedule
    if s is Schedule.SIGMOID:
        return 1.0 / (1.0 + math.exp(cfg.theta * (t - cfg.t_mid)))
    if s is Schedule.INCREASING:
        return 1.0 / (1.0 + math.exp(-cfg.theta * (t - cfg.t_mid)))
    if s is Schedule.COSINE:
        return 0.5 * (1.0 + math.cos(math.pi * t))
    if s is Schedule.LINEAR:
        return 1.0 - t
    if s is Schedule.BELL:
        return 0.2 + 0.6 * math.sin(math.pi * t)
    return cfg.fixed_weight


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def kd_loss(teacher_logits, student_logits: Tensor, temperature: float = 2.0, axis: int = -1) -> Tensor:
    """T^2 * KL(teacher || student) of tempered softmaxes, averaged over all non-class positions.

    The teacher side is treated as a constant.
    """
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, DTYPE)
    if t_data.shape != student_logits.shape:
        raise DimensionError(f"kd_loss shape mismatch: teacher {t_data.shape} vs student {student_logits.shape}")
    if temperature <= 0:
        raise ArgumentError("temperature must be positive")
    n_pos = max(1, student_logits.size // student_logits.shape[axis])
    q = _softmax_np(t_data.astype(np.float64) / temperature, axis)
    entropy_term = float(np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0).sum()) / n_pos
    log_qs = ad.log_softmax(student_logits * (1.0 / temperature), axis=axis)
    cross = ad.tsum(log_qs * q.astype(DTYPE)) * (1.0 / n_pos)
    return (entropy_term - cross) * (temperature ** 2)


def _objectness_pair(obj: Tensor) -> Tensor:
    return ad.concat_channels(obj, Tensor(np.zeros(obj.shape, DTYPE)))


def detector_kd_loss(teacher: DetectorOutput, student: DetectorOutput, temperature: float = 2.0) -> Tensor:
    """Same KL at every scale on class logits and on objectness read as a two-way distribution."""
    total = None
    for s in SCALES:
        t, st = teacher[s], student[s]
        term = kd_loss(t.class_logits, st.class_logits, temperature, axis=1)
        t_obj = np.concatenate([t.objectness.data, np.zeros_like(t.objectness.data)], axis=1)
        term = term + kd_loss(t_obj, _objectness_pair(st.objectness), temperature, axis=1)
        total = term if total is None else total + term
    return total * (1.0 / len(SCALES))


def total_ada_loss(det_loss, kd, t: float, cfg: AdaKDConfig):
    return det_loss + kd * (cfg.lambda0 * alpha(t, cfg))


LOG_HEADER = ("epoch", "t", "alpha", "kd_loss", "det_loss", "total")


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_HEADER, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(float(r[k])) if k != "epoch" else int(r[k]) for k in LOG_HEADER})
    return buf.getvalue()
