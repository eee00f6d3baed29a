"""Regression metric, difficulty-driven task weighting and training objectives.

The evaluation metric is the percentage mean absolute error (PMAE): the mean
absolute error divided by the mean true value, reported as a percent. During
training each of the five nutrient tasks contributes its batch PMAE, weighted
by a per-task weight that tracks task difficulty with exponential smoothing.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, ParameterError

TASKS = ("calories", "mass", "fat", "carbohydrate", "protein")
N_TASKS = len(TASKS)

DENOMINATOR_FLOOR = 1e-8
_PMAE_CLAMP_EPS = 1e-3


def pmae(y_true, y_pred):
    """MAE over mean true value, as a fraction (multiply by 100 for percent)."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.size < 1:
        raise DegenerateInputError(
            f"pmae needs matching nonempty vectors, got {y_true.shape} and {y_pred.shape}"
        )
    denom = float(np.mean(y_true))
    if denom <= DENOMINATOR_FLOOR:
        raise DegenerateInputError(
            f"pmae denominator {denom:.3e} is at or below the floor {DENOMINATOR_FLOOR}"
        )
    return float(np.mean(np.abs(y_true - y_pred))) / denom


def task_difficulty(pmae_value):
    """Difficulty signal 1/(1 - PMAE), clamped below PMAE = 1 to stay finite."""
    if pmae_value < 0:
        raise ParameterError(f"PMAE must be nonnegative, got {pmae_value}")
    if pmae_value >= 1.0 - _PMAE_CLAMP_EPS:
        return 1.0 / _PMAE_CLAMP_EPS
    return 1.0 / (1.0 - float(pmae_value))


class TaskWeights:
    """Per-task loss weights updated from difficulty with smoothing factor 0.3.

    After every update the weights are renormalized to sum to the task count,
    which keeps the overall loss scale stable as difficulties drift.
    """

    def __init__(self, smoothing=0.3, n_tasks=N_TASKS):
        if not 0.0 < smoothing <= 1.0:
            raise ParameterError(f"smoothing must be in (0, 1], got {smoothing}")
        self.smoothing = float(smoothing)
        self.values = np.ones(n_tasks, dtype=np.float64)
        self.step = 0

    def update(self, difficulties):
        difficulties = np.asarray(difficulties, dtype=np.float64)
        if difficulties.shape != self.values.shape:
            raise ParameterError(
                f"expected {self.values.shape[0]} difficulties, got {difficulties.shape}"
            )
        if np.any(difficulties <= 0):
            raise ParameterError("difficulties must be positive")
        blended = self.smoothing * difficulties + (1.0 - self.smoothing) * self.values
        self.values = blended * (len(blended) / blended.sum())
        self.step += 1
        return self

    def as_dict(self):
        return {
            "smoothing": self.smoothing,
            "values": [float(v) for v in self.values],
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, payload):
        tw = cls(smoothing=payload["smoothing"], n_tasks=len(payload["values"]))
        tw.values = np.asarray(payload["values"], dtype=np.float64)
        tw.step = int(payload["step"])
        return tw


def nutrition_loss(preds, targets, weights):
    """Weighted sum of per-task batch PMAEs, differentiable in the predictions.

    ``preds`` is an (N, 5) tensor, ``targets`` an (N, 5) array. Each task's
    denominator is the batch mean of its targets, treated as a constant.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if preds.data.shape != targets.shape:
        raise DegenerateInputError(
            f"prediction shape {preds.data.shape} != target shape {targets.shape}"
        )
    n = targets.shape[0]
    denom = targets.mean(axis=0)
    if np.any(denom <= DENOMINATOR_FLOOR):
        bad = [TASKS[i] for i in np.nonzero(denom <= DENOMINATOR_FLOOR)[0]]
        raise DegenerateInputError(
            f"batch target mean is degenerate for {bad}; resample the batch or floor the targets"
        )
    weights = np.asarray(weights, dtype=np.float64)
    coeff = (weights / denom / n)[None, :]
    diff = T.absolute(T.sub(preds, T.constant(targets, dtype=preds.data.dtype)))
    return T.tsum(T.mul(diff, T.constant(coeff, dtype=preds.data.dtype)))


def total_loss(nutrition, alignment, align_weight):
    """Training objective: task loss plus weighted cross-modal alignment loss."""
    if align_weight < 0:
        raise ParameterError(f"alignment weight must be >= 0, got {align_weight}")
    if align_weight == 0 or alignment is None:
        return nutrition
    return T.add(nutrition, T.scale_shift(alignment, align_weight, 0.0))


def constant_predictor_pmae(targets):
    """Closed-form PMAE of always predicting the split's per-task mean."""
    targets = np.asarray(targets, dtype=np.float64)
    means = targets.mean(axis=0)
    if np.any(means <= DENOMINATOR_FLOOR):
        raise DegenerateInputError("split target means are degenerate")
    return np.mean(np.abs(targets - means[None, :]), axis=0) / means


class PmaeReport:
    """Per-task and mean PMAE over a dataset split."""

    def __init__(self, per_task, sample_count, label=""):
        self.per_task = {t: float(v) for t, v in zip(TASKS, per_task)}
        self.sample_count = int(sample_count)
        self.label = label

    @property
    def mean(self):
        return sum(self.per_task.values()) / len(self.per_task)

    def to_dict(self):
        return {
            "label": self.label,
            "samples": self.sample_count,
            "pmae_percent": {t: v * 100.0 for t, v in self.per_task.items()},
            "mean_percent": self.mean * 100.0,
        }

    @classmethod
    def from_dict(cls, payload):
        per_task = [payload["pmae_percent"][t] / 100.0 for t in TASKS]
        return cls(per_task, payload["samples"], payload.get("label", ""))

    def table_row(self):
        cells = [f"{self.per_task[t] * 100.0:7.2f}" for t in TASKS]
        return f"{self.label:<18s} " + " ".join(cells) + f" {self.mean * 100.0:7.2f}"

    @staticmethod
    def table_header():
        names = ["Calories", "Mass", "Fat", "Carb.", "Protein", "Mean"]
        return f"{'Run':<18s} " + " ".join(f"{n:>7s}" for n in names)

    def __str__(self):
        return self.table_header() + "\n" + self.table_row()
