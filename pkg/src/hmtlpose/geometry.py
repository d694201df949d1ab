"""Euler-angle labels, bin discretization and MAE metrics.

All angles are degrees.  Bin representatives are bin centers, so a uniform
distribution over the default 66 bins decodes to exactly 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import InvalidInputError

ANGLES = ("yaw", "pitch", "roll")


@dataclass(frozen=True)
class EulerPose:
    yaw: float
    pitch: float
    roll: float | None = None

    def __post_init__(self):
        for name, value in self.items():
            if not math.isfinite(value):
                raise InvalidInputError(f"{name} must be finite, got {value!r}")

    def items(self) -> list[tuple[str, float]]:
        out = [("yaw", self.yaw), ("pitch", self.pitch)]
        if self.roll is not None:
            out.append(("roll", self.roll))
        return out

    @property
    def angle_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.items())

    def as_dict(self) -> dict[str, float]:
        return dict(self.items())


@dataclass(frozen=True)
class BinSpec:
    """Uniform bins of ``width_deg`` covering ``[min_deg, max_deg)``."""

    min_deg: float = -99.0
    max_deg: float = 99.0
    width_deg: float = 3.0

    def __post_init__(self):
        if not self.width_deg > 0:
            raise InvalidInputError(f"width_deg must be > 0, got {self.width_deg}")
        if self.count < 2:
            raise InvalidInputError(
                f"bin range [{self.min_deg}, {self.max_deg}) with width {self.width_deg} "
                f"gives {self.count} bins; need at least 2"
            )

    @property
    def count(self) -> int:
        return int(math.floor((self.max_deg - self.min_deg) / self.width_deg + 1e-9))

    def centers(self) -> np.ndarray:
        return self.min_deg + self.width_deg * (np.arange(self.count, dtype=np.float64) + 0.5)


def bin_index(angle: float, spec: BinSpec) -> int:
    if not math.isfinite(angle):
        raise InvalidInputError(f"angle must be finite, got {angle!r}")
    idx = math.floor((angle - spec.min_deg) / spec.width_deg)
    return min(max(idx, 0), spec.count - 1)


def bin_indices(angles: torch.Tensor, spec: BinSpec) -> torch.Tensor:
    """Vectorized ``bin_index`` for a tensor of angles; returns int64."""
    if not torch.isfinite(angles).all():
        raise InvalidInputError("angles must be finite")
    idx = torch.floor((angles.double() - spec.min_deg) / spec.width_deg).long()
    return idx.clamp(0, spec.count - 1)


def bin_value(index: int, spec: BinSpec) -> float:
    if not 0 <= index < spec.count:
        raise InvalidInputError(f"bin index {index} outside [0, {spec.count})")
    return spec.min_deg + spec.width_deg * (index + 0.5)


def expectation(probs, spec: BinSpec):
    """Probability-weighted mean of bin centers over the last axis.

    Works on numpy arrays and torch tensors (differentiable); leading axes are
    treated as batch dimensions.
    """
    if probs.shape[-1] != spec.count:
        raise InvalidInputError(
            f"probability vector has {probs.shape[-1]} entries, bin spec has {spec.count}"
        )
    centers = spec.centers()
    if isinstance(probs, torch.Tensor):
        return probs @ torch.as_tensor(centers, dtype=probs.dtype, device=probs.device)
    return np.asarray(probs, dtype=np.float64) @ centers


@dataclass
class Metrics:
    per_angle_mae: dict[str, float] = field(default_factory=dict)
    count: int = 0

    @property
    def average_mae(self) -> float:
        if not self.per_angle_mae:
            return float("nan")
        return float(np.mean(list(self.per_angle_mae.values())))

    def as_row(self) -> dict[str, float]:
        row = {f"{k}_mae": v for k, v in self.per_angle_mae.items()}
        row["average_mae"] = self.average_mae
        row["n"] = self.count
        return row


def mean_absolute_error(
    predictions: Sequence[EulerPose] | Mapping[str, np.ndarray],
    labels: Sequence[EulerPose] | Mapping[str, np.ndarray],
) -> Metrics:
    """Per-angle MAE in degrees.

    Accepts either parallel lists of poses or dicts of angle name -> array.
    """
    pred = _as_columns(predictions)
    true = _as_columns(labels)
    if set(pred) != set(true):
        raise InvalidInputError(
            f"angle sets differ: predictions {sorted(pred)} vs labels {sorted(true)}"
        )
    n = {len(v) for v in pred.values()} | {len(v) for v in true.values()}
    if len(n) != 1 or 0 in n:
        raise InvalidInputError("predictions and labels must be non-empty and of equal length")
    per_angle = {
        name: float(np.mean(np.abs(pred[name] - true[name])))
        for name in ANGLES
        if name in pred
    }
    return Metrics(per_angle_mae=per_angle, count=n.pop())


def _as_columns(data) -> dict[str, np.ndarray]:
    if isinstance(data, Mapping):
        return {k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in data.items()}
    data = list(data)
    if not data:
        raise InvalidInputError("empty pose list")
    names = data[0].angle_names
    for pose in data:
        if pose.angle_names != names:
            raise InvalidInputError("every pose in a list must carry the same angles")
    return {name: np.array([getattr(p, name) for p in data], dtype=np.float64) for name in names}
