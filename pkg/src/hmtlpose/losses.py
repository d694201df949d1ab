"""Loss terms and their per-mode compositions.

``eq1``: RMSE per supervised angle + scaled CE for every puzzle and rotation head.
``eq2``: bin CE + alpha * RMSE of the decoded expectation per angle + scaled SSL CE.
``eq3``: RMSE per supervised angle + scaled CE for puzzle heads only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F

from .errors import DegenerateBatchError, InvalidInputError
from .geometry import ANGLES, BinSpec, bin_indices, expectation

PROB_FLOOR = 1e-12
LOSS_MODES = ("eq1", "eq2", "eq3")
SSL_TASKS = ("puzzle", "rotation")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0
    ssl_scale: float = 50.0
    bt_lambda: float = 5e-3

    def __post_init__(self):
        for name in ("alpha", "ssl_scale", "bt_lambda"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass
class LossBreakdown:
    supervised: dict[str, torch.Tensor] = field(default_factory=dict)
    ssl: dict[tuple[str, int], torch.Tensor] = field(default_factory=dict)
    ssl_scale: float = 1.0
    total: torch.Tensor | None = None

    def recompose(self) -> float:
        sup = sum(float(v.detach()) for v in self.supervised.values())
        return sup + self.ssl_scale * sum(float(v.detach()) for v in self.ssl.values())

    def as_record(self) -> dict[str, float]:
        row = {name: float(v.detach()) for name, v in self.supervised.items()}
        row.update({f"{task}_region_{j}": float(v.detach()) for (task, j), v in sorted(self.ssl.items())})
        row["total"] = float(self.total.detach())
        return row


def rmse_loss(predictions: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if predictions.numel() == 0:
        raise InvalidInputError("rmse_loss needs a non-empty batch")
    if predictions.shape != labels.shape:
        raise InvalidInputError(f"shape mismatch {tuple(predictions.shape)} vs {tuple(labels.shape)}")
    return torch.sqrt(torch.mean((predictions - labels) ** 2))


def _check_labels(labels: torch.Tensor, classes: int):
    if labels.numel() and (labels.min() < 0 or labels.max() >= classes):
        raise InvalidInputError(f"class labels must lie in [0, {classes})")


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log probs[label]`` with a probability floor."""
    _check_labels(labels, probs.shape[-1])
    picked = probs.gather(-1, labels.long().unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def cross_entropy_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Fused softmax + CE; equals ``cross_entropy(softmax(logits), labels)``."""
    _check_labels(labels, logits.shape[-1])
    return F.cross_entropy(logits, labels.long())


def hopenet_angle_loss(
    probs: torch.Tensor,
    reg_label: torch.Tensor,
    bin_label: torch.Tensor,
    spec: BinSpec,
    alpha: float = 2.0,
    logits: torch.Tensor | None = None,
) -> torch.Tensor:
    """Bin cross-entropy plus ``alpha`` times the RMSE of the decoded angle."""
    if probs.shape[-1] != spec.count:
        raise InvalidInputError(f"{probs.shape[-1]} bin probabilities, spec has {spec.count} bins")
    ce = cross_entropy_logits(logits, bin_label) if logits is not None else cross_entropy(probs, bin_label)
    return ce + alpha * rmse_loss(expectation(probs, spec), reg_label.to(probs.dtype))


def _ssl_terms(outputs, targets, tasks) -> dict[tuple[str, int], torch.Tensor]:
    terms = {}
    for task in tasks:
        heads = sorted(
            (k for k in outputs if k.startswith(f"{task}_region_") and k.count("_") == 2),
            key=lambda k: int(k.rsplit("_", 1)[1]),
        )
        if not heads:
            continue
        if task not in targets:
            raise InvalidInputError(f"model has {task} heads but no {task} labels were given")
        labels = targets[task]
        if labels.shape[-1] != len(heads):
            raise InvalidInputError(f"{len(heads)} {task} heads but labels for {labels.shape[-1]} regions")
        for j, key in enumerate(heads):
            terms[(task, j)] = cross_entropy_logits(outputs[key], labels[:, j])
    return terms


def total_loss(
    mode: str,
    outputs: Mapping[str, torch.Tensor],
    targets: Mapping[str, torch.Tensor],
    weights: LossWeights,
    bin_spec: BinSpec | None = None,
    angles: tuple[str, ...] | None = None,
) -> LossBreakdown:
    """Compose the supervised and scaled SSL terms for one batch.

    ``outputs`` uses the model's naming: ``yaw`` (degrees), ``yaw_logits`` and
    ``yaw_probs`` for bin heads, ``puzzle_region_0`` ... (logits).  ``targets``
    holds angle tensors in degrees and ``puzzle``/``rotation`` label matrices
    of shape (batch, regions).
    """
    if mode not in LOSS_MODES:
        raise InvalidInputError(f"unknown loss mode {mode!r}")
    angles = angles or tuple(a for a in ANGLES if a in outputs or f"{a}_probs" in outputs)
    if not angles:
        raise InvalidInputError("outputs contain no supervised heads")
    out = LossBreakdown(ssl_scale=weights.ssl_scale)
    for angle in angles:
        if angle not in targets:
            raise InvalidInputError(f"missing {angle} label")
        label = targets[angle]
        if mode == "eq2":
            if f"{angle}_probs" not in outputs:
                raise InvalidInputError(f"eq2 needs a bin head for {angle}")
            if bin_spec is None:
                raise InvalidInputError("eq2 needs a bin spec")
            out.supervised[angle] = hopenet_angle_loss(
                outputs[f"{angle}_probs"],
                label,
                bin_indices(label, bin_spec).to(label.device),
                bin_spec,
                weights.alpha,
                logits=outputs.get(f"{angle}_logits"),
            )
        else:
            if angle not in outputs:
                raise InvalidInputError(f"missing {angle} head")
            out.supervised[angle] = rmse_loss(outputs[angle], label.to(outputs[angle].dtype))
    if mode == "eq3" and any(k.startswith("rotation_region_") for k in outputs):
        raise InvalidInputError("eq3 covers puzzle heads only; the model has rotation heads")
    out.ssl = _ssl_terms(outputs, targets, SSL_TASKS)
    total = sum(out.supervised.values())
    if out.ssl:
        total = total + weights.ssl_scale * sum(out.ssl.values())
    out.total = total
    return out


def barlow_twins_loss(
    z_a: torch.Tensor, z_b: torch.Tensor, lam: float = 5e-3, eps: float = 1e-12
) -> torch.Tensor:
    """Cross-correlation objective on batch-standardized embeddings."""
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise InvalidInputError(f"embedding shapes differ: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    batch = z_a.shape[0]
    if batch < 2:
        raise DegenerateBatchError("Barlow Twins needs a batch of at least 2")

    def standardize(z):
        z = z - z.mean(0)
        var = z.pow(2).mean(0)
        if (var <= eps).any():
            raise DegenerateBatchError("a feature has zero variance across the batch")
        return z / torch.sqrt(var + eps)

    c = standardize(z_a).T @ standardize(z_b) / batch
    on_diag = (torch.diagonal(c) - 1).pow(2).sum()
    off_diag = c.pow(2).sum() - torch.diagonal(c).pow(2).sum()
    return on_diag + lam * off_diag
