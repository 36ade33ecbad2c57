"""Training objectives for imbalanced 3-class frame labelling.

All losses accept logits shaped (..., 3) with integer labels shaped
(...); leading dims are flattened, so per-window (B, T, 3) logits and
(B, T) labels work directly. Everything goes through log-softmax, so
adding a constant to every class of a frame never changes the value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .types import NUM_CLASSES, ValidationError


@dataclass(frozen=True)
class LossConfig:
    """Which objective to train with and its knobs.

    kind: "weighted_ce" (class-weighted, label-smoothed cross entropy),
    "focal", or "cost" (expected misclassification cost).
    class_weights=None means unit weights; for weighted_ce they are
    normally derived from training-set class frequencies.
    """

    kind: str = "weighted_ce"
    label_smoothing: float = 0.1
    focal_gamma: float = 2.0
    class_weights: tuple[float, float, float] | None = None
    cost_matrix: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("weighted_ce", "focal", "cost"):
            raise ValidationError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError(
                f"label_smoothing must be in [0, 1), got {self.label_smoothing}"
            )
        if self.focal_gamma < 0:
            raise ValidationError(f"focal_gamma must be >= 0, got {self.focal_gamma}")


def class_weights_from_frequency(frequencies) -> np.ndarray:
    """Inverse-frequency class weights, normalised to mean 1.

    w_c = (1 / f_c) / sum_k (1 / f_k) * num_classes. Rare classes get
    proportionally larger weights; uniform frequencies give all ones.
    """
    f = np.asarray(frequencies, dtype=np.float64)
    if f.shape != (NUM_CLASSES,) or np.any(f <= 0):
        raise ValidationError(
            f"frequencies must be {NUM_CLASSES} positive values, got {f!r}"
        )
    inv = 1.0 / f
    return inv / inv.sum() * NUM_CLASSES


def smooth_labels(labels: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Hard labels -> smoothed one-hot rows.

    The true class gets 1 - eps + eps/3 and each other class eps/3, so
    every row still sums to one.
    """
    labels = labels.reshape(-1)
    if labels.numel() and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        raise ValidationError("labels must be in {0, 1, 2}")
    rows = torch.full(
        (labels.shape[0], NUM_CLASSES),
        epsilon / NUM_CLASSES,
        dtype=torch.float64,
    )
    rows[torch.arange(labels.shape[0]), labels] = 1.0 - epsilon + epsilon / NUM_CLASSES
    return rows


def _flatten(logits: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if logits.shape[-1] != NUM_CLASSES:
        raise ValidationError(
            f"logits must have a trailing dim of {NUM_CLASSES}, got {tuple(logits.shape)}"
        )
    flat_logits = logits.reshape(-1, NUM_CLASSES)
    flat_labels = labels.reshape(-1).long()
    if flat_logits.shape[0] != flat_labels.shape[0]:
        raise ValidationError(
            f"{flat_logits.shape[0]} logit rows vs {flat_labels.shape[0]} labels"
        )
    if flat_labels.numel() == 0:
        raise ValidationError("empty batch")
    if flat_labels.min() < 0 or flat_labels.max() >= NUM_CLASSES:
        raise ValidationError("labels must be in {0, 1, 2}")
    return flat_logits, flat_labels


def weighted_smoothed_ce(
    logits: torch.Tensor,
    labels: torch.Tensor,
    class_weights: torch.Tensor | None = None,
    label_smoothing: float = 0.0,
) -> torch.Tensor:
    """Label-smoothed cross entropy, weighted by the true class's weight.

    Per frame: ce_i = -sum_c q_c log softmax(logits_i)_c with q the
    smoothed target row. The batch value is the weighted mean
    sum_i w[y_i] ce_i / sum_i w[y_i]; unit weights reduce it to the
    plain mean.
    """
    flat_logits, flat_labels = _flatten(logits, labels)
    targets = smooth_labels(flat_labels, label_smoothing).to(flat_logits.dtype)
    log_probs = torch.log_softmax(flat_logits, dim=-1)
    per_frame = -(targets * log_probs).sum(dim=-1)
    if class_weights is None:
        return per_frame.mean()
    w = torch.as_tensor(class_weights, dtype=flat_logits.dtype)
    if w.shape != (NUM_CLASSES,):
        raise ValidationError(f"class_weights must have shape (3,), got {tuple(w.shape)}")
    frame_w = w[flat_labels]
    return (frame_w * per_frame).sum() / frame_w.sum()


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Mean of (1 - p_true)^gamma * (-log p_true); gamma=0 is plain CE."""
    if gamma < 0:
        raise ValidationError(f"gamma must be >= 0, got {gamma}")
    flat_logits, flat_labels = _flatten(logits, labels)
    log_probs = torch.log_softmax(flat_logits, dim=-1)
    idx = torch.arange(flat_labels.shape[0])
    log_p_true = log_probs[idx, flat_labels]
    modulator = (1.0 - log_p_true.exp()) ** gamma
    return (-modulator * log_p_true).mean()


def cost_sensitive_penalty(
    logits: torch.Tensor,
    labels: torch.Tensor,
    cost_matrix: torch.Tensor,
) -> torch.Tensor:
    """Mean expected misclassification cost sum_c p_c * cost[y, c].

    cost_matrix is (3, 3): cost[true, predicted]. A zero diagonal means
    correct predictions cost nothing; the loss is minimised by putting
    all probability on the cheapest class, so the diagonal should be
    the row minimum.
    """
    flat_logits, flat_labels = _flatten(logits, labels)
    cost = torch.as_tensor(cost_matrix, dtype=flat_logits.dtype)
    if cost.shape != (NUM_CLASSES, NUM_CLASSES):
        raise ValidationError(f"cost_matrix must be (3, 3), got {tuple(cost.shape)}")
    probs = torch.softmax(flat_logits, dim=-1)
    per_frame = (probs * cost[flat_labels]).sum(dim=-1)
    return per_frame.mean()


def build_loss(config: LossConfig):
    """LossConfig -> callable(logits, labels) -> scalar tensor."""
    if config.kind == "weighted_ce":
        weights = (
            torch.tensor(config.class_weights, dtype=torch.float64)
            if config.class_weights is not None
            else None
        )

        def loss_fn(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
            w = weights.to(logits.dtype) if weights is not None else None
            return weighted_smoothed_ce(logits, labels, w, config.label_smoothing)

        return loss_fn
    if config.kind == "focal":
        return lambda logits, labels: focal_loss(logits, labels, config.focal_gamma)
    if config.cost_matrix is None:
        raise ValidationError("cost loss requires a cost_matrix")
    cost = torch.tensor(config.cost_matrix, dtype=torch.float64)
    return lambda logits, labels: cost_sensitive_penalty(
        logits, labels, cost.to(logits.dtype)
    )
