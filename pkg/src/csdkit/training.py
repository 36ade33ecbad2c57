"""Training loop with per-component learning rates and set balancing.

The three parts of the model learn at very different rates: pretrained
audio encoders need barely-nonzero updates, visual encoders slightly
more, and the freshly initialised fusion head the most. The optimiser
therefore gets three disjoint parameter groups instead of one global
learning rate.

Dataset balancing is selection, not reweighting: every window that
contains concurrent speech is kept (it is the rarest and most valuable
class), then singles/noise windows are added in seeded random order
until the frame-class shares hit the target mix within tolerance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentConfig, augment_segment
from .losses import LossConfig, build_loss, class_weights_from_frequency
from .model import CsdModel, save_checkpoint
from .types import (
    FaceStreamSet,
    NUM_CLASSES,
    Segment,
    ValidationError,
    class_frame_counts,
)


@dataclass(frozen=True)
class TrainConfig:
    """Everything the training loop needs beyond the model itself."""

    epochs: int = 5
    batch_size: int = 64
    lr_audio: float = 1e-7
    lr_visual: float = 1e-6
    lr_head: float = 1e-4
    weight_decay: float = 1e-9
    seed: int = 0
    deterministic: bool = False
    balance: bool = True
    target_shares: tuple[float, float, float] = (0.22, 0.39, 0.39)
    balance_tolerance_pp: float = 2.0
    shuffle_streams: bool = True
    augment_multiplier: int = 2
    use_audio_augment: bool = True
    use_visual_augment: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if abs(sum(self.target_shares) - 1.0) > 1e-9:
            raise ValidationError(
                f"target_shares must sum to 1, got {self.target_shares}"
            )
        if self.augment_multiplier < 0:
            raise ValidationError("augment_multiplier must be >= 0")


def build_param_groups(model: CsdModel, config: TrainConfig) -> list[dict]:
    """Three disjoint optimiser groups: audio / visual backbone / head.

    Frozen backbones contribute empty groups, which are dropped. The
    union of the groups is exactly the model's trainable parameters.
    """
    groups = model.parameter_groups()
    out = []
    for name, lr in (
        ("audio", config.lr_audio),
        ("visual", config.lr_visual),
        ("head", config.lr_head),
    ):
        params = [p for p in groups[name] if p.requires_grad]
        if params:
            out.append(
                {"params": params, "lr": lr, "weight_decay": config.weight_decay, "name": name}
            )
    seen: set[int] = set()
    for group in out:
        ids = {id(p) for p in group["params"]}
        if ids & seen:
            raise ValidationError("parameter groups overlap")
        seen |= ids
    return out


def balance_training_set(
    segments: Sequence[Segment],
    target_shares: tuple[float, float, float] = (0.22, 0.39, 0.39),
    tolerance_pp: float = 2.0,
    seed: int = 0,
) -> list[Segment]:
    """Select a subset whose frame-class mix matches ``target_shares``.

    Every segment containing at least one concurrent-speech frame is
    kept unconditionally. Remaining segments are visited in seeded
    random order and added while they do not push any class past its
    target count (derived from the fixed concurrent-frame total).
    Raises when the pool cannot reach the tolerance — a silently
    imbalanced training set is worse than a loud failure.
    """
    shares = np.asarray(target_shares, dtype=np.float64)
    if np.any(shares <= 0):
        raise ValidationError(f"target shares must be positive, got {target_shares}")
    kept = [seg for seg in segments if np.any(seg.labels.classes == 2)]
    pool = [seg for seg in segments if not np.any(seg.labels.classes == 2)]
    if not kept:
        raise ValidationError("no segments with concurrent speech: cannot balance")
    counts = class_frame_counts(kept).astype(np.float64)
    # all concurrent frames are in `kept`, so the class-2 count anchors
    # the target totals for the other classes
    total_target = counts[2] / shares[2]
    targets = shares * total_target

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    for idx in order:
        seg = pool[idx]
        seg_counts = np.bincount(seg.labels.classes, minlength=NUM_CLASSES)
        if np.all(counts[:2] + seg_counts[:2] <= targets[:2]):
            kept.append(seg)
            counts += seg_counts

    achieved = counts / counts.sum()
    deviation_pp = np.abs(achieved - shares) * 100.0
    if np.any(deviation_pp > tolerance_pp):
        raise ValidationError(
            f"balancing failed: achieved shares {np.round(achieved, 4).tolist()} "
            f"deviate from targets {shares.tolist()} by "
            f"{np.round(deviation_pp, 2).tolist()} pp (tolerance {tolerance_pp})"
        )
    return kept


def shuffle_streams(segment: Segment, rng: np.random.Generator) -> Segment:
    """Jointly permute the face-stream axis and its validity mask.

    The labels do not move: which slot a face occupies carries no
    meaning, and training under random slot assignment keeps the model
    honest about that.
    """
    perm = rng.permutation(segment.faces.streams.shape[0])
    return Segment(
        audio=segment.audio,
        faces=FaceStreamSet(
            streams=np.ascontiguousarray(segment.faces.streams[perm]),
            valid_mask=np.ascontiguousarray(segment.faces.valid_mask[perm]),
        ),
        labels=segment.labels,
        session_id=segment.session_id,
        start_frame=segment.start_frame,
        fps=segment.fps,
    )


def _augment_config(config: TrainConfig, base: AugmentConfig | None = None) -> AugmentConfig:
    """Zero out the probability of every disabled augmentation family."""
    kwargs = dataclasses.asdict(base) if base is not None else {}
    kwargs["multiplier"] = config.augment_multiplier
    if not config.use_audio_augment:
        kwargs.update(pitch_prob=0.0, spectral_mask_prob=0.0)
    if not config.use_visual_augment:
        kwargs.update(visual_prob=0.0, frame_mask_prob=0.0)
    return AugmentConfig(**kwargs)


def effective_epoch_size(base_size: int, config: TrainConfig) -> int:
    """Segments seen per epoch: base + augmented copies when any family is on."""
    if config.use_audio_augment or config.use_visual_augment:
        return base_size * (1 + config.augment_multiplier)
    return base_size


@dataclass
class TrainResult:
    """What a finished run reports back."""

    model: CsdModel
    history: list[dict]
    manifest: dict
    checkpoint_paths: list[Path] = field(default_factory=list)


def middle_frame_accuracy(
    model: CsdModel, segments: Sequence[Segment], batch_size: int = 64
) -> float:
    """Accuracy of the centred frame's prediction over a segment set."""
    middle = model.config.window_frames // 2
    correct = 0
    with torch.no_grad():
        for i in range(0, len(segments), batch_size):
            batch = segments[i : i + batch_size]
            logits = model.forward_segments(batch)
            preds = logits[:, middle].argmax(dim=-1).cpu().numpy()
            truth = np.array([seg.labels.classes[middle] for seg in batch])
            correct += int((preds == truth).sum())
    return correct / len(segments)


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def train(
    model: CsdModel,
    segments: Sequence[Segment],
    config: TrainConfig,
    loss_config: LossConfig | None = None,
    augment_config: AugmentConfig | None = None,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the full loop; optionally checkpoint per epoch into ``out_dir``."""
    if not segments:
        raise ValidationError("cannot train on an empty segment set")
    loss_config = loss_config or LossConfig()

    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.set_num_threads(1)

    raw_counts = class_frame_counts(segments)
    if config.balance:
        base = balance_training_set(
            segments, config.target_shares, config.balance_tolerance_pp, config.seed
        )
    else:
        base = list(segments)
    base_counts = class_frame_counts(base)

    if loss_config.kind == "weighted_ce" and loss_config.class_weights is None:
        freqs = base_counts / base_counts.sum()
        weights = class_weights_from_frequency(freqs)
        loss_config = dataclasses.replace(
            loss_config, class_weights=tuple(float(w) for w in weights)
        )
    loss_fn = build_loss(loss_config)

    param_groups = build_param_groups(model, config)
    optimizer = torch.optim.Adam(param_groups)

    start_epoch = 0
    if resume_from is not None:
        state = torch.load(Path(resume_from), weights_only=False)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["torch_rng"])
        start_epoch = state["epoch"] + 1

    aug_cfg = _augment_config(config, augment_config)
    augmenting = config.use_audio_augment or config.use_visual_augment
    history: list[dict] = []
    checkpoint_paths: list[Path] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, config.epochs):
        epoch_rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, epoch])
        )
        epoch_set = list(base)
        if augmenting:
            for _ in range(config.augment_multiplier):
                epoch_set.extend(augment_segment(seg, aug_cfg, epoch_rng) for seg in base)
        assert len(epoch_set) == effective_epoch_size(len(base), config)
        order = epoch_rng.permutation(len(epoch_set))

        model.train()
        epoch_losses = []
        for i in range(0, len(order), config.batch_size):
            batch = [epoch_set[j] for j in order[i : i + config.batch_size]]
            if config.shuffle_streams:
                batch = [shuffle_streams(seg, epoch_rng) for seg in batch]
            labels = torch.from_numpy(
                np.stack([seg.labels.classes for seg in batch])
            )
            logits = model.forward_segments(batch)
            loss = loss_fn(logits, labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))

        model.eval()
        acc = middle_frame_accuracy(model, base, config.batch_size)
        record = {
            "epoch": epoch,
            "mean_loss": float(np.mean(epoch_losses)),
            "train_middle_frame_acc": acc,
            "segments_seen": len(epoch_set),
        }
        history.append(record)

        if out_path is not None:
            ckpt = out_path / f"epoch_{epoch:03d}.pt"
            save_checkpoint(model.net, ckpt, extra={"epoch": epoch, "history": history})
            torch.save(
                {
                    "model": model.state_dict(),
                    "optimizer": optimizer.state_dict(),
                    "torch_rng": torch.get_rng_state(),
                    "epoch": epoch,
                },
                out_path / f"state_{epoch:03d}.pt",
            )
            checkpoint_paths.append(ckpt)

    manifest = {
        "config": dataclasses.asdict(config),
        "loss": dataclasses.asdict(loss_config),
        "model_config": dataclasses.asdict(model.config),
        "raw_segments": len(segments),
        "raw_frame_counts": raw_counts.tolist(),
        "base_segments": len(base),
        "base_frame_counts": base_counts.tolist(),
        "effective_epoch_size": effective_epoch_size(len(base), config),
        "augment_flags": {
            "audio": config.use_audio_augment,
            "visual": config.use_visual_augment,
            "multiplier": config.augment_multiplier,
        },
        "backbones_trainable": {
            "audio": bool(model.audio_backbone.trainable_parameters()),
            "visual": bool(model.visual_backbone.trainable_parameters()),
        },
        "param_groups": [
            {
                "name": g["name"],
                "lr": g["lr"],
                "n_params": int(sum(p.numel() for p in g["params"])),
            }
            for g in param_groups
        ],
        "history": history,
    }
    manifest["config_hash"] = _config_hash(
        {
            k: manifest[k]
            for k in ("config", "loss", "model_config", "backbones_trainable")
        }
    )
    if not config.deterministic:
        manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    if out_path is not None:
        (out_path / "train_manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
    return TrainResult(
        model=model,
        history=history,
        manifest=manifest,
        checkpoint_paths=checkpoint_paths,
    )
