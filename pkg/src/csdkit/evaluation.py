"""Session-level inference and scoring.

Windows overlap (hop 1), so each interior frame is predicted by the
window centred on it: frame f takes row 3 (the middle of 7) of the
window starting at f - 3. The first and last three frames of a session
have no centred window and reuse the aligned rows of the first/last
window instead.

The two binary tasks are derived from the 3-class posterior rather than
predicted separately: voice activity is (p_noise, p_single + p_concurrent)
and overlap detection is (p_noise + p_single, p_concurrent).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .types import NUM_CLASSES, Segment, ValidationError

MIDDLE = 3  # row of a 7-frame window that is centred


def sliding_frame_probs(
    probs_by_start: Mapping[int, np.ndarray],
    total_frames: int,
    window: int = 7,
) -> np.ndarray:
    """Per-window posteriors -> one (total_frames, 3) posterior per frame.

    ``probs_by_start`` must cover every start in 0..total_frames-window
    (hop-1 coverage). Interior frames use the middle row of their
    centred window; the leading/trailing ``window // 2`` frames use the
    aligned rows of the nearest window.
    """
    if total_frames < window:
        raise ValidationError(
            f"session of {total_frames} frames is shorter than one window ({window})"
        )
    half = window // 2
    last_start = total_frames - window
    for start in range(last_start + 1):
        if start not in probs_by_start:
            raise ValidationError(f"missing window at start frame {start}")
        p = np.asarray(probs_by_start[start])
        if p.shape != (window, NUM_CLASSES):
            raise ValidationError(
                f"window at {start} has shape {p.shape}, expected {(window, NUM_CLASSES)}"
            )
    out = np.empty((total_frames, NUM_CLASSES), dtype=np.float64)
    for f in range(total_frames):
        start = min(max(f - half, 0), last_start)
        out[f] = probs_by_start[start][f - start]
    return out


def derive_vad(probs: np.ndarray) -> np.ndarray:
    """3-class posterior -> (inactive, any speech) posterior."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] != NUM_CLASSES:
        raise ValidationError(f"expected trailing dim {NUM_CLASSES}, got {probs.shape}")
    return np.stack([probs[..., 0], probs[..., 1] + probs[..., 2]], axis=-1)


def derive_osd(probs: np.ndarray) -> np.ndarray:
    """3-class posterior -> (no overlap, overlapped speech) posterior."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] != NUM_CLASSES:
        raise ValidationError(f"expected trailing dim {NUM_CLASSES}, got {probs.shape}")
    return np.stack([probs[..., 0] + probs[..., 1], probs[..., 2]], axis=-1)


def vad_labels(labels: np.ndarray) -> np.ndarray:
    """3-class ground truth -> binary speech-activity truth."""
    return (np.asarray(labels) >= 1).astype(np.int64)


def osd_labels(labels: np.ndarray) -> np.ndarray:
    """3-class ground truth -> binary overlap truth."""
    return (np.asarray(labels) >= 2).astype(np.int64)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def average_precision(scores: np.ndarray, relevant: np.ndarray) -> float:
    """Rank-based AP: mean of precision@k over the relevant items.

    Items are ranked by score descending (ties broken by original
    index). Returns NaN when there are no relevant items.
    """
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevant).astype(bool)
    if scores.shape != relevant.shape or scores.ndim != 1:
        raise ValidationError("scores and relevance must be equal-length 1-D")
    n_pos = int(relevant.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    rel_sorted = relevant[order]
    hits = np.cumsum(rel_sorted)
    ranks = np.arange(1, len(scores) + 1)
    precision_at_k = hits / ranks
    return float(precision_at_k[rel_sorted].sum() / n_pos)


def mean_average_precision(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean per-class AP; classes absent from the truth are skipped.

    For 2-column posteriors this is the AP of the positive class alone
    (the usual convention for detection-style binary tasks).
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValidationError("probs must be (n, k) aligned with labels (n,)")
    if probs.shape[1] == 2:
        return average_precision(probs[:, 1], labels == 1)
    aps = [
        average_precision(probs[:, c], labels == c)
        for c in range(probs.shape[1])
        if np.any(labels == c)
    ]
    if not aps:
        return float("nan")
    return float(np.mean(aps))


def compute_metrics(
    labels: np.ndarray,
    predictions: np.ndarray,
    probs: np.ndarray | None = None,
) -> dict[str, float]:
    """Accuracy plus support-weighted precision/recall/F1 (and mAP).

    Per class: precision = TP / (TP + FP), recall = TP / (TP + FN),
    F1 = 2PR / (P + R), each taken as 0 when its denominator is 0. The
    reported values average per-class numbers weighted by true-class
    support, which makes weighted recall equal accuracy. mAP appears
    only when posteriors are supplied.
    """
    labels = np.asarray(labels).reshape(-1)
    predictions = np.asarray(predictions).reshape(-1)
    if labels.shape != predictions.shape or labels.size == 0:
        raise ValidationError("labels and predictions must be equal-length and non-empty")
    classes = np.unique(np.concatenate([labels, predictions]))
    support = np.array([(labels == c).sum() for c in classes], dtype=np.float64)
    precision = np.zeros(len(classes))
    recall = np.zeros(len(classes))
    f1 = np.zeros(len(classes))
    for i, c in enumerate(classes):
        tp = float(np.sum((predictions == c) & (labels == c)))
        fp = float(np.sum((predictions == c) & (labels != c)))
        fn = float(np.sum((predictions != c) & (labels == c)))
        precision[i] = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall[i] = tp / (tp + fn) if tp + fn > 0 else 0.0
        if precision[i] + recall[i] > 0:
            f1[i] = 2 * precision[i] * recall[i] / (precision[i] + recall[i])
    total = support.sum()
    out = {
        "accuracy": float(np.mean(labels == predictions)),
        "precision": float((support * precision).sum() / total),
        "recall": float((support * recall).sum() / total),
        "f1": float((support * f1).sum() / total),
    }
    if probs is not None:
        out["map"] = mean_average_precision(probs, labels)
    return out


def confusion_matrix_percent(labels: np.ndarray, predictions: np.ndarray) -> np.ndarray:
    """Row-normalised 3x3 confusion matrix in percent.

    Rows are true classes, columns predictions; each row sums to 100.
    Rows with zero support are all-NaN rather than silently zero.
    """
    labels = np.asarray(labels).reshape(-1)
    predictions = np.asarray(predictions).reshape(-1)
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.float64)
    for t, p in zip(labels, predictions):
        counts[int(t), int(p)] += 1
    out = np.full((NUM_CLASSES, NUM_CLASSES), np.nan)
    row_sums = counts.sum(axis=1)
    nonzero = row_sums > 0
    out[nonzero] = counts[nonzero] / row_sums[nonzero, None] * 100.0
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

_CLASS_NAMES = ("noise", "single", "concurrent")
_TASKS = ("csd", "vad", "osd")


@dataclass
class EvalReport:
    """Scores of one evaluation run across the three tasks."""

    metrics: dict[str, dict[str, float]]
    confusion: np.ndarray
    n_frames: int
    n_sessions: int
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "n_frames": self.n_frames,
            "n_sessions": self.n_sessions,
            "metrics": {
                task: {k: _json_num(v) for k, v in vals.items()}
                for task, vals in self.metrics.items()
            },
            "confusion_percent": [
                [_json_num(v) for v in row] for row in self.confusion.tolist()
            ],
            "meta": self.meta,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"frames scored : {self.n_frames}",
            f"sessions      : {self.n_sessions}",
            "",
            f"{'task':<6}{'acc':>9}{'prec':>9}{'recall':>9}{'f1':>9}{'mAP':>9}",
        ]
        for task in _TASKS:
            if task not in self.metrics:
                continue
            m = self.metrics[task]
            lines.append(
                f"{task:<6}"
                + "".join(
                    _fmt_cell(m.get(key)) for key in ("accuracy", "precision", "recall", "f1", "map")
                )
            )
        lines.append("")
        lines.append("confusion (row = truth, % of row)")
        header = f"{'':<12}" + "".join(f"{name:>12}" for name in _CLASS_NAMES)
        lines.append(header)
        for i, name in enumerate(_CLASS_NAMES):
            cells = "".join(
                f"{'n/a':>12}" if np.isnan(v) else f"{v:>11.2f}%"
                for v in self.confusion[i]
            )
            lines.append(f"{name:<12}{cells}")
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        lines = ["true\\pred," + ",".join(_CLASS_NAMES)]
        for i, name in enumerate(_CLASS_NAMES):
            cells = ",".join(
                "nan" if np.isnan(v) else f"{v:.4f}" for v in self.confusion[i]
            )
            lines.append(f"{name},{cells}")
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path, stem: str = "eval") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "json": out_dir / f"{stem}.json",
            "text": out_dir / f"{stem}.txt",
            "confusion": out_dir / f"{stem}_confusion.csv",
        }
        paths["json"].write_text(self.to_json() + "\n")
        paths["text"].write_text(self.to_text())
        paths["confusion"].write_text(self.confusion_csv())
        return paths


def _json_num(v: float):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return None
    return float(v)


def _fmt_cell(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return f"{'n/a':>9}"
    return f"{v:>9.4f}"


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

PredictFn = Callable[[Sequence[Segment]], np.ndarray]
"""Batch of segments -> (B, window, 3) class posteriors."""


def session_frame_probs(
    segments: Sequence[Segment],
    predict: PredictFn,
    batch_size: int = 64,
    window: int = 7,
) -> tuple[np.ndarray, np.ndarray]:
    """All windows of one session -> per-frame (probs, labels).

    ``segments`` must be the hop-1 window set of a single session;
    frame truth is reassembled from the per-window labels the same way
    the posteriors are.
    """
    if not segments:
        raise ValidationError("no segments for session")
    sessions = {seg.session_id for seg in segments}
    if len(sessions) > 1:
        raise ValidationError(f"segments span multiple sessions: {sorted(sessions)}")
    ordered = sorted(segments, key=lambda s: s.start_frame)
    total_frames = ordered[-1].start_frame + window
    probs_by_start: dict[int, np.ndarray] = {}
    labels_by_start: dict[int, np.ndarray] = {}
    for i in range(0, len(ordered), batch_size):
        batch = ordered[i : i + batch_size]
        batch_probs = np.asarray(predict(batch), dtype=np.float64)
        if batch_probs.shape != (len(batch), window, NUM_CLASSES):
            raise ValidationError(
                f"predict returned shape {batch_probs.shape}, expected "
                f"{(len(batch), window, NUM_CLASSES)}"
            )
        for seg, p in zip(batch, batch_probs):
            probs_by_start[seg.start_frame] = p
            labels_by_start[seg.start_frame] = seg.labels.classes
    frame_probs = sliding_frame_probs(probs_by_start, total_frames, window)
    frame_labels = sliding_label_rows(labels_by_start, total_frames, window)
    return frame_probs, frame_labels


def sliding_label_rows(
    labels_by_start: Mapping[int, np.ndarray],
    total_frames: int,
    window: int = 7,
) -> np.ndarray:
    """Per-window label rows -> per-frame truth, mirroring sliding_frame_probs."""
    half = window // 2
    last_start = total_frames - window
    out = np.empty(total_frames, dtype=np.int64)
    for f in range(total_frames):
        start = min(max(f - half, 0), last_start)
        out[f] = labels_by_start[start][f - start]
    return out


def evaluate_frames(
    frame_probs: np.ndarray,
    frame_labels: np.ndarray,
    n_sessions: int = 1,
    meta: dict | None = None,
) -> EvalReport:
    """Per-frame posteriors + truth -> full three-task report."""
    frame_probs = np.asarray(frame_probs, dtype=np.float64)
    frame_labels = np.asarray(frame_labels).reshape(-1)
    preds = frame_probs.argmax(axis=-1)
    metrics = {"csd": compute_metrics(frame_labels, preds, frame_probs)}
    vad_p = derive_vad(frame_probs)
    osd_p = derive_osd(frame_probs)
    metrics["vad"] = compute_metrics(vad_labels(frame_labels), vad_p.argmax(-1), vad_p)
    metrics["osd"] = compute_metrics(osd_labels(frame_labels), osd_p.argmax(-1), osd_p)
    return EvalReport(
        metrics=metrics,
        confusion=confusion_matrix_percent(frame_labels, preds),
        n_frames=int(frame_labels.size),
        n_sessions=n_sessions,
        meta=meta or {},
    )


def evaluate_sessions(
    segments: Sequence[Segment],
    predict: PredictFn,
    batch_size: int = 64,
    window: int = 7,
    meta: dict | None = None,
) -> EvalReport:
    """Group segments by session, run sliding inference, score everything."""
    by_session: dict[str, list[Segment]] = {}
    for seg in segments:
        by_session.setdefault(seg.session_id, []).append(seg)
    all_probs = []
    all_labels = []
    for session_id in sorted(by_session):
        probs, labels = session_frame_probs(
            by_session[session_id], predict, batch_size, window
        )
        all_probs.append(probs)
        all_labels.append(labels)
    return evaluate_frames(
        np.concatenate(all_probs),
        np.concatenate(all_labels),
        n_sessions=len(by_session),
        meta=meta,
    )
