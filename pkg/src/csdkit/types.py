"""Core domain types shared across the pipeline.

Everything here is immutable after construction (frozen dataclasses over
read-only numpy arrays), so instances are safe to share between threads
and preprocessing workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_WINDOW_FRAMES = 7
DEFAULT_SAMPLE_RATE = 16000
NUM_CLASSES = 3


class ValidationError(ValueError):
    """Raised when an input violates a documented contract."""


class CsdClass(IntEnum):
    """Frame-level speaker-activity class: a three-tier speaker count."""

    NOISE_ONLY = 0
    SINGLE_SPEAKER = 1
    CONCURRENT_SPEAKERS = 2


def label_from_speaker_count(active_speakers: int) -> CsdClass:
    """Map a number of simultaneously active speakers to its class.

    0 -> NOISE_ONLY, 1 -> SINGLE_SPEAKER, >= 2 -> CONCURRENT_SPEAKERS.
    """
    if active_speakers < 0:
        raise ValidationError(f"speaker count must be >= 0, got {active_speakers}")
    if active_speakers == 0:
        return CsdClass.NOISE_ONLY
    if active_speakers == 1:
        return CsdClass.SINGLE_SPEAKER
    return CsdClass.CONCURRENT_SPEAKERS


def audio_window_length(fps: float, sample_rate: int, window_frames: int) -> int:
    """Number of audio samples spanning ``window_frames`` video frames.

    The frame and sample grids must align exactly: ``window_frames *
    sample_rate`` has to be divisible by ``fps`` (e.g. 5600 samples for
    7 frames at 25 fps / 16 kHz, 4480 at 20 fps).
    """
    if fps <= 0 or sample_rate <= 0 or window_frames < 0:
        raise ValidationError(
            f"fps, sample_rate must be positive and window_frames >= 0; "
            f"got fps={fps}, sample_rate={sample_rate}, window_frames={window_frames}"
        )
    total = window_frames * sample_rate
    length = total / fps
    if abs(length - round(length)) > 1e-9:
        raise ValidationError(
            f"window of {window_frames} frames at {fps} fps does not align with "
            f"the {sample_rate} Hz sample grid (got fractional length {length})"
        )
    return int(round(length))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FrameLabels:
    """Per-frame class labels for one window.

    classes: int array of shape (window_frames,), values in {0, 1, 2}.
    """

    classes: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.classes, dtype=np.int64)
        if arr.ndim != 1:
            raise ValidationError(f"labels must be 1-D, got shape {arr.shape}")
        if arr.size == 0:
            raise ValidationError("labels must not be empty")
        if not np.isin(arr, [0, 1, 2]).all():
            raise ValidationError(f"labels must be in {{0,1,2}}, got {arr.tolist()}")
        object.__setattr__(self, "classes", _readonly(arr))

    def __len__(self) -> int:
        return int(self.classes.size)

    def __iter__(self):
        return iter(CsdClass(int(c)) for c in self.classes)


@dataclass(frozen=True)
class AudioWindow:
    """Multichannel audio covering one window.

    samples: float array (n_mics, n_samples); sample_rate in Hz (16 kHz
    after preprocessing).
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"audio must be (n_mics, n_samples), got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValidationError("audio needs at least one microphone channel")
        if not np.isfinite(arr).all():
            raise ValidationError("audio contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", _readonly(arr))

    @property
    def n_mics(self) -> int:
        return int(self.samples.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[1])


@dataclass(frozen=True)
class VideoWindow:
    """One window of video frames, shape (T, C, H, W), pixels in [0, 1]."""

    frames: np.ndarray
    fps: float

    def __post_init__(self) -> None:
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ValidationError(f"video must be (T, 3, H, W), got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("video pixels must lie in [0, 1]")
        if self.fps <= 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", _readonly(arr))


@dataclass(frozen=True)
class FaceStreamSet:
    """Fixed-size stack of per-face cropped clips plus a validity mask.

    streams: (max_streams, T, 3, H, W); slots where valid_mask is False
    are exactly zero.
    """

    streams: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self) -> None:
        streams = np.asarray(self.streams, dtype=np.float32)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if streams.ndim != 5 or streams.shape[2] != 3:
            raise ValidationError(
                f"streams must be (max_streams, T, 3, H, W), got {streams.shape}"
            )
        if mask.shape != (streams.shape[0],):
            raise ValidationError(
                f"valid_mask must have shape ({streams.shape[0]},), got {mask.shape}"
            )
        for i in np.nonzero(~mask)[0]:
            if streams[i].any():
                raise ValidationError(f"padded stream slot {i} must be all-zero")
        object.__setattr__(self, "streams", _readonly(streams))
        object.__setattr__(self, "valid_mask", _readonly(mask))

    @property
    def max_streams(self) -> int:
        return int(self.streams.shape[0])

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())


@dataclass(frozen=True)
class Segment:
    """One 7-frame audio-visual window with per-frame labels.

    The unit of both training and inference. Audio duration must equal
    the window's frame span at the session fps.
    """

    audio: AudioWindow
    faces: FaceStreamSet
    labels: FrameLabels
    session_id: str
    start_frame: int
    fps: float

    def __post_init__(self) -> None:
        if self.start_frame < 0:
            raise ValidationError(f"start_frame must be >= 0, got {self.start_frame}")
        window = len(self.labels)
        if self.faces.streams.shape[1] != window:
            raise ValidationError(
                f"face streams cover {self.faces.streams.shape[1]} frames but the "
                f"window is {window} frames"
            )
        expected = audio_window_length(self.fps, self.audio.sample_rate, window)
        if self.audio.n_samples != expected:
            raise ValidationError(
                f"audio has {self.audio.n_samples} samples; a {window}-frame window "
                f"at {self.fps} fps / {self.audio.sample_rate} Hz requires {expected}"
            )

    @property
    def window_frames(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class SessionEntry:
    """One session row of a dataset manifest."""

    session_id: str
    audio_path: str
    video_path: str
    transcript_path: str
    fps: float
    mic_count: int
    detections_path: str | None = None

    def __post_init__(self) -> None:
        if self.fps <= 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        if self.mic_count < 1:
            raise ValidationError(f"mic_count must be >= 1, got {self.mic_count}")


# documented field order for manifest session records
_SESSION_FIELDS = (
    "session_id",
    "audio_path",
    "video_path",
    "transcript_path",
    "fps",
    "mic_count",
    "detections_path",
)


@dataclass(frozen=True)
class DatasetManifest:
    """Corpus description: one session record per line plus a header.

    Serialized as line-delimited JSON. Line 1 is a header object
    ``{"type": "csd-manifest", "version": 1, "max_streams": int,
    "split": str}``; each following line is one session record with
    fields in the order: session_id, audio_path, video_path,
    transcript_path, fps, mic_count, detections_path.
    """

    entries: tuple[SessionEntry, ...]
    max_streams: int
    split: str

    def __post_init__(self) -> None:
        if self.max_streams < 1:
            raise ValidationError(f"max_streams must be >= 1, got {self.max_streams}")
        if self.split not in ("train", "dev", "test"):
            raise ValidationError(f"split must be train/dev/test, got {self.split!r}")
        object.__setattr__(self, "entries", tuple(self.entries))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w") as fh:
            header = {
                "type": "csd-manifest",
                "version": 1,
                "max_streams": self.max_streams,
                "split": self.split,
            }
            fh.write(json.dumps(header) + "\n")
            for e in self.entries:
                record = {k: getattr(e, k) for k in _SESSION_FIELDS}
                fh.write(json.dumps(record) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise ValidationError(f"manifest {path} is empty")
        header = json.loads(lines[0])
        if header.get("type") != "csd-manifest":
            raise ValidationError(f"{path} is not a csd-manifest (missing header line)")
        entries = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            entries.append(SessionEntry(**{k: rec.get(k) for k in _SESSION_FIELDS}))
        return cls(
            entries=tuple(entries),
            max_streams=int(header["max_streams"]),
            split=str(header["split"]),
        )


def class_frame_counts(segments: Sequence[Segment]) -> np.ndarray:
    """Total frames per class over a collection of segments (length 3)."""
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for seg in segments:
        counts += np.bincount(seg.labels.classes, minlength=NUM_CLASSES)
    return counts
