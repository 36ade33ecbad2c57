"""Raw sessions -> Segments: resampling, windowing, face streams, labels.

All functions are pure over immutable inputs; sessions can be processed
in parallel with no shared state. Media at desk scale is read from
float32 WAV or ``.npy`` files (video as ``(T, H, W, 3)`` uint8 arrays);
decoding real-corpus container formats is adapter territory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy.io import wavfile

from .types import (
    AudioWindow,
    DatasetManifest,
    FaceStreamSet,
    FrameLabels,
    Segment,
    SessionEntry,
    ValidationError,
    audio_window_length,
    label_from_speaker_count,
)

TARGET_SAMPLE_RATE = 16000
DEFAULT_CROP_SIZE = 224


@dataclass(frozen=True)
class FaceDetection:
    """One detected face box in one frame.

    bbox is (x, y, w, h) in pixels; track_id is stable across the frames
    of a window.
    """

    frame_index: int
    track_id: int
    bbox: tuple[float, float, float, float]
    source_camera: str = "main"

    def __post_init__(self) -> None:
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValidationError(f"bbox must have positive size, got {self.bbox}")


class FaceDetectorPort(Protocol):
    """Interface a face detector must satisfy: frames -> tracked boxes.

    ``frames`` is a (T, H, W, 3) uint8 array; the result lists one
    FaceDetection per visible face per frame, with track ids stable
    within the clip.
    """

    def detect(self, frames: np.ndarray) -> list[FaceDetection]: ...


@dataclass(frozen=True)
class SpeakerInterval:
    """One transcript row: a speaker active on [start_s, end_s)."""

    speaker_id: str
    start_s: float
    end_s: float

    def __post_init__(self) -> None:
        if self.start_s < 0 or self.end_s < self.start_s:
            raise ValidationError(
                f"interval must satisfy 0 <= start <= end, got "
                f"[{self.start_s}, {self.end_s}]"
            )


def resample_audio(samples: np.ndarray, from_rate: int, to_rate: int = TARGET_SAMPLE_RATE) -> np.ndarray:
    """Resample multichannel audio to ``to_rate`` (default 16 kHz).

    Output length is exactly round(n * to_rate / from_rate); the input
    passes through untouched when rates already match. Linear
    interpolation over the exact output grid (the length contract is
    normative, the kernel is not).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[None, :]
    if from_rate <= 0:
        raise ValidationError(f"from_rate must be positive, got {from_rate}")
    if samples.shape[-1] == 0:
        raise ValidationError("cannot resample empty audio")
    if from_rate == to_rate:
        return samples
    n_in = samples.shape[-1]
    n_out = int(round(n_in * to_rate / from_rate))
    # sample the input at times k / to_rate, expressed in input-sample units
    positions = np.arange(n_out) * (from_rate / to_rate)
    grid = np.arange(n_in, dtype=np.float64)
    out = np.empty((samples.shape[0], n_out), dtype=np.float64)
    for ch in range(samples.shape[0]):
        out[ch] = np.interp(positions, grid, samples[ch])
    return out


def window_session(total_frames: int, window: int = 7, hop: int = 1) -> list[int]:
    """Start frames of all full windows over a session.

    Returns {0, hop, 2*hop, ...} with start + window <= total_frames;
    sessions shorter than one window yield an empty list.
    """
    if window < 1 or hop < 1:
        raise ValidationError(f"window and hop must be >= 1, got {window}, {hop}")
    if total_frames < window:
        return []
    count = (total_frames - window) // hop + 1
    return [i * hop for i in range(count)]


def _crop_resize(frame: np.ndarray, bbox: tuple[float, float, float, float], size: int) -> np.ndarray:
    """Crop a (H, W, 3) frame to bbox and resize to (size, size, 3).

    Nearest-neighbour resize on an exact output grid; boxes are clipped
    to the image.
    """
    h_img, w_img = frame.shape[:2]
    x, y, w, h = bbox
    x0 = int(np.clip(np.floor(x), 0, w_img - 1))
    y0 = int(np.clip(np.floor(y), 0, h_img - 1))
    x1 = int(np.clip(np.ceil(x + w), x0 + 1, w_img))
    y1 = int(np.clip(np.ceil(y + h), y0 + 1, h_img))
    crop = frame[y0:y1, x0:x1]
    rows = np.minimum((np.arange(size) * crop.shape[0]) // size, crop.shape[0] - 1)
    cols = np.minimum((np.arange(size) * crop.shape[1]) // size, crop.shape[1] - 1)
    return crop[rows][:, cols]


def assemble_face_streams(
    detections: Sequence[FaceDetection],
    video: np.ndarray,
    max_streams: int,
    window_frames: int = 7,
    crop_size: int = DEFAULT_CROP_SIZE,
) -> FaceStreamSet:
    """Build the fixed-size stack of cropped face clips for one window.

    One stream per track, ordered by first appearance in the detection
    list (cameras contribute tracks in list order, so multi-camera
    sessions concatenate naturally before padding). Each frame is
    cropped to its box and resized; frames where a track has no
    detection reuse the most recent available crop (hold-last). Slots
    beyond the detected track count stay zero with valid_mask False.

    video: (T, H, W, 3) uint8 or float array covering the window.
    """
    video = np.asarray(video)
    if video.ndim != 4 or video.shape[0] < window_frames:
        raise ValidationError(
            f"video must be (T>=window, H, W, 3), got shape {video.shape}"
        )

    track_order: list[tuple[str, int]] = []
    by_track: dict[tuple[str, int], dict[int, FaceDetection]] = {}
    for det in detections:
        key = (det.source_camera, det.track_id)
        if key not in by_track:
            track_order.append(key)
            by_track[key] = {}
        by_track[key][det.frame_index] = det

    if len(track_order) > max_streams:
        dropped = [key for key in track_order[max_streams:]]
        raise ValidationError(
            f"{len(track_order)} face tracks exceed max_streams={max_streams}; "
            f"dropped tracks: {dropped}"
        )

    if video.dtype == np.uint8:
        scale = 1.0 / 255.0
    else:
        scale = 1.0
    streams = np.zeros(
        (max_streams, window_frames, 3, crop_size, crop_size), dtype=np.float32
    )
    mask = np.zeros(max_streams, dtype=bool)
    for slot, key in enumerate(track_order):
        frames_seen = by_track[key]
        last_crop: np.ndarray | None = None
        # hold-last needs a seed crop for leading gaps: use the first available
        first_idx = min(frames_seen)
        for f in range(window_frames):
            det = frames_seen.get(f, frames_seen[first_idx] if f < first_idx else None)
            if det is not None:
                if det.frame_index >= video.shape[0]:
                    raise ValidationError(
                        f"detection references frame {det.frame_index} but video "
                        f"has {video.shape[0]} frames"
                    )
                last_crop = _crop_resize(video[det.frame_index], det.bbox, crop_size)
            assert last_crop is not None
            streams[slot, f] = (last_crop.transpose(2, 0, 1) * scale).astype(np.float32)
        mask[slot] = True
    return FaceStreamSet(streams=streams, valid_mask=mask)


def labels_for_window(
    transcript: Sequence[SpeakerInterval],
    fps: float,
    start_frame: int,
    window: int = 7,
) -> FrameLabels:
    """Per-frame labels from speaker-activity intervals.

    A frame's label is the number of speakers active at the frame's
    midpoint time, mapped through the class tiers.
    """
    classes = []
    for f in range(start_frame, start_frame + window):
        midpoint = (f + 0.5) / fps
        active = {
            iv.speaker_id for iv in transcript if iv.start_s <= midpoint < iv.end_s
        }
        classes.append(int(label_from_speaker_count(len(active))))
    return FrameLabels(classes=np.array(classes, dtype=np.int64))


# ---------------------------------------------------------------------------
# session-level drivers and on-disk formats
# ---------------------------------------------------------------------------


def load_transcript(path: str | Path) -> list[SpeakerInterval]:
    """Read a per-session interval file: ``speaker_id start_s end_s`` per line."""
    intervals = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValidationError(f"bad transcript line {raw!r} in {path}")
        intervals.append(SpeakerInterval(parts[0], float(parts[1]), float(parts[2])))
    return intervals


def save_transcript(intervals: Iterable[SpeakerInterval], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for iv in intervals:
            fh.write(f"{iv.speaker_id} {iv.start_s:.6f} {iv.end_s:.6f}\n")


def load_detections(path: str | Path) -> list[FaceDetection]:
    """Read a detection cache: one JSON record per line.

    Record fields: frame (int), track (int), bbox ([x, y, w, h]),
    camera (str). Caches make external detector runs replayable.
    """
    dets = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        dets.append(
            FaceDetection(
                frame_index=int(rec["frame"]),
                track_id=int(rec["track"]),
                bbox=tuple(float(v) for v in rec["bbox"]),
                source_camera=rec.get("camera", "main"),
            )
        )
    return dets


def save_detections(detections: Iterable[FaceDetection], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for det in detections:
            rec = {
                "frame": det.frame_index,
                "track": det.track_id,
                "bbox": list(det.bbox),
                "camera": det.source_camera,
            }
            fh.write(json.dumps(rec) + "\n")


def load_audio(path: str | Path) -> tuple[np.ndarray, int]:
    """Load (n_mics, n_samples) float audio + rate from .wav or .npy."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.ndim == 1:
            arr = arr[None, :]
        return np.asarray(arr, dtype=np.float64), TARGET_SAMPLE_RATE
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    else:
        data = data.astype(np.float64)
    if data.ndim == 1:
        data = data[None, :]
    else:
        data = data.T  # wav stores (samples, channels)
    return data, int(rate)


def load_video(path: str | Path) -> np.ndarray:
    """Load (T, H, W, 3) frames from .npy."""
    arr = np.load(Path(path))
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValidationError(f"video array must be (T, H, W, 3), got {arr.shape}")
    return arr


def segment_session(
    entry: SessionEntry,
    max_streams: int,
    detector: FaceDetectorPort | None = None,
    window: int = 7,
    hop: int = 1,
    crop_size: int = DEFAULT_CROP_SIZE,
) -> list[Segment]:
    """Produce all Segments of one session.

    Detections come from the cached file named in the manifest entry, or
    from ``detector`` when no cache exists.
    """
    raw_audio, rate = load_audio(entry.audio_path)
    if raw_audio.shape[0] != entry.mic_count:
        raise ValidationError(
            f"session {entry.session_id}: audio has {raw_audio.shape[0]} channels, "
            f"manifest says {entry.mic_count}"
        )
    audio = resample_audio(raw_audio, rate)
    video = load_video(entry.video_path)
    transcript = load_transcript(entry.transcript_path)
    if entry.detections_path:
        detections = load_detections(entry.detections_path)
    elif detector is not None:
        detections = detector.detect(video)
    else:
        raise ValidationError(
            f"session {entry.session_id} has no detection cache and no detector"
        )

    dets_by_frame: dict[int, list[FaceDetection]] = {}
    for det in detections:
        dets_by_frame.setdefault(det.frame_index, []).append(det)

    samples_per_window = audio_window_length(entry.fps, TARGET_SAMPLE_RATE, window)
    samples_per_frame = samples_per_window / window
    segments = []
    for start in window_session(video.shape[0], window, hop):
        a0 = int(round(start * samples_per_frame))
        window_audio = audio[:, a0 : a0 + samples_per_window]
        if window_audio.shape[1] < samples_per_window:
            break  # audio shorter than video coverage
        window_dets = [
            FaceDetection(det.frame_index - start, det.track_id, det.bbox, det.source_camera)
            for f in range(start, start + window)
            for det in dets_by_frame.get(f, [])
        ]
        faces = assemble_face_streams(
            window_dets, video[start : start + window], max_streams, window, crop_size
        )
        labels = labels_for_window(transcript, entry.fps, start, window)
        segments.append(
            Segment(
                audio=AudioWindow(samples=window_audio, sample_rate=TARGET_SAMPLE_RATE),
                faces=faces,
                labels=labels,
                session_id=entry.session_id,
                start_frame=start,
                fps=entry.fps,
            )
        )
    return segments


# ---------------------------------------------------------------------------
# segment store
# ---------------------------------------------------------------------------


def save_segments(segments: Sequence[Segment], out_dir: str | Path) -> Path:
    """Write segments as one .npz each plus an index.jsonl; returns the dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_path = out_dir / "index.jsonl"
    with index_path.open("w") as idx:
        for seg in segments:
            name = f"{seg.session_id}_{seg.start_frame:06d}.npz"
            np.savez_compressed(
                out_dir / name,
                audio=seg.audio.samples.astype(np.float32),
                streams=seg.faces.streams,
                valid_mask=seg.faces.valid_mask,
                labels=seg.labels.classes,
            )
            idx.write(
                json.dumps(
                    {
                        "file": name,
                        "session_id": seg.session_id,
                        "start_frame": seg.start_frame,
                        "fps": seg.fps,
                        "labels": seg.labels.classes.tolist(),
                    }
                )
                + "\n"
            )
    return out_dir


def load_segments(store_dir: str | Path) -> list[Segment]:
    """Load every segment from a store directory, ordered as indexed."""
    store_dir = Path(store_dir)
    index_path = store_dir / "index.jsonl"
    if not index_path.exists():
        raise ValidationError(f"{store_dir} is not a segment store (no index.jsonl)")
    segments = []
    for line in index_path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        data = np.load(store_dir / rec["file"])
        segments.append(
            Segment(
                audio=AudioWindow(
                    samples=data["audio"].astype(np.float64),
                    sample_rate=TARGET_SAMPLE_RATE,
                ),
                faces=FaceStreamSet(
                    streams=data["streams"], valid_mask=data["valid_mask"]
                ),
                labels=FrameLabels(classes=data["labels"]),
                session_id=rec["session_id"],
                start_frame=int(rec["start_frame"]),
                fps=float(rec["fps"]),
            )
        )
    return segments


def prepare_corpus(
    manifest: DatasetManifest,
    out_dir: str | Path,
    detector: FaceDetectorPort | None = None,
    window: int = 7,
    hop: int = 1,
    crop_size: int = DEFAULT_CROP_SIZE,
) -> tuple[list[Segment], dict[str, str]]:
    """Segment every session of a manifest into ``out_dir``.

    Returns (segments, errors) where errors maps session_id -> message
    for sessions whose media could not be processed.
    """
    all_segments: list[Segment] = []
    errors: dict[str, str] = {}
    for entry in manifest.entries:
        try:
            all_segments.extend(
                segment_session(entry, manifest.max_streams, detector, window, hop, crop_size)
            )
        except (OSError, ValidationError) as exc:
            errors[entry.session_id] = str(exc)
    save_segments(all_segments, out_dir)
    return all_segments, errors
