"""Synthetic audio-visual scenes for desk-scale testing.

Speakers are harmonic stacks (distinct fundamentals) over a noise
floor; faces are coloured blobs whose mouth region oscillates while the
speaker is active. The coupling between frame labels, audio content and
mouth motion is what makes tiny models able to learn the task in
seconds, which is exactly what pipeline tests need.

Two entry points: ``make_segments`` builds ready-made Segments in
memory, ``write_corpus`` lays a full session corpus (media files,
transcripts, detection caches, manifest) on disk in the layout the
preparation pipeline consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .preprocess import (
    FaceDetection,
    SpeakerInterval,
    save_detections,
    save_transcript,
)
from .types import (
    AudioWindow,
    DatasetManifest,
    FaceStreamSet,
    FrameLabels,
    Segment,
    SessionEntry,
    ValidationError,
    audio_window_length,
)

_NOISE_AMP = 0.02
_SPEECH_AMP = 0.25


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic session."""

    session_id: str
    n_frames: int = 100
    fps: float = 25.0
    n_speakers: int = 3
    mic_count: int = 2
    image_hw: tuple[int, int] = (96, 128)
    mean_on_s: float = 1.2
    mean_off_s: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_frames < 7 or self.n_speakers < 1 or self.mic_count < 1:
            raise ValidationError("scene needs >= 7 frames, >= 1 speaker, >= 1 mic")


def _speaker_f0(idx: int) -> float:
    return 130.0 + 45.0 * idx


def _harmonic_stack(f0: float, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t)
    for h in range(1, 4):
        out += np.sin(2 * np.pi * f0 * h * t + 0.7 * h) / h
    return out


def _activity_intervals(
    spec: SceneSpec, rng: np.random.Generator
) -> list[SpeakerInterval]:
    """Alternating on/off runs per speaker, exponential-ish durations."""
    duration_s = spec.n_frames / spec.fps
    intervals = []
    for s in range(spec.n_speakers):
        t = float(rng.uniform(0, spec.mean_off_s))
        while t < duration_s:
            on = float(rng.exponential(spec.mean_on_s)) + 0.15
            end = min(t + on, duration_s)
            intervals.append(SpeakerInterval(f"spk{s}", t, end))
            t = end + float(rng.exponential(spec.mean_off_s)) + 0.1
    return intervals


def _face_boxes(spec: SceneSpec) -> list[tuple[float, float, float, float]]:
    h, w = spec.image_hw
    boxes = []
    face_w = max(10, w // (spec.n_speakers + 1))
    face_h = max(10, h // 2)
    for s in range(spec.n_speakers):
        x = (s + 0.5) * w / spec.n_speakers - face_w / 2
        boxes.append((float(max(0, x)), float(h // 4), float(face_w), float(face_h)))
    return boxes


@dataclass(frozen=True)
class Scene:
    """Rendered synthetic session."""

    spec: SceneSpec
    audio: np.ndarray  # (mic_count, n_samples) float64 @ 16 kHz
    video: np.ndarray  # (n_frames, H, W, 3) uint8
    intervals: list[SpeakerInterval]
    detections: list[FaceDetection]


def generate_scene(spec: SceneSpec, detection_jitter_px: float = 1.5) -> Scene:
    """Render one scene: audio, video, transcript and detection cache."""
    rng = np.random.default_rng(spec.seed)
    intervals = _activity_intervals(spec, rng)
    rate = 16000
    n_samples = int(round(spec.n_frames / spec.fps * rate))
    t = np.arange(n_samples) / rate
    audio = rng.normal(0.0, _NOISE_AMP, size=(spec.mic_count, n_samples))
    for s in range(spec.n_speakers):
        voice = _harmonic_stack(_speaker_f0(s), t)
        gate = np.zeros(n_samples)
        for iv in intervals:
            if iv.speaker_id == f"spk{s}":
                gate[int(iv.start_s * rate) : int(iv.end_s * rate)] = 1.0
        for m in range(spec.mic_count):
            gain = 0.6 + 0.4 * ((s + m) % 2)  # crude spatial variation
            audio[m] += _SPEECH_AMP * gain * voice * gate

    h, w = spec.image_hw
    boxes = _face_boxes(spec)
    colors = [(200, 170, 150), (160, 190, 140), (150, 160, 210), (210, 150, 180)]
    video = rng.integers(20, 40, size=(spec.n_frames, h, w, 3), dtype=np.uint8)
    active_at = _activity_lookup(intervals, spec.fps, spec.n_frames)
    for f in range(spec.n_frames):
        for s, (x, y, bw, bh) in enumerate(boxes):
            x0, y0, x1, y1 = int(x), int(y), int(x + bw), int(y + bh)
            video[f, y0:y1, x0:x1] = colors[s % len(colors)]
            # mouth: lower-middle strip, brightness oscillates while talking
            my0 = y0 + int(bh * 0.65)
            my1 = min(y1, my0 + max(2, int(bh * 0.18)))
            mx0 = x0 + int(bw * 0.3)
            mx1 = x0 + int(bw * 0.7)
            if f"spk{s}" in active_at[f]:
                level = int(40 + 150 * abs(np.sin(2 * np.pi * 2.0 * f / spec.fps + s)))
            else:
                level = 40
            video[f, my0:my1, mx0:mx1] = level

    detections = []
    for f in range(spec.n_frames):
        for s, (x, y, bw, bh) in enumerate(boxes):
            jx = float(rng.normal(0, detection_jitter_px))
            jy = float(rng.normal(0, detection_jitter_px))
            detections.append(
                FaceDetection(
                    frame_index=f,
                    track_id=s,
                    bbox=(
                        float(np.clip(x + jx, 0, w - 4)),
                        float(np.clip(y + jy, 0, h - 4)),
                        bw,
                        bh,
                    ),
                )
            )
    return Scene(spec=spec, audio=audio, video=video, intervals=intervals, detections=detections)


def _activity_lookup(
    intervals: list[SpeakerInterval], fps: float, n_frames: int
) -> list[set[str]]:
    out = []
    for f in range(n_frames):
        midpoint = (f + 0.5) / fps
        out.append(
            {iv.speaker_id for iv in intervals if iv.start_s <= midpoint < iv.end_s}
        )
    return out


class StubFaceDetector:
    """FaceDetectorPort stand-in that replays a scene's known boxes."""

    def __init__(self, detections: list[FaceDetection]):
        self._detections = list(detections)

    def detect(self, frames: np.ndarray) -> list[FaceDetection]:
        return [d for d in self._detections if d.frame_index < frames.shape[0]]


def write_corpus(
    specs: list[SceneSpec],
    out_dir: str | Path,
    max_streams: int = 8,
    split: str = "train",
) -> Path:
    """Render scenes to disk in the manifest layout; returns manifest path."""
    out_dir = Path(out_dir)
    media = out_dir / "media"
    media.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in specs:
        scene = generate_scene(spec)
        sid = spec.session_id
        audio_path = media / f"{sid}_audio.npy"
        video_path = media / f"{sid}_video.npy"
        transcript_path = media / f"{sid}_transcript.txt"
        det_path = media / f"{sid}_detections.jsonl"
        np.save(audio_path, scene.audio.astype(np.float32))
        np.save(video_path, scene.video)
        save_transcript(scene.intervals, transcript_path)
        save_detections(scene.detections, det_path)
        entries.append(
            SessionEntry(
                session_id=sid,
                audio_path=str(audio_path),
                video_path=str(video_path),
                transcript_path=str(transcript_path),
                fps=spec.fps,
                mic_count=spec.mic_count,
                detections_path=str(det_path),
            )
        )
    manifest = DatasetManifest(entries=entries, max_streams=max_streams, split=split)
    manifest_path = out_dir / "manifest.jsonl"
    manifest.save(manifest_path)
    return manifest_path


# ---------------------------------------------------------------------------
# direct segment synthesis (no files)
# ---------------------------------------------------------------------------


def make_segments(
    n_segments: int,
    seed: int = 0,
    fps: float = 25.0,
    mic_count: int = 2,
    max_streams: int = 3,
    image_size: int = 32,
    window: int = 7,
    class_shares: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
    constant_label_per_segment: bool = True,
) -> list[Segment]:
    """Directly synthesise labelled Segments with a controlled class mix.

    Each segment gets a class drawn from ``class_shares``; with
    ``constant_label_per_segment`` every frame of the window carries it
    (the easiest regime for overfitting tests), otherwise frames vary
    around it. Audio and mouth motion are rendered consistently with
    the labels, exactly as in full scenes.
    """
    rng = np.random.default_rng(seed)
    rate = 16000
    length = audio_window_length(fps, rate, window)
    shares = np.asarray(class_shares, dtype=np.float64)
    shares = shares / shares.sum()
    segments = []
    for i in range(n_segments):
        base = int(rng.choice(3, p=shares))
        if constant_label_per_segment:
            labels = np.full(window, base, dtype=np.int64)
        else:
            labels = np.clip(
                base + rng.integers(-1, 2, size=window), 0, 2
            ).astype(np.int64)
        audio = rng.normal(0.0, _NOISE_AMP, size=(mic_count, length))
        n_speakers = min(2, max_streams)
        samples_per_frame = length // window
        t = np.arange(length) / rate
        for f, lab in enumerate(labels):
            lo, hi = f * samples_per_frame, (f + 1) * samples_per_frame
            if f == window - 1:
                hi = length
            for s in range(int(lab)):
                voice = _harmonic_stack(_speaker_f0(s), t[lo:hi])
                audio[:, lo:hi] += _SPEECH_AMP * voice

        streams = np.zeros(
            (max_streams, window, 3, image_size, image_size), dtype=np.float32
        )
        valid = np.zeros(max_streams, dtype=bool)
        for s in range(n_speakers):
            valid[s] = True
            base_color = np.array([0.5 + 0.15 * s, 0.4, 0.6 - 0.1 * s], dtype=np.float32)
            clip = np.ones((window, 3, image_size, image_size), dtype=np.float32)
            clip *= base_color[None, :, None, None]
            m0 = int(image_size * 0.6)
            m1 = int(image_size * 0.8)
            for f, lab in enumerate(labels):
                talking = s < int(lab)
                level = (
                    0.2 + 0.7 * abs(np.sin(2 * np.pi * 2.0 * f / fps + s))
                    if talking
                    else 0.2
                )
                clip[f, :, m0:m1, m0:m1] = level
            streams[s] = clip
        segments.append(
            Segment(
                audio=AudioWindow(samples=audio, sample_rate=rate),
                faces=FaceStreamSet(streams=streams, valid_mask=valid),
                labels=FrameLabels(classes=labels),
                session_id=f"synth{i:04d}",
                start_frame=0,
                fps=fps,
            )
        )
    return segments
