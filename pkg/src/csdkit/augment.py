"""Audio and visual augmentation for training-set expansion.

Audio ops are numpy/scipy; visual ops run through torchvision v2
transforms with one parameter draw per clip so every frame of a window
moves together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torchvision.transforms.v2 as T

from .types import ValidationError

_STFT_SIZE = 512  # analysis block for spectral masking (non-overlapping)
_PV_SIZE = 1024  # phase-vocoder frame
_PV_HOP = 256


@dataclass(frozen=True)
class AugmentConfig:
    """Knobs for the per-epoch augmentation pass.

    Probabilities are applied independently per segment per pass;
    multiplier is how many augmented copies each source segment yields
    per epoch.
    """

    pitch_semitones: float = 2.0
    pitch_prob: float = 0.5
    spectral_mask_prob: float = 0.3
    mask_bands: int = 2
    mask_band_width: int = 12
    visual_prob: float = 0.5
    frame_mask_prob: float = 0.3
    frame_mask_patches: int = 45
    frame_mask_patch_size: int = 10
    multiplier: int = 2
    rotation_deg: float = 10.0
    jitter_brightness: float = 0.3
    jitter_contrast: float = 0.3
    blur_sigma: tuple[float, float] = (0.1, 1.5)

    def __post_init__(self) -> None:
        for name in ("pitch_prob", "spectral_mask_prob", "visual_prob", "frame_mask_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {p}")
        if self.multiplier < 0:
            raise ValidationError(f"multiplier must be >= 0, got {self.multiplier}")


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------


def _stft(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    window = np.hanning(size + 1)[:-1]
    n_frames = 1 + max(0, (len(x) - size)) // hop
    frames = np.stack(
        [x[i * hop : i * hop + size] * window for i in range(n_frames)]
    )
    return np.fft.rfft(frames, axis=-1)


def _time_stretch(x: np.ndarray, rate: float) -> np.ndarray:
    """Phase-vocoder time stretch by ``rate`` (>1 = shorter output)."""
    size, hop = _PV_SIZE, _PV_HOP
    if len(x) < size:
        pad = np.zeros(size, dtype=np.float64)
        pad[: len(x)] = x
        x = pad
    spec = _stft(x, size, hop)
    n_in = spec.shape[0]
    # analysis instants in input-frame units
    steps = np.arange(0, n_in - 1, rate)
    omega = 2 * np.pi * hop * np.arange(size // 2 + 1) / size
    phase = np.angle(spec[0])
    window = np.hanning(size + 1)[:-1]
    out_len = len(steps) * hop + size
    out = np.zeros(out_len)
    norm = np.zeros(out_len)
    for i, s in enumerate(steps):
        lo = int(np.floor(s))
        frac = s - lo
        mag = (1 - frac) * np.abs(spec[lo]) + frac * np.abs(spec[lo + 1])
        frame = np.fft.irfft(mag * np.exp(1j * phase), n=size) * window
        out[i * hop : i * hop + size] += frame
        norm[i * hop : i * hop + size] += window**2
        # advance phase by the measured instantaneous frequency
        dphi = np.angle(spec[lo + 1]) - np.angle(spec[lo]) - omega
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + omega + dphi
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    return out


def pitch_shift(samples: np.ndarray, semitones: float) -> np.ndarray:
    """Shift pitch by ``semitones`` without changing duration.

    Phase-vocoder time stretch followed by resampling back to the
    original length. Exactly 0 semitones returns the input unchanged
    (same array contents, same length). Works per channel on
    (n_mics, n_samples) or 1-D input.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if semitones == 0.0:
        return samples.copy()
    squeeze = samples.ndim == 1
    if squeeze:
        samples = samples[None, :]
    ratio = 2.0 ** (semitones / 12.0)
    n = samples.shape[-1]
    out = np.empty_like(samples)
    for ch in range(samples.shape[0]):
        stretched = _time_stretch(samples[ch], 1.0 / ratio)
        # resample: read the stretched signal at positions k * ratio
        positions = np.arange(n, dtype=np.float64) * ratio
        positions = np.clip(positions, 0, len(stretched) - 1)
        out[ch] = np.interp(positions, np.arange(len(stretched)), stretched)
    return out[0] if squeeze else out


def spectral_mask(
    samples: np.ndarray,
    rng: np.random.Generator,
    n_bands: int = 2,
    band_width: int = 12,
    mode: str = "band",
) -> np.ndarray:
    """Zero random frequency content in a 512-point block transform.

    The signal is analysed in non-overlapping 512-sample rectangular
    blocks. ``band`` mode zeroes ``n_bands`` random contiguous runs of
    ``band_width`` bins across every block; ``patch`` mode zeroes
    rectangular time-frequency patches. Masked bins re-analyse to
    exactly zero and signal energy never increases. Trailing samples
    that do not fill a block pass through untouched.
    """
    if mode not in ("band", "patch"):
        raise ValidationError(f"mode must be 'band' or 'patch', got {mode!r}")
    samples = np.asarray(samples, dtype=np.float64)
    squeeze = samples.ndim == 1
    if squeeze:
        samples = samples[None, :]
    n = samples.shape[-1]
    n_blocks = n // _STFT_SIZE
    if n_blocks == 0:
        return samples[0].copy() if squeeze else samples.copy()
    n_bins = _STFT_SIZE // 2 + 1
    out = samples.copy()
    for ch in range(samples.shape[0]):
        head = samples[ch, : n_blocks * _STFT_SIZE].reshape(n_blocks, _STFT_SIZE)
        spec = np.fft.rfft(head, axis=-1)
        if mode == "band":
            for _ in range(n_bands):
                lo = int(rng.integers(0, max(1, n_bins - band_width)))
                spec[:, lo : lo + band_width] = 0.0
        else:
            for _ in range(n_bands):
                lo = int(rng.integers(0, max(1, n_bins - band_width)))
                t0 = int(rng.integers(0, n_blocks))
                t1 = int(rng.integers(t0 + 1, n_blocks + 1))
                spec[t0:t1, lo : lo + band_width] = 0.0
        out[ch, : n_blocks * _STFT_SIZE] = np.fft.irfft(spec, n=_STFT_SIZE, axis=-1).reshape(-1)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# visual
# ---------------------------------------------------------------------------


def visual_augment(
    clip: torch.Tensor,
    seed: int,
    rotation_deg: float = 10.0,
    jitter_brightness: float = 0.3,
    jitter_contrast: float = 0.3,
    blur_sigma: tuple[float, float] = (0.1, 1.5),
) -> torch.Tensor:
    """Apply one photometric+geometric draw to a whole (T, C, H, W) clip.

    Parameters are sampled once under a forked RNG seeded with ``seed``,
    then applied to all frames, so the clip stays temporally coherent
    and the same seed reproduces the same output bit-for-bit.
    """
    if clip.ndim != 4:
        raise ValidationError(f"clip must be (T, C, H, W), got shape {tuple(clip.shape)}")
    transform = T.Compose(
        [
            T.RandomRotation(degrees=rotation_deg),
            T.ColorJitter(brightness=jitter_brightness, contrast=jitter_contrast),
            T.RandomHorizontalFlip(p=0.5),
            T.RandomGrayscale(p=0.1),
            T.GaussianBlur(kernel_size=5, sigma=blur_sigma),
            T.RandomAdjustSharpness(sharpness_factor=2.0, p=0.3),
        ]
    )
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        # v2 transforms treat the leading dim as batch: one param draw,
        # applied uniformly — exactly the per-clip coherence we need
        out = transform(clip)
    return out


def random_mask_frames(
    clip: np.ndarray,
    rng: np.random.Generator,
    n_patches: int = 45,
    patch_size: int = 10,
) -> np.ndarray:
    """Zero ``n_patches`` square patches per frame, independently per frame.

    clip: (T, C, H, W) float array; patches may overlap; positions are
    drawn uniformly with the patch kept fully inside the frame.
    """
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise ValidationError(f"clip must be (T, C, H, W), got shape {clip.shape}")
    t, _, h, w = clip.shape
    if patch_size > h or patch_size > w:
        raise ValidationError(
            f"patch_size {patch_size} exceeds frame size {h}x{w}"
        )
    out = clip.copy()
    for f in range(t):
        ys = rng.integers(0, h - patch_size + 1, size=n_patches)
        xs = rng.integers(0, w - patch_size + 1, size=n_patches)
        for y, x in zip(ys, xs):
            out[f, :, y : y + patch_size, x : x + patch_size] = 0.0
    return out


# ---------------------------------------------------------------------------
# segment-level driver
# ---------------------------------------------------------------------------


def augment_segment(segment, cfg: AugmentConfig, rng: np.random.Generator):
    """One stochastic augmented copy of a Segment (labels unchanged)."""
    from .types import AudioWindow, FaceStreamSet, Segment

    audio = segment.audio.samples
    if rng.random() < cfg.pitch_prob:
        shift = float(rng.uniform(-cfg.pitch_semitones, cfg.pitch_semitones))
        audio = pitch_shift(audio, shift)
    if rng.random() < cfg.spectral_mask_prob:
        audio = spectral_mask(audio, rng, cfg.mask_bands, cfg.mask_band_width)

    streams = segment.faces.streams
    if rng.random() < cfg.visual_prob:
        new = np.array(streams)
        for slot in np.flatnonzero(segment.faces.valid_mask):
            seed = int(rng.integers(0, 2**31 - 1))
            clip = torch.from_numpy(new[slot])
            new[slot] = visual_augment(
                clip,
                seed,
                cfg.rotation_deg,
                cfg.jitter_brightness,
                cfg.jitter_contrast,
                cfg.blur_sigma,
            ).numpy()
        streams = new
    if rng.random() < cfg.frame_mask_prob:
        new = np.array(streams)
        for slot in np.flatnonzero(segment.faces.valid_mask):
            new[slot] = random_mask_frames(
                new[slot], rng, cfg.frame_mask_patches, cfg.frame_mask_patch_size
            )
        streams = new

    return Segment(
        audio=AudioWindow(samples=audio, sample_rate=segment.audio.sample_rate),
        faces=FaceStreamSet(
            streams=np.ascontiguousarray(streams, dtype=np.float32),
            valid_mask=segment.faces.valid_mask,
        ),
        labels=segment.labels,
        session_id=segment.session_id,
        start_frame=segment.start_frame,
        fps=segment.fps,
    )
