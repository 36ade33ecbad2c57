"""Feature extraction ports and lightweight built-in backbones.

The fusion network consumes token matrices, not raw media, so the
extractors sit behind two small interfaces:

- audio: (n_mics, L) samples -> (n_mics * S', 768) tokens, where S' is
  the per-channel token count for a 20ms-hop encoder (receptive field
  400 samples, stride 320);
- visual: (max_streams, T, 3, H, W) clips -> (max_streams, 512), one
  embedding per face stream, zero rows for padded slots.

The built-in implementations are deliberately small: deterministic
pooled statistics followed by a fixed (optionally trainable) linear
projection. They preserve every interface property of the large
pretrained encoders — shapes, token counts, padding behaviour,
freeze/unfreeze semantics — at desk-test cost. Swapping in real
encoders means implementing the same two-method port.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
from torch import nn

from .types import FaceStreamSet, ValidationError

AUDIO_EMBED_DIM = 768
VISUAL_EMBED_DIM = 512
_RECEPTIVE = 400  # samples per audio token
_STRIDE = 320  # hop between audio tokens (20 ms @ 16 kHz)


@dataclass(frozen=True)
class TokenMatrix:
    """A (count, dim) block of embedding tokens plus provenance."""

    tokens: torch.Tensor
    modality: str

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2:
            raise ValidationError(
                f"tokens must be (count, dim), got shape {tuple(self.tokens.shape)}"
            )
        if self.modality not in ("audio", "visual"):
            raise ValidationError(f"unknown modality {self.modality!r}")


def audio_token_count(n_samples: int) -> int:
    """Tokens one channel yields: floor((n - 400) / 320) + 1."""
    if n_samples < _RECEPTIVE:
        raise ValidationError(
            f"audio shorter than one receptive field: {n_samples} < {_RECEPTIVE}"
        )
    return (n_samples - _RECEPTIVE) // _STRIDE + 1


class AudioBackbonePort(Protocol):
    """Contract for the audio encoder."""

    def encode(self, samples: torch.Tensor) -> torch.Tensor:
        """(n_mics, L) float -> (n_mics * S', 768)."""
        ...

    def trainable_parameters(self) -> list[torch.nn.Parameter]: ...


class VisualBackbonePort(Protocol):
    """Contract for the face-clip encoder."""

    def encode(self, faces: FaceStreamSet) -> torch.Tensor:
        """Face streams -> (max_streams, 512); padded slots stay zero."""
        ...

    def trainable_parameters(self) -> list[torch.nn.Parameter]: ...


def _seeded_projection(in_dim: int, out_dim: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(in_dim, out_dim, generator=gen, dtype=torch.float64) / np.sqrt(in_dim)


class ToyAudioBackbone(nn.Module):
    """Framing + fixed seeded linear projection to the audio token space.

    Each 400-sample frame (hop 320) is projected to 768 dims. With
    ``trainable=True`` the projection becomes a learnable parameter so
    optimiser-group and freezing behaviour can be exercised; otherwise
    it is a buffer and ``trainable_parameters`` is empty.
    """

    def __init__(self, trainable: bool = False, seed: int = 7):
        super().__init__()
        weight = _seeded_projection(_RECEPTIVE, AUDIO_EMBED_DIM, seed)
        if trainable:
            self.weight = nn.Parameter(weight)
        else:
            self.register_buffer("weight", weight)
        self.trainable = trainable

    def encode(self, samples: torch.Tensor) -> torch.Tensor:
        if samples.ndim != 2:
            raise ValidationError(
                f"audio must be (n_mics, n_samples), got {tuple(samples.shape)}"
            )
        samples = samples.to(self.weight.dtype)
        n_mics, n = samples.shape
        s_prime = audio_token_count(n)
        # [n_mics, S', 400]: unfold strided frames
        frames = samples.unfold(1, _RECEPTIVE, _STRIDE)
        tokens = frames @ self.weight  # [n_mics, S', 768]
        return tokens.reshape(n_mics * s_prime, AUDIO_EMBED_DIM)

    def forward(self, samples: torch.Tensor) -> torch.Tensor:
        return self.encode(samples)

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [self.weight] if self.trainable else []


class ToyVisualBackbone(nn.Module):
    """Pooled clip statistics + fixed seeded projection to 512 dims.

    Per stream the features are: 3 global channel means, 3 per-frame
    channel means for each of T frames, and a 4x4 spatial grid of
    channel means averaged over time (48), i.e. 3 + 3T + 48 values.
    Padded slots (valid_mask False) map to exactly zero rows.
    """

    def __init__(self, window_frames: int = 7, trainable: bool = False, seed: int = 11):
        super().__init__()
        self.window_frames = window_frames
        in_dim = 3 + 3 * window_frames + 48
        weight = _seeded_projection(in_dim, VISUAL_EMBED_DIM, seed)
        if trainable:
            self.weight = nn.Parameter(weight)
        else:
            self.register_buffer("weight", weight)
        self.trainable = trainable

    def _features(self, clip: torch.Tensor) -> torch.Tensor:
        # clip: [T, 3, H, W]
        t, c, h, w = clip.shape
        global_mean = clip.mean(dim=(0, 2, 3))  # [3]
        frame_mean = clip.mean(dim=(2, 3)).reshape(-1)  # [3T]
        # 4x4 grid: adaptive average pool over space, mean over time
        grid = torch.nn.functional.adaptive_avg_pool2d(clip, (4, 4))  # [T, 3, 4, 4]
        grid = grid.mean(dim=0).reshape(-1)  # [48]
        return torch.cat([global_mean, frame_mean, grid])

    def encode(self, faces: FaceStreamSet) -> torch.Tensor:
        streams = torch.from_numpy(faces.streams.copy()).to(self.weight.dtype)
        if streams.shape[1] != self.window_frames:
            raise ValidationError(
                f"backbone built for {self.window_frames}-frame clips, "
                f"got {streams.shape[1]}"
            )
        out = torch.zeros(
            streams.shape[0], VISUAL_EMBED_DIM, dtype=self.weight.dtype,
            device=self.weight.device,
        )
        for slot in range(streams.shape[0]):
            if bool(faces.valid_mask[slot]):
                out[slot] = self._features(streams[slot]) @ self.weight
        return out

    def forward(self, faces: FaceStreamSet) -> torch.Tensor:
        return self.encode(faces)

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [self.weight] if self.trainable else []


def extract_audio_tokens(backbone: AudioBackbonePort, samples: np.ndarray | torch.Tensor) -> TokenMatrix:
    if isinstance(samples, np.ndarray):
        samples = torch.from_numpy(samples)
    return TokenMatrix(tokens=backbone.encode(samples), modality="audio")


def extract_visual_features(backbone: VisualBackbonePort, faces: FaceStreamSet) -> TokenMatrix:
    return TokenMatrix(tokens=backbone.encode(faces), modality="visual")
