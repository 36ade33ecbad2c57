"""Attention-based audio-visual fusion network.

Data path: per-modality token matrices enter modality blocks
(norm -> multi-head attention -> norm -> linear to the shared width D).
In early-fusion mode each block queries with the *other* modality's
tokens (so its output has the other modality's token count); in
late-fusion mode each block self-attends. The two outputs are
concatenated, an optional learnable CLS token is prepended, and M
multimodal self-attention blocks with residual connections refine the
sequence. Classification reads an affine map to window_frames * 3
logits from the CLS token (or from all tokens flattened when CLS is
disabled).

There are no positional encodings anywhere: token order carries no
information, which makes the CLS readout invariant to input token
permutations by construction.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .types import NUM_CLASSES, ValidationError


@dataclass(frozen=True)
class FusionConfig:
    """Hyperparameters of the fusion network."""

    embed_dim: int = 512
    num_blocks: int = 4
    num_heads: int = 8
    use_cls: bool = True
    fusion: str = "early"
    window_frames: int = 7
    audio_dim: int = 768
    visual_dim: int = 512

    def __post_init__(self) -> None:
        if self.fusion not in ("early", "late"):
            raise ValidationError(f"fusion must be 'early' or 'late', got {self.fusion!r}")
        for name in ("embed_dim", "audio_dim", "visual_dim"):
            dim = getattr(self, name)
            if dim <= 0 or dim % self.num_heads != 0:
                raise ValidationError(
                    f"{name}={dim} must be positive and divisible by "
                    f"num_heads={self.num_heads}"
                )
        if self.num_blocks < 1 or self.window_frames < 1:
            raise ValidationError("num_blocks and window_frames must be >= 1")


@dataclass(frozen=True)
class TokenGeometry:
    """Input token counts, needed up front when the CLS readout is off.

    The flatten-everything classifier head has a weight whose size
    depends on how many tokens reach it, so a no-CLS network must know
    the counts at construction time — late discovery would silently
    change the parameter set between runs.
    """

    audio_tokens: int
    visual_tokens: int

    def __post_init__(self) -> None:
        if self.audio_tokens < 1 or self.visual_tokens < 1:
            raise ValidationError("token counts must be >= 1")

    @property
    def total(self) -> int:
        return self.audio_tokens + self.visual_tokens


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate Q and K/V input widths.

    Queries may come from a different modality than keys/values, so
    their input dim is independent; the attention itself runs at
    ``attn_dim`` (the K/V side's width), which must divide evenly into
    heads.
    """

    def __init__(self, q_dim: int, kv_dim: int, attn_dim: int, num_heads: int):
        super().__init__()
        if attn_dim % num_heads != 0:
            raise ValidationError(f"attn_dim {attn_dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = attn_dim // num_heads
        self.q_proj = nn.Linear(q_dim, attn_dim)
        self.k_proj = nn.Linear(kv_dim, attn_dim)
        self.v_proj = nn.Linear(kv_dim, attn_dim)
        self.out_proj = nn.Linear(attn_dim, attn_dim)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor) -> torch.Tensor:
        # query: [B, Nq, q_dim]; key/value: [B, Nk, kv_dim]
        b, nq, _ = query.shape
        nk = key.shape[1]
        q = self.q_proj(query).view(b, nq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)  # [B, H, Nq, Nk]
        weights = torch.softmax(scores, dim=-1)
        out = weights @ v  # [B, H, Nq, head_dim]
        out = out.transpose(1, 2).reshape(b, nq, self.num_heads * self.head_dim)
        return self.out_proj(out)


class ModalityBlock(nn.Module):
    """One modality's entry block: norm, attention, norm, project to D.

    ``self_dim`` tokens are the keys/values; in early-fusion mode the
    queries are the other modality's raw tokens (``other_dim`` wide) and
    the output inherits the other modality's token count. No residual:
    this block changes both width and (in early mode) token count, so
    the input and output live in different spaces.
    """

    def __init__(self, self_dim: int, other_dim: int, out_dim: int, num_heads: int, early: bool):
        super().__init__()
        self.early = early
        q_dim = other_dim if early else self_dim
        self.norm_in = nn.LayerNorm(self_dim)
        self.attn = MultiHeadAttention(q_dim, self_dim, self_dim, num_heads)
        self.norm_out = nn.LayerNorm(self_dim)
        self.fc = nn.Linear(self_dim, out_dim)

    def forward(self, self_tokens: torch.Tensor, other_tokens: torch.Tensor) -> torch.Tensor:
        x = self.norm_in(self_tokens)
        q = other_tokens if self.early else x
        attended = self.attn(q, x, x)
        return self.fc(self.norm_out(attended))


class MultimodalBlock(nn.Module):
    """Self-attention block over the fused sequence: x = norm(x + attn(x))."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, dim, dim, num_heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x + self.attn(x, x, x))


class CsdNet(nn.Module):
    """Token matrices in, per-frame class logits out.

    forward(audio_tokens [B, Na, audio_dim], visual_tokens [B, Nv,
    visual_dim]) -> [B, window_frames, 3]. When ``use_cls`` is False a
    TokenGeometry giving (Na, Nv) is required so the flatten classifier
    can be sized at construction.
    """

    def __init__(self, config: FusionConfig, geometry: TokenGeometry | None = None):
        super().__init__()
        self.config = config
        self.geometry = geometry
        d = config.embed_dim
        early = config.fusion == "early"
        self.audio_block = ModalityBlock(
            config.audio_dim, config.visual_dim, d, config.num_heads, early
        )
        self.visual_block = ModalityBlock(
            config.visual_dim, config.audio_dim, d, config.num_heads, early
        )
        self.blocks = nn.ModuleList(
            MultimodalBlock(d, config.num_heads) for _ in range(config.num_blocks)
        )
        out_features = config.window_frames * NUM_CLASSES
        if config.use_cls:
            self.cls_token = nn.Parameter(torch.zeros(d))
            nn.init.normal_(self.cls_token, std=0.02)
            self.classifier = nn.Linear(d, out_features)
        else:
            if geometry is None:
                raise ValidationError(
                    "use_cls=False requires a TokenGeometry: the flatten "
                    "classifier's size depends on the token counts"
                )
            self.classifier = nn.Linear(geometry.total * d, out_features)

    def forward(self, audio_tokens: torch.Tensor, visual_tokens: torch.Tensor) -> torch.Tensor:
        if audio_tokens.ndim == 2:
            audio_tokens = audio_tokens.unsqueeze(0)
        if visual_tokens.ndim == 2:
            visual_tokens = visual_tokens.unsqueeze(0)
        if audio_tokens.shape[-1] != self.config.audio_dim:
            raise ValidationError(
                f"audio tokens are {audio_tokens.shape[-1]}-dim, "
                f"expected {self.config.audio_dim}"
            )
        if visual_tokens.shape[-1] != self.config.visual_dim:
            raise ValidationError(
                f"visual tokens are {visual_tokens.shape[-1]}-dim, "
                f"expected {self.config.visual_dim}"
            )
        if self.geometry is not None:
            na, nv = audio_tokens.shape[1], visual_tokens.shape[1]
            if (na, nv) != (self.geometry.audio_tokens, self.geometry.visual_tokens):
                raise ValidationError(
                    f"token counts ({na}, {nv}) do not match the geometry "
                    f"({self.geometry.audio_tokens}, {self.geometry.visual_tokens}) "
                    f"this network was built for"
                )
        b = audio_tokens.shape[0]
        a = self.audio_block(audio_tokens, visual_tokens)  # [B, Nv or Na, D]
        v = self.visual_block(visual_tokens, audio_tokens)
        x = torch.cat([a, v], dim=1)
        if self.config.use_cls:
            cls = self.cls_token.expand(b, 1, -1)
            x = torch.cat([cls, x], dim=1)
        for block in self.blocks:
            x = block(x)
        if self.config.use_cls:
            readout = x[:, 0]  # [B, D]
        else:
            readout = x.reshape(b, -1)
        logits = self.classifier(readout)
        return logits.view(b, self.config.window_frames, NUM_CLASSES)


class CsdModel(nn.Module):
    """Backbones + fusion net: Segments in, per-frame logits out.

    The audio and visual encoders are injectable ports (defaulting to
    the built-in toy backbones); ``parameter_groups`` exposes the three
    disjoint sets the optimiser treats differently.
    """

    def __init__(
        self,
        config: FusionConfig,
        audio_backbone=None,
        visual_backbone=None,
        geometry: TokenGeometry | None = None,
    ):
        super().__init__()
        from .backbones import ToyAudioBackbone, ToyVisualBackbone

        self.config = config
        self.audio_backbone = (
            audio_backbone if audio_backbone is not None else ToyAudioBackbone()
        )
        self.visual_backbone = (
            visual_backbone
            if visual_backbone is not None
            else ToyVisualBackbone(config.window_frames)
        )
        self.net = CsdNet(config, geometry)

    @property
    def _net_dtype(self) -> torch.dtype:
        return self.net.classifier.weight.dtype

    def encode_segment(self, segment) -> tuple[torch.Tensor, torch.Tensor]:
        """One segment -> (audio_tokens [Na, audio_dim], visual [Nv, visual_dim])."""
        audio = torch.from_numpy(segment.audio.samples.copy())
        a = self.audio_backbone.encode(audio).to(self._net_dtype)
        v = self.visual_backbone.encode(segment.faces).to(self._net_dtype)
        return a, v

    def forward_segments(self, segments) -> torch.Tensor:
        """Batch of segments -> [B, window_frames, 3] logits.

        All segments must share mic count and stream capacity so their
        token matrices stack.
        """
        if not segments:
            raise ValidationError("empty segment batch")
        pairs = [self.encode_segment(seg) for seg in segments]
        shapes = {(a.shape, v.shape) for a, v in pairs}
        if len(shapes) > 1:
            raise ValidationError(
                f"segments in one batch must share token geometry, got {sorted(map(str, shapes))}"
            )
        audio = torch.stack([a for a, _ in pairs])
        visual = torch.stack([v for _, v in pairs])
        return self.net(audio, visual)

    def forward(self, segments) -> torch.Tensor:
        return self.forward_segments(segments)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Disjoint parameter sets: audio backbone, visual backbone, head."""
        return {
            "audio": list(self.audio_backbone.trainable_parameters()),
            "visual": list(self.visual_backbone.trainable_parameters()),
            "head": list(self.net.parameters()),
        }


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(
    net: CsdNet,
    path: str | Path,
    extra: dict | None = None,
) -> None:
    """Write weights + the exact config/geometry they belong to."""
    payload = {
        "config": dataclasses.asdict(net.config),
        "geometry": dataclasses.asdict(net.geometry) if net.geometry else None,
        "state_dict": net.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path, expected: FusionConfig | None = None) -> tuple[CsdNet, dict]:
    """Rebuild a CsdNet from a checkpoint; returns (net, extra).

    When ``expected`` is given and differs from the stored config, this
    raises instead of silently loading a differently-shaped network.
    """
    payload = torch.load(Path(path), weights_only=False)
    config = FusionConfig(**payload["config"])
    if expected is not None and expected != config:
        diffs = [
            f"{f.name}: stored={getattr(config, f.name)!r} expected={getattr(expected, f.name)!r}"
            for f in dataclasses.fields(FusionConfig)
            if getattr(config, f.name) != getattr(expected, f.name)
        ]
        raise ValidationError(
            "checkpoint config does not match the requested config: " + "; ".join(diffs)
        )
    geometry = TokenGeometry(**payload["geometry"]) if payload["geometry"] else None
    net = CsdNet(config, geometry)
    net.load_state_dict(payload["state_dict"])
    return net, payload.get("extra", {})
