"""Video and text encoders.

Both encoders share one pre-norm transformer implementation. Region order
information reaches the video encoder only through the temporal table, so the
stack itself is permutation-equivariant over regions.
"""
from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .datamodel import LOCATION_DIM, Batch, ModelConfig


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        """x: [B, T, d]; mask: [B, T] true on real positions."""
        b, t, d = x.shape
        q, k, v = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = self.dropout(scores.softmax(dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int = 4, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads, dropout)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            nn.Linear(d, mlp_ratio * d),
            nn.GELU(),
            nn.Linear(mlp_ratio * d, d),
            nn.Dropout(dropout),
        )

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


class TransformerStack(nn.Module):
    """Pre-norm blocks with no final norm, so zero layers is the identity."""

    def __init__(self, d: int, heads: int, layers: int, mlp_ratio: int = 4, dropout: float = 0.0):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(d, heads, mlp_ratio, dropout) for _ in range(layers))

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        if not bool(mask[:, 0].all()):
            raise ValueError("CLS position must be unmasked")
        for block in self.blocks:
            x = block(x, mask)
        return x


class LocationEmbedding(nn.Module):
    """Affine projection of the 7-dim normalized box to the model width."""

    def __init__(self, d: int):
        super().__init__()
        self.fc = nn.Linear(LOCATION_DIM, d)

    def forward(self, location: Tensor) -> Tensor:
        if location.shape[-1] != LOCATION_DIM:
            raise ValueError(f"location must have {LOCATION_DIM} entries, got {location.shape[-1]}")
        return self.fc(location)


class VideoEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d
        self.max_frames = config.max_frames
        self.cls_token = nn.Parameter(torch.zeros(d))
        self.location = LocationEmbedding(d)
        self.temporal = nn.Parameter(torch.zeros(config.max_frames, d))
        self.stack = TransformerStack(d, config.heads, config.video_layers, config.mlp_ratio, config.dropout)

    def compose(self, features: Tensor, locations: Tensor, frame_slots: Tensor) -> Tensor:
        """[B, N, d] region inputs -> [B, N+1, d] with the CLS token in row 0.

        Row n is feature + location embedding + temporal row of its frame slot.
        The CLS row gets neither embedding.
        """
        if frame_slots.numel() and int(frame_slots.max()) >= self.max_frames:
            raise ValueError(
                f"temporal table overflow: slot {int(frame_slots.max())} >= {self.max_frames}"
            )
        regions = features + self.location(locations) + self.temporal[frame_slots]
        cls = self.cls_token.expand(features.shape[0], 1, -1)
        return torch.cat([cls, regions], dim=1)

    def forward(self, features, locations, frame_slots, region_mask) -> Tensor:
        x = self.compose(features, locations, frame_slots)
        mask = torch.cat([torch.ones_like(region_mask[:, :1]), region_mask], dim=1)
        return self.stack(x, mask)


class TextEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.position = nn.Parameter(torch.zeros(config.max_words, d))
        self.stack = TransformerStack(d, config.heads, config.text_layers, config.mlp_ratio, config.dropout)

    def forward(self, token_ids: Tensor, word_mask: Tensor) -> Tensor:
        length = token_ids.shape[1]
        if length > self.position.shape[0]:
            raise ValueError(f"caption of {length} tokens exceeds max_words={self.position.shape[0]}")
        x = self.token_embedding(token_ids) + self.position[:length]
        mask = torch.cat([torch.ones_like(word_mask[:, :1]), word_mask], dim=1)
        return self.stack(x, mask)


class RegionVLP(nn.Module):
    """Video encoder plus text encoder; the parameter store is the state dict."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.video = VideoEncoder(config)
        self.text = TextEncoder(config)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            # embeddings added to content start at zero so they cannot mask token identity
            if name in ("video.temporal", "video.location.fc.weight", "video.location.fc.bias", "text.position"):
                p.zero_()
            elif ".norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)

    def encode_video(self, features, locations, frame_slots, region_mask) -> Tensor:
        return self.video(features, locations, frame_slots, region_mask)

    def encode_text(self, token_ids, word_mask) -> Tensor:
        return self.text(token_ids, word_mask)

    def forward(self, batch: Batch) -> tuple[Tensor, Tensor]:
        self.check_finite()
        dtype = next(self.parameters()).dtype
        r = self.encode_video(
            batch.features.to(dtype), batch.locations.to(dtype), batch.frame_slots, batch.region_mask
        )
        t = self.encode_text(batch.token_ids, batch.word_mask)
        return r, t

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"non-finite values in parameter {name}")


__all__ = [
    "MultiHeadSelfAttention",
    "TransformerBlock",
    "TransformerStack",
    "LocationEmbedding",
    "VideoEncoder",
    "TextEncoder",
    "RegionVLP",
]
