"""Core value types shared across the package.

All types are immutable after construction. Numeric arrays held by them are
marked read-only so they can be shared between threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

PAD_ID = 0
CLS_ID = 1
UNK_ID = 2
FIRST_WORD_ID = 3

LOCATION_DIM = 7
_LOC_TOL = 1e-6


def _frozen(array, dtype=np.float32) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class RegionRecord:
    """One detected region: pooled feature, normalized box, confidence, frame."""

    feature: np.ndarray
    location: np.ndarray
    confidence: float
    frame_index: int

    def __post_init__(self):
        object.__setattr__(self, "feature", _frozen(self.feature))
        object.__setattr__(self, "location", _frozen(self.location))
        object.__setattr__(self, "confidence", float(self.confidence))
        object.__setattr__(self, "frame_index", int(self.frame_index))

    @property
    def box(self) -> tuple[float, float, float, float]:
        x1, y1, x2, y2 = (float(v) for v in self.location[:4])
        return x1, y1, x2, y2


@dataclass(frozen=True, eq=False)
class VideoSample:
    video_id: str
    regions: tuple[RegionRecord, ...]
    num_frames_total: int
    sampled_frame_indices: tuple[int, ...]
    # positions of the selected regions in the video's stored region list
    source_indices: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(
            self, "sampled_frame_indices", tuple(int(i) for i in self.sampled_frame_indices)
        )
        object.__setattr__(self, "source_indices", tuple(int(i) for i in self.source_indices))

    @property
    def num_regions(self) -> int:
        return len(self.regions)

    def frame_slots(self) -> list[int]:
        """Temporal slot of every region: its frame's rank among the sampled frames."""
        order = {f: s for s, f in enumerate(sorted(self.sampled_frame_indices))}
        return [order[r.frame_index] for r in self.regions]


@dataclass(frozen=True)
class CaptionSample:
    text: str
    token_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(i) for i in self.token_ids))

    @property
    def num_words(self) -> int:
        """Content tokens, excluding the leading CLS."""
        return len(self.token_ids) - 1


@dataclass(frozen=True, eq=False)
class Batch:
    """B paired samples, right-padded, with masks true on real positions.

    ``region_mask`` and ``word_mask`` cover content positions only; the CLS
    slot that the encoders prepend is always real.
    """

    videos: tuple[VideoSample, ...]
    captions: tuple[CaptionSample, ...]
    features: torch.Tensor  # [B, N_max, d]
    locations: torch.Tensor  # [B, N_max, 7]
    frame_slots: torch.Tensor  # [B, N_max] long
    region_mask: torch.Tensor  # [B, N_max] bool
    token_ids: torch.Tensor  # [B, L_max + 1] long
    word_mask: torch.Tensor  # [B, L_max] bool

    @property
    def size(self) -> int:
        return len(self.videos)

    @property
    def region_pad_mask(self) -> torch.Tensor:
        return self.region_mask

    @property
    def word_pad_mask(self) -> torch.Tensor:
        """Mask over all L_max + 1 token positions, CLS included."""
        cls = torch.ones(self.size, 1, dtype=torch.bool)
        return torch.cat([cls, self.word_mask], dim=1)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    video_layers: int = 2
    text_layers: int = 2
    heads: int = 4
    vocab_size: int = 1024
    max_frames: int = 8
    max_words: int = 32
    object_num: int = 30
    sigma: float = 0.05
    use_refinement: bool = True
    use_local_losses: bool = True
    mlp_ratio: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ValueError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.video_layers < 0 or self.text_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if self.max_frames < 1 or self.max_words < 2 or self.vocab_size <= FIRST_WORD_ID:
            raise ValueError("max_frames >= 1, max_words >= 2, vocab_size > 3 required")

    @classmethod
    def desk(cls, **overrides) -> ModelConfig:
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> ModelConfig:
        base = dict(d=768, video_layers=12, text_layers=6, heads=12, vocab_size=30522, max_words=64)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _region_violations(region, where: str) -> list[str]:
    out = []
    try:
        loc = np.asarray(region.location, dtype=np.float64).reshape(-1)
    except (TypeError, ValueError):
        return [f"{where}: location is not numeric"]
    if loc.size != LOCATION_DIM:
        return [f"{where}: location has {loc.size} entries, expected 7"]
    if not np.all(np.isfinite(loc)):
        return [f"{where}: non-finite location"]
    if np.any(loc < 0) or np.any(loc > 1):
        out.append(f"{where}: location outside [0,1]")
    x1, y1, x2, y2, w, h, area = loc
    if x1 > x2:
        out.append(f"{where}: x1 > x2")
    if y1 > y2:
        out.append(f"{where}: y1 > y2")
    if abs(w - (x2 - x1)) > _LOC_TOL:
        out.append(f"{where}: width mismatch")
    if abs(h - (y2 - y1)) > _LOC_TOL:
        out.append(f"{where}: height mismatch")
    if abs(area - w * h) > _LOC_TOL:
        out.append(f"{where}: area mismatch")
    try:
        conf = float(region.confidence)
        if not (0.0 <= conf <= 1.0):
            out.append(f"{where}: confidence {conf} outside [0,1]")
    except (TypeError, ValueError):
        out.append(f"{where}: confidence is not numeric")
    try:
        feat = np.asarray(region.feature, dtype=np.float64)
        if feat.ndim != 1 or feat.size == 0:
            out.append(f"{where}: feature must be a non-empty vector")
        elif not np.all(np.isfinite(feat)):
            out.append(f"{where}: non-finite feature")
    except (TypeError, ValueError):
        out.append(f"{where}: feature is not numeric")
    if int(region.frame_index) < 0:
        out.append(f"{where}: negative frame_index")
    return out


def validate_sample(sample, object_num: int | None = None) -> list[str]:
    """Return every invariant violation of a sample; an empty list means valid.

    Never raises on malformed numeric content.
    """
    problems: list[str] = []
    if isinstance(sample, CaptionSample):
        ids = list(sample.token_ids)
        if not ids or ids[0] != CLS_ID:
            problems.append("caption does not start with CLS")
        if len(ids) < 2:
            problems.append("empty caption")
        if PAD_ID in ids:
            problems.append("PAD id inside caption")
        return problems

    if isinstance(sample, VideoSample):
        if not sample.regions:
            problems.append("no regions")
        if sample.num_frames_total < 1:
            problems.append("num_frames_total < 1")
        sampled = set(sample.sampled_frame_indices)
        for n, region in enumerate(sample.regions):
            try:
                problems.extend(_region_violations(region, f"region {n}"))
                if region.frame_index not in sampled:
                    problems.append(f"region {n}: frame {region.frame_index} not sampled")
            except Exception as exc:  # noqa: BLE001 - reporting op
                problems.append(f"region {n}: malformed ({exc})")
        if object_num is not None and len(sample.regions) > object_num * max(len(sampled), 1):
            problems.append("more regions than object_num x sampled frames")
        return problems

    if isinstance(sample, RegionRecord):
        try:
            return _region_violations(sample, "region")
        except Exception as exc:  # noqa: BLE001
            return [f"region: malformed ({exc})"]

    return [f"unsupported sample type {type(sample).__name__}"]


def location_is_valid(location) -> bool:
    loc = np.asarray(location, dtype=np.float64)
    if loc.shape != (LOCATION_DIM,) or not np.all(np.isfinite(loc)):
        return False
    x1, y1, x2, y2, w, h, a = loc
    return bool(
        np.all((loc >= 0) & (loc <= 1))
        and x1 <= x2
        and y1 <= y2
        and math.isclose(w, x2 - x1, abs_tol=_LOC_TOL)
        and math.isclose(h, y2 - y1, abs_tol=_LOC_TOL)
        and math.isclose(a, w * h, abs_tol=_LOC_TOL)
    )


__all__ = [
    "PAD_ID",
    "CLS_ID",
    "UNK_ID",
    "FIRST_WORD_ID",
    "RegionRecord",
    "VideoSample",
    "CaptionSample",
    "Batch",
    "ModelConfig",
    "validate_sample",
    "location_is_valid",
]
