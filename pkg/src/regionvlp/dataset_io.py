"""Dataset format, region selection, frame sampling, tokenization and batching.

On-disk layout of a dataset directory::

    manifest.json         version, dim, vocab, one entry per video
    <feature_file>        per-video binary region file (see ``write_region_file``)

Per-video binary, all little-endian, no padding between sections::

    b"DVLP" | u32 version=1 | u32 R | u32 d
    f32 features[R*d] | f32 locations[R*7] | f32 confidences[R] | u32 frame_index[R]
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .datamodel import (
    CLS_ID,
    FIRST_WORD_ID,
    LOCATION_DIM,
    PAD_ID,
    UNK_ID,
    Batch,
    CaptionSample,
    RegionRecord,
    VideoSample,
)

MAGIC = b"DVLP"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class DatasetError(Exception):
    """Base class for dataset read/write failures."""


class BadMagicError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class DimMismatchError(DatasetError):
    pass


# ---------------------------------------------------------------------------
# geometry


def normalize_box(raw_box, frame_w: float, frame_h: float) -> np.ndarray:
    """Pixel box (x1, y1, x2, y2) -> [x1, y1, x2, y2, w, h, w*h] in frame units."""
    x1, y1, x2, y2 = (float(v) for v in raw_box)
    if not (frame_w > 0 and frame_h > 0):
        raise ValueError(f"frame size must be positive, got {frame_w}x{frame_h}")
    if not (0 <= x1 <= x2 <= frame_w and 0 <= y1 <= y2 <= frame_h):
        raise ValueError(
            f"box ({x1}, {y1}, {x2}, {y2}) is inverted or outside the {frame_w}x{frame_h} frame"
        )
    w = (x2 - x1) / frame_w
    h = (y2 - y1) / frame_h
    return np.array([x1 / frame_w, y1 / frame_h, x2 / frame_w, y2 / frame_h, w, h, w * h])


def box_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# region selection


def _top_k_in_frame(regions: list[RegionRecord], k: int) -> list[RegionRecord]:
    # sorted() is stable, so equal confidences keep detector order
    return sorted(regions, key=lambda r: -r.confidence)[:k]


def select_regions_sorted(frames: list[list[RegionRecord]], k: int) -> list[RegionRecord]:
    """Keep the k most confident regions of every frame.

    Output is ordered by frame index, then by descending confidence.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not any(frames):
        raise ValueError("no regions")
    kept = []
    for regions in sorted((f for f in frames if f), key=lambda f: f[0].frame_index):
        kept.extend(_top_k_in_frame(list(regions), k))
    return kept


def select_regions_tracked(
    frames: list[list[RegionRecord]], k: int, iou_threshold: float = 0.5
) -> list[RegionRecord]:
    """Link regions across consecutive frames by greedy IoU, keep one per tracklet.

    A region in frame m+1 extends the tracklet whose frame-m member overlaps it
    most, provided IoU >= ``iou_threshold``; candidate pairs are taken in
    descending IoU order and every tracklet grows by at most one region per
    frame. Each tracklet is then represented by its most confident member, and
    the per-frame top-k cap of ``select_regions_sorted`` is applied.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError("iou_threshold must lie in (0, 1)")
    ordered = sorted((list(f) for f in frames if f), key=lambda f: f[0].frame_index)
    if not ordered:
        raise ValueError("no regions")

    tracklets: list[list[RegionRecord]] = [[r] for r in ordered[0]]
    active = list(range(len(tracklets)))
    for regions in ordered[1:]:
        pairs = []
        for t in active:
            last = tracklets[t][-1]
            for n, region in enumerate(regions):
                iou = box_iou(last.box, region.box)
                if iou >= iou_threshold:
                    pairs.append((-iou, t, n))
        pairs.sort()
        used_t, used_n = set(), set()
        next_active = []
        for _, t, n in pairs:
            if t in used_t or n in used_n:
                continue
            used_t.add(t)
            used_n.add(n)
            tracklets[t].append(regions[n])
            next_active.append(t)
        for n, region in enumerate(regions):
            if n not in used_n:
                tracklets.append([region])
                next_active.append(len(tracklets) - 1)
        active = next_active

    # max() returns the first maximal element: ties go to the earliest member
    survivors = {id(max(t, key=lambda r: r.confidence)) for t in tracklets}
    kept_frames = [[r for r in regions if id(r) in survivors] for regions in ordered]
    return select_regions_sorted([f for f in kept_frames if f], k)


# ---------------------------------------------------------------------------
# frame sampling


def sample_frames(m_total: int, m: int, mode: str = "uniform", seed: int = 0) -> list[int]:
    """Pick m of m_total frame indices.

    ``uniform`` returns bin centres floor((2i+1) * m_total / (2m)); ``random``
    draws m distinct indices without replacement and returns them sorted.
    """
    if m_total < 1 or m < 1:
        raise ValueError("m_total and m must be >= 1")
    if m > m_total:
        raise ValueError(f"cannot sample {m} frames from {m_total}")
    if mode == "uniform":
        return [((2 * i + 1) * m_total) // (2 * m) for i in range(m)]
    if mode == "random":
        rng = np.random.default_rng(seed)
        return sorted(int(i) for i in rng.choice(m_total, size=m, replace=False))
    raise ValueError(f"unknown sampling mode {mode!r}")


# ---------------------------------------------------------------------------
# tokenization

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
SPECIAL_TOKENS = {"[PAD]": PAD_ID, "[CLS]": CLS_ID, "[UNK]": UNK_ID}


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def build_vocab(texts, min_count: int = 1) -> dict[str, int]:
    counts: dict[str, int] = {}
    for text in texts:
        for w in split_words(text):
            counts[w] = counts.get(w, 0) + 1
    vocab = dict(SPECIAL_TOKENS)
    for w in sorted(w for w, c in counts.items() if c >= min_count):
        vocab[w] = FIRST_WORD_ID + len(vocab) - len(SPECIAL_TOKENS)
    return vocab


def tokenize(text: str, vocab: dict[str, int], max_words: int | None = None) -> CaptionSample:
    words = split_words(text)
    if not words:
        raise ValueError("empty caption")
    if max_words is not None:
        words = words[: max_words - 1]
    ids = [CLS_ID] + [vocab.get(w, UNK_ID) for w in words]
    return CaptionSample(text=text, token_ids=tuple(ids))


# ---------------------------------------------------------------------------
# binary region files


@dataclass(frozen=True, eq=False)
class VideoRegions:
    """All stored regions of one video, as parallel arrays."""

    features: np.ndarray  # [R, d] float32
    locations: np.ndarray  # [R, 7] float32
    confidences: np.ndarray  # [R] float32
    frame_index: np.ndarray  # [R] uint32

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype="<f4")
        r = feats.shape[0]
        arrays = {
            "features": feats,
            "locations": np.ascontiguousarray(self.locations, dtype="<f4").reshape(r, LOCATION_DIM),
            "confidences": np.ascontiguousarray(self.confidences, dtype="<f4").reshape(r),
            "frame_index": np.ascontiguousarray(self.frame_index, dtype="<u4").reshape(r),
        }
        for name, arr in arrays.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def records(self) -> list[RegionRecord]:
        return [
            RegionRecord(self.features[n], self.locations[n], self.confidences[n], self.frame_index[n])
            for n in range(len(self))
        ]

    @classmethod
    def from_records(cls, records: list[RegionRecord]) -> VideoRegions:
        return cls(
            features=np.stack([r.feature for r in records]),
            locations=np.stack([r.location for r in records]),
            confidences=np.array([r.confidence for r in records]),
            frame_index=np.array([r.frame_index for r in records]),
        )


def encode_regions(regions: VideoRegions) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(regions), regions.dim)
    return b"".join(
        [
            header,
            regions.features.tobytes(),
            regions.locations.tobytes(),
            regions.confidences.tobytes(),
            regions.frame_index.tobytes(),
        ]
    )


def decode_regions(data: bytes, expected_dim: int | None = None, name: str = "<bytes>") -> VideoRegions:
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{name}: truncated header ({len(data)} bytes)")
    magic, version, r, d = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{name}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{name}: version {version}, expected {FORMAT_VERSION}")
    if expected_dim is not None and d != expected_dim:
        raise DimMismatchError(f"{name}: dim mismatch, header {d} vs manifest {expected_dim}")
    expected = _HEADER.size + 4 * (r * d + r * LOCATION_DIM + r + r)
    if len(data) < expected:
        raise TruncatedFileError(f"{name}: truncated, {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise DatasetError(f"{name}: {len(data) - expected} trailing bytes")
    off = _HEADER.size
    feats = np.frombuffer(data, "<f4", r * d, off).reshape(r, d)
    off += 4 * r * d
    locs = np.frombuffer(data, "<f4", r * LOCATION_DIM, off).reshape(r, LOCATION_DIM)
    off += 4 * r * LOCATION_DIM
    conf = np.frombuffer(data, "<f4", r, off)
    off += 4 * r
    frames = np.frombuffer(data, "<u4", r, off)
    return VideoRegions(feats, locs, conf, frames)


def write_region_file(path, regions: VideoRegions) -> None:
    Path(path).write_bytes(encode_regions(regions))


def read_region_file(path, expected_dim: int | None = None) -> VideoRegions:
    path = Path(path)
    return decode_regions(path.read_bytes(), expected_dim, name=str(path))


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    caption: str
    num_frames_total: int
    frame_width: int
    frame_height: int
    feature_file: str
    region_count: int


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    dim: int
    vocab: dict
    videos: tuple[VideoEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "videos", tuple(self.videos))

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "dim": self.dim,
            "vocab": dict(self.vocab),
            "videos": [vars(v) for v in self.videos],
        }

    @classmethod
    def from_json(cls, data: dict) -> DatasetManifest:
        try:
            videos = tuple(VideoEntry(**v) for v in data["videos"])
            return cls(int(data["version"]), int(data["dim"]), dict(data["vocab"]), videos)
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"malformed manifest: {exc}") from exc


class Dataset:
    """In-memory dataset: manifest plus the stored regions of every video."""

    def __init__(self, manifest: DatasetManifest, regions: dict[str, VideoRegions]):
        self.manifest = manifest
        self.regions = regions
        self._index = {v.video_id: i for i, v in enumerate(manifest.videos)}
        self._cache: dict = {}
        if len(self._index) != len(manifest.videos):
            raise DatasetError("duplicate video ids")
        for entry in manifest.videos:
            if entry.video_id not in regions:
                raise DatasetError(f"missing regions for video {entry.video_id!r}")
            vr = regions[entry.video_id]
            if len(vr) != entry.region_count:
                raise DatasetError(
                    f"{entry.video_id}: region_count {entry.region_count} but {len(vr)} stored"
                )
            if len(vr) and vr.dim != manifest.dim:
                raise DimMismatchError(f"{entry.video_id}: dim mismatch {vr.dim} vs {manifest.dim}")

    def __len__(self) -> int:
        return len(self.manifest.videos)

    @property
    def vocab(self) -> dict[str, int]:
        return self.manifest.vocab

    @property
    def dim(self) -> int:
        return self.manifest.dim

    def entry(self, key) -> VideoEntry:
        if isinstance(key, str):
            if key not in self._index:
                raise KeyError(f"unknown video id {key!r}")
            key = self._index[key]
        return self.manifest.videos[key]

    def caption(self, key, max_words: int | None = None) -> CaptionSample:
        return tokenize(self.entry(key).caption, self.vocab, max_words)

    def video(
        self,
        key,
        num_frames: int = 1,
        mode: str = "uniform",
        seed: int = 0,
        object_num: int = 30,
        selection: str = "sorted",
        iou_threshold: float = 0.5,
    ) -> VideoSample:
        """Sample frames, select regions and return a VideoSample.

        ``num_frames`` is clamped to the number of frames the video has.
        """
        entry = self.entry(key)
        frames = sample_frames(entry.num_frames_total, min(num_frames, entry.num_frames_total), mode, seed)
        cache_key = (entry.video_id, tuple(frames), object_num, selection, iou_threshold)
        if cache_key not in self._cache:
            self._cache[cache_key] = self._select(entry, frames, object_num, selection, iou_threshold)
        return self._cache[cache_key]

    def _select(self, entry, frames, object_num, selection, iou_threshold) -> VideoSample:
        records = self.regions[entry.video_id].records()
        position = {id(r): n for n, r in enumerate(records)}
        wanted = set(frames)
        per_frame: dict[int, list[RegionRecord]] = {}
        for r in records:
            if r.frame_index in wanted:
                per_frame.setdefault(r.frame_index, []).append(r)
        if not per_frame:
            raise DatasetError(f"{entry.video_id}: no regions in sampled frames {frames}")
        groups = [per_frame[f] for f in sorted(per_frame)]
        if selection == "sorted":
            chosen = select_regions_sorted(groups, object_num)
        elif selection == "tracked":
            chosen = select_regions_tracked(groups, object_num, iou_threshold)
        else:
            raise ValueError(f"unknown selection {selection!r}")
        return VideoSample(
            video_id=entry.video_id,
            regions=tuple(chosen),
            num_frames_total=entry.num_frames_total,
            sampled_frame_indices=tuple(frames),
            source_indices=tuple(position[id(r)] for r in chosen),
        )


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def write_dataset(path, manifest: DatasetManifest, regions: dict[str, VideoRegions]) -> Path:
    """Write manifest.json and one region file per video under ``path``."""
    root = Path(path)
    Dataset(manifest, regions)  # validates consistency
    root.mkdir(parents=True, exist_ok=True)
    for entry in manifest.videos:
        target = root / entry.feature_file
        target.parent.mkdir(parents=True, exist_ok=True)
        write_region_file(target, regions[entry.video_id])
    (root / "manifest.json").write_bytes(_dump_json(manifest.to_json()))
    return root


def read_dataset(path, object_dir=None) -> Dataset:
    """Load a dataset directory; region files resolve against ``object_dir`` if given."""
    root = Path(path)
    manifest_path = root / "manifest.json" if root.is_dir() else root
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetError(f"manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from exc
    manifest = DatasetManifest.from_json(raw)
    if manifest.version != MANIFEST_VERSION:
        raise VersionMismatchError(f"manifest version {manifest.version}, expected {MANIFEST_VERSION}")
    base = Path(object_dir) if object_dir is not None else manifest_path.parent
    regions = {}
    for entry in manifest.videos:
        file = base / entry.feature_file
        if not file.exists():
            raise DatasetError(f"{entry.video_id}: region file not found: {file}")
        regions[entry.video_id] = read_region_file(file, manifest.dim)
    return Dataset(manifest, regions)


# ---------------------------------------------------------------------------
# batching


def make_batch(pairs, max_frames: int | None = None) -> Batch:
    """Right-pad B (VideoSample, CaptionSample) pairs into tensors with masks."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError("contrastive batch too small (need B >= 2)")
    videos = tuple(v for v, _ in pairs)
    captions = tuple(c for _, c in pairs)
    b = len(pairs)
    dims = {len(r.feature) for v in videos for r in v.regions}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims {sorted(dims)}")
    d = dims.pop()
    n_max = max(v.num_regions for v in videos)
    l_max = max(c.num_words for c in captions)
    if n_max < 1 or min(v.num_regions for v in videos) < 1:
        raise ValueError("every video needs at least one region")
    if min(c.num_words for c in captions) < 1:
        raise ValueError("empty caption")

    features = np.zeros((b, n_max, d), np.float32)
    locations = np.zeros((b, n_max, LOCATION_DIM), np.float32)
    slots = np.zeros((b, n_max), np.int64)
    region_mask = np.zeros((b, n_max), bool)
    token_ids = np.full((b, l_max + 1), PAD_ID, np.int64)
    word_mask = np.zeros((b, l_max), bool)
    for i, (video, caption) in enumerate(pairs):
        n = video.num_regions
        features[i, :n] = np.stack([r.feature for r in video.regions])
        locations[i, :n] = np.stack([r.location for r in video.regions])
        frame_slots = video.frame_slots()
        if max_frames is not None and max(frame_slots) >= max_frames:
            raise ValueError(
                f"{video.video_id}: temporal table overflow (slot {max(frame_slots)} >= {max_frames})"
            )
        slots[i, :n] = frame_slots
        region_mask[i, :n] = True
        ids = caption.token_ids
        token_ids[i, : len(ids)] = ids
        word_mask[i, : len(ids) - 1] = True
    return Batch(
        videos=videos,
        captions=captions,
        features=torch.from_numpy(features),
        locations=torch.from_numpy(locations),
        frame_slots=torch.from_numpy(slots),
        region_mask=torch.from_numpy(region_mask),
        token_ids=torch.from_numpy(token_ids),
        word_mask=torch.from_numpy(word_mask),
    )
