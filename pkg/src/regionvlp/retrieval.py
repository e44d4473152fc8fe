"""Text-video retrieval scoring and R@K / MedR metrics.

Video k and caption k of a dataset form the ground-truth pair. The score of a
(video, caption) pair is the global cosine plus the region-word similarity of
the query's direction: words-to-regions for text queries, regions-to-words for
video queries.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .dataset_io import Dataset, make_batch
from .encoders import RegionVLP


def final_similarity(global_sim, local_sim):
    return global_sim + local_sim


def rank_of_truth(scores, truth_index: int) -> int:
    """1-based rank of the truth; ties with the truth are ranked ahead of it."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= truth_index < scores.size:
        raise IndexError(f"truth index {truth_index} outside gallery of {scores.size}")
    s = scores[truth_index]
    ahead = np.count_nonzero(scores >= s) - 1
    return int(ahead) + 1


def recall_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks")
    return 100.0 * np.count_nonzero(ranks <= k) / ranks.size


def median_rank(ranks) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("no ranks")
    return float(np.median(ranks))


def metrics_from_ranks(ranks) -> dict:
    return {
        "R1": recall_at_k(ranks, 1),
        "R5": recall_at_k(ranks, 5),
        "R10": recall_at_k(ranks, 10),
        "MedR": median_rank(ranks),
    }


@dataclass
class EncodedSplit:
    video_cls: np.ndarray  # [V, d]
    regions: np.ndarray  # [V, N_max, d], zero-padded
    region_len: np.ndarray  # [V]
    text_cls: np.ndarray  # [C, d]
    words: np.ndarray  # [C, L_max, d], zero-padded
    word_len: np.ndarray  # [C]


@torch.no_grad()
def encode_split(
    model: RegionVLP,
    dataset: Dataset,
    num_frames: int = 8,
    selection: str = "sorted",
    iou_threshold: float = 0.5,
    batch_size: int = 64,
) -> EncodedSplit:
    """Encode every video and caption once, with deterministic uniform frames."""
    if len(dataset) == 0:
        raise ValueError("empty split")
    model.eval()
    cfg = model.config
    videos, captions = [], []
    for k in range(len(dataset)):
        videos.append(dataset.video(k, num_frames, "uniform", 0, cfg.object_num, selection, iou_threshold))
        captions.append(dataset.caption(k, cfg.max_words))
    n_max = max(v.num_regions for v in videos)
    l_max = max(c.num_words for c in captions)
    g = len(dataset)
    out = EncodedSplit(
        video_cls=np.zeros((g, cfg.d)),
        regions=np.zeros((g, n_max, cfg.d)),
        region_len=np.array([v.num_regions for v in videos]),
        text_cls=np.zeros((g, cfg.d)),
        words=np.zeros((g, l_max, cfg.d)),
        word_len=np.array([c.num_words for c in captions]),
    )
    for start in range(0, g, batch_size):
        idx = list(range(start, min(start + batch_size, g)))
        pairs = [(videos[k], captions[k]) for k in idx]
        if len(pairs) == 1:
            pairs = pairs * 2
        batch = make_batch(pairs, cfg.max_frames)
        r, t = model(batch)
        r, t = r.double().numpy(), t.double().numpy()
        for row, k in enumerate(idx):
            n, l = out.region_len[k], out.word_len[k]
            out.video_cls[k] = r[row, 0]
            out.regions[k, :n] = r[row, 1 : 1 + n]
            out.text_cls[k] = t[row, 0]
            out.words[k, :l] = t[row, 1 : 1 + l]
    return out


def similarity_matrices(encoded: EncodedSplit, use_refinement: bool = True, backend: str | None = None):
    """Global, v2l and l2v similarity matrices, all [video, caption]."""
    vc = kernels.normalize_rows(encoded.video_cls)
    tc = kernels.normalize_rows(encoded.text_cls)
    global_sim = vc @ tc.T
    v2l, l2v = kernels.local_similarities(
        encoded.regions, encoded.region_len, encoded.words, encoded.word_len, use_refinement, backend
    )
    return global_sim, v2l, l2v


def retrieval_ranks(global_sim, v2l, l2v, direction: str = "t2v") -> np.ndarray:
    if direction == "t2v":
        scores = final_similarity(global_sim, l2v).T  # [caption query, video gallery]
    elif direction == "v2t":
        scores = final_similarity(global_sim, v2l)  # [video query, caption gallery]
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return np.array([rank_of_truth(scores[q], q) for q in range(scores.shape[0])])


def evaluate_retrieval(
    model: RegionVLP,
    dataset: Dataset,
    direction: str = "t2v",
    num_frames: int = 8,
    checkpoint_id: str | None = None,
    selection: str = "sorted",
    iou_threshold: float = 0.5,
    backend: str | None = None,
) -> dict:
    encoded = encode_split(model, dataset, num_frames, selection, iou_threshold)
    sims = similarity_matrices(encoded, model.config.use_refinement, backend)
    ranks = retrieval_ranks(*sims, direction=direction)
    report = {"direction": direction}
    report.update(metrics_from_ranks(ranks))
    report["num_queries"] = int(ranks.size)
    report["checkpoint_id"] = checkpoint_id
    return report


def write_metrics(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
