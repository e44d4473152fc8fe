"""Planted-correspondence datasets and slow reference implementations.

The brute-force routines below recompute every similarity and loss with
explicit per-scalar loops over plain Python floats. They share no code with
``regionvlp.alignment`` or ``regionvlp.kernels`` and serve as test oracles.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .alignment import SimilarityBundle, attention_weights, cosine_matrix
from .dataset_io import (
    Dataset,
    DatasetManifest,
    VideoEntry,
    VideoRegions,
    make_batch,
    normalize_box,
    write_dataset,
)
from .datamodel import FIRST_WORD_ID, ModelConfig

# ---------------------------------------------------------------------------
# brute-force oracle


def _dot(x, y):
    s = 0.0
    for a, b in zip(x, y):
        s += a * b
    return s


def _cos(x, y):
    nx = math.sqrt(_dot(x, x))
    ny = math.sqrt(_dot(y, y))
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return _dot(x, y) / (nx * ny)


def _softmax(values):
    top = max(values)
    exps = [math.exp(v - top) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def _refine(weights, enabled):
    if not enabled or len(weights) == 1:
        return list(weights)
    mean = math.fsum(weights) / len(weights)
    return [a if a - mean > 0 else 0.0 for a in weights]


def _directional(queries, keys, refine):
    """Mean over queries of cos(query, refined-attention sum of keys)."""
    total = 0.0
    for q in queries:
        a = _refine(_softmax([_cos(q, k) for k in keys]), refine)
        attended = [0.0] * len(q)
        for w, k in zip(a, keys):
            for c in range(len(q)):
                attended[c] += w * k[c]
        total += _cos(q, attended)
    return total / len(queries)


def _unit(x):
    n = math.sqrt(_dot(x, x))
    return [v / n for v in x] if n > 0 else [0.0] * len(x)


def brute_force_bundle(r, t, region_len, word_len, use_refinement: bool = True) -> SimilarityBundle:
    """Loop-based similarities for a batch.

    r[i] holds video i's CLS row followed by its regions; t[j] holds caption
    j's CLS row followed by its words. Only the first ``region_len[i]`` regions
    and ``word_len[j]`` words are used.
    """
    r = r.tolist() if hasattr(r, "tolist") else r
    t = t.tolist() if hasattr(t, "tolist") else t
    b = len(r)
    glob = [[_cos(r[i][0], t[j][0]) for j in range(b)] for i in range(b)]
    v2l = [[0.0] * b for _ in range(b)]
    l2v = [[0.0] * b for _ in range(b)]
    for i in range(b):
        regions = [_unit(x) for x in r[i][1 : 1 + int(region_len[i])]]
        for j in range(b):
            words = [_unit(x) for x in t[j][1 : 1 + int(word_len[j])]]
            v2l[i][j] = _directional(regions, words, use_refinement)
            l2v[i][j] = _directional(words, regions, use_refinement)
    as_t = lambda m: torch.tensor(m, dtype=torch.float64)  # noqa: E731
    return SimilarityBundle(as_t(glob), as_t(v2l), as_t(l2v))


def brute_force_info_nce(S, sigma: float, direction: str = "row") -> float:
    S = S.tolist() if hasattr(S, "tolist") else S
    b = len(S)
    total = 0.0
    for i in range(b):
        if direction == "row":
            row = [S[i][j] / sigma for j in range(b)]
        else:
            row = [S[j][i] / sigma for j in range(b)]
        top = max(row)
        log_z = top + math.log(sum(math.exp(v - top) for v in row))
        total += log_z - row[i]
    return total / b


def brute_force_losses(bundle: SimilarityBundle, sigma: float, use_local_losses: bool = True) -> dict:
    terms = {
        "global_v2l": brute_force_info_nce(bundle.global_sim, sigma, "row"),
        "global_l2v": brute_force_info_nce(bundle.global_sim, sigma, "column"),
        "local_v2l": brute_force_info_nce(bundle.local_v2l, sigma, "row") if use_local_losses else 0.0,
        "local_l2v": brute_force_info_nce(bundle.local_l2v, sigma, "column") if use_local_losses else 0.0,
    }
    terms["total"] = sum(terms.values())
    return terms


# ---------------------------------------------------------------------------
# planted datasets


@dataclass
class PlantedData:
    train: Dataset
    test: Dataset
    truth: dict  # video_id -> {"region_words": [word id per stored region]}
    concepts: np.ndarray  # [n_concepts, d]


# Desk-scale model and training settings used for planted-recovery runs.
PLANTED_MODEL = dict(d=32, video_layers=1, text_layers=1, heads=4, sigma=0.1)
PLANTED_FIT = dict(base_lr=3e-4, batch_size=32, epochs=200)


def planted_model_config(planted: PlantedData, **overrides) -> ModelConfig:
    """Desk-scale config sized to a planted dataset's vocabulary and width."""
    values = dict(PLANTED_MODEL, d=planted.train.dim, vocab_size=max(planted.train.vocab.values()) + 1)
    values.update(overrides)
    return ModelConfig(**values)


def _concept_word(c: int) -> str:
    return f"concept{c}"


def _filler_word(k: int) -> str:
    return f"filler{k}"


def generate_planted_dataset(
    b_train: int = 64,
    b_test: int = 32,
    n: int = 8,
    l: int = 10,
    d: int = 32,
    noise_sigma: float = 0.1,
    n_concepts: int = 24,
    seed: int = 0,
    n_fillers: int = 4,
    num_frames: int = 1,
    frame_size: tuple[int, int] = (320, 240),
) -> PlantedData:
    """Videos whose regions are noisy copies of concept vectors.

    Each video draws n distinct concepts; region k is the unit concept vector
    plus isotropic Gaussian noise, re-normalized. Its caption holds the n
    concept words and l - n filler words in random order. Regions are spread
    over ``num_frames`` frames round-robin.
    """
    if n < 1 or l < 1 or d < 1:
        raise ValueError("n, l and d must be positive")
    if n_concepts < n:
        raise ValueError(f"n_concepts={n_concepts} must be >= n={n}")
    if l < n:
        raise ValueError(f"l={l} must be >= n={n}")
    if l > n and n_fillers < 1:
        raise ValueError("need filler words when l > n")
    if b_train < 2 or b_test < 2:
        raise ValueError("each split needs at least 2 videos")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")

    rng = np.random.default_rng(seed)
    concepts = rng.standard_normal((n_concepts, d))
    concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
    vocab = {"[PAD]": 0, "[CLS]": 1, "[UNK]": 2}
    for c in range(n_concepts):
        vocab[_concept_word(c)] = FIRST_WORD_ID + c
    for k in range(n_fillers):
        vocab[_filler_word(k)] = FIRST_WORD_ID + n_concepts + k
    width, height = frame_size

    truth = {}

    def make_split(prefix: str, count: int):
        entries, regions = [], {}
        for v in range(count):
            video_id = f"{prefix}{v:04d}"
            chosen = rng.choice(n_concepts, size=n, replace=False)
            feats = concepts[chosen] + noise_sigma * rng.standard_normal((n, d))
            feats /= np.linalg.norm(feats, axis=1, keepdims=True)
            boxes = []
            for _ in range(n):
                x = np.sort(rng.uniform(0, width, 2))
                y = np.sort(rng.uniform(0, height, 2))
                boxes.append(normalize_box((x[0], y[0], x[1], y[1]), width, height))
            fillers = rng.choice(n_fillers, size=l - n, replace=True) if l > n else []
            words = [_concept_word(int(c)) for c in chosen] + [_filler_word(int(k)) for k in fillers]
            words = [words[p] for p in rng.permutation(len(words))]
            regions[video_id] = VideoRegions(
                features=feats,
                locations=np.stack(boxes),
                confidences=rng.uniform(0.5, 1.0, n),
                frame_index=np.arange(n) % num_frames,
            )
            entries.append(
                VideoEntry(
                    video_id=video_id,
                    caption=" ".join(words),
                    num_frames_total=num_frames,
                    frame_width=width,
                    frame_height=height,
                    feature_file=f"{video_id}.bin",
                    region_count=n,
                )
            )
            truth[video_id] = {"region_words": [vocab[_concept_word(int(c))] for c in chosen]}
        return Dataset(DatasetManifest(1, d, vocab, tuple(entries)), regions)

    train = make_split("train", b_train)
    test = make_split("test", b_test)
    return PlantedData(train, test, truth, concepts)


def write_planted(out_dir, planted: PlantedData) -> Path:
    """Write train/ and test/ datasets plus a truth.json sidecar."""
    root = Path(out_dir)
    for name, ds in (("train", planted.train), ("test", planted.test)):
        write_dataset(root / name, ds.manifest, ds.regions)
    (root / "truth.json").write_text(json.dumps(planted.truth, indent=2, sort_keys=True) + "\n")
    return root


def read_truth(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# alignment accuracy


@torch.no_grad()
def planted_alignment_accuracy(
    model,
    dataset: Dataset,
    truth: dict,
    num_frames: int = 8,
    object_num: int = 30,
    batch_size: int = 32,
) -> float:
    """Percentage of planted regions whose most-attended word is their concept word.

    Attention is the unrefined region-to-word softmax within each video's own
    caption.
    """
    model.eval()
    hits = total = 0
    max_words = model.config.max_words
    for start in range(0, len(dataset), batch_size):
        keys = range(start, min(start + batch_size, len(dataset)))
        pairs = [
            (dataset.video(k, num_frames, "uniform", object_num=object_num), dataset.caption(k, max_words))
            for k in keys
        ]
        if len(pairs) == 1:
            pairs = pairs * 2  # make_batch needs two rows; the duplicate is ignored
        batch = make_batch(pairs, model.config.max_frames)
        r, t = model(batch)
        for row, k in enumerate(keys):
            video, caption = pairs[row]
            region_words = truth[video.video_id]["region_words"]
            n, l = video.num_regions, caption.num_words
            sim = cosine_matrix(r[row, 1 : 1 + n].double(), t[row, 1 : 1 + l].double())
            best = attention_weights(sim).argmax(dim=-1)
            ids = caption.token_ids[1:]
            for pos, src in enumerate(video.source_indices):
                hits += int(ids[int(best[pos])] == region_words[src])
                total += 1
    return 100.0 * hits / total if total else 0.0


__all__ = [
    "PLANTED_FIT",
    "PLANTED_MODEL",
    "PlantedData",
    "brute_force_bundle",
    "brute_force_info_nce",
    "brute_force_losses",
    "generate_planted_dataset",
    "planted_alignment_accuracy",
    "planted_model_config",
    "read_truth",
    "write_planted",
]
