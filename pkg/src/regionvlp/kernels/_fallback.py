"""Numpy implementation of the region-word similarity kernel."""
from __future__ import annotations

import numpy as np


def _attend(sims: np.ndarray, keys: np.ndarray, queries: np.ndarray, key_len, refine: bool) -> np.ndarray:
    """sims [C, Q, K] -> cos(query, attended keys) per (c, q).

    keys [C, K, d] and queries [C, Q, d] broadcast over the leading axis;
    key_len [C] gives how many leading keys are real.
    """
    k_max = sims.shape[-1]
    real = np.arange(k_max)[None, :] < np.asarray(key_len)[:, None]  # [C, K]
    logits = np.where(real[:, None, :], sims, -np.inf)
    w = np.exp(logits - logits.max(axis=-1, keepdims=True))
    a = w / w.sum(axis=-1, keepdims=True)
    count = np.asarray(key_len)[:, None, None]
    if refine:
        keep = real[:, None, :] & ((a > 1.0 / count) | (count == 1))
        a = np.where(keep, a, 0.0)
    attended = np.einsum("cqk,ckd->cqd", a, keys)
    norm = np.linalg.norm(attended, axis=-1)
    dot = np.einsum("cqd,cqd->cq", attended, queries)
    return np.divide(dot, norm, out=np.zeros_like(dot), where=norm > 0)


def local_similarities(regions, region_len, words, word_len, refine: bool = True):
    """Return (v2l, l2v), each [V, C] and indexed [video, caption]."""
    v, c = regions.shape[0], words.shape[0]
    v2l = np.zeros((v, c))
    l2v = np.zeros((v, c))
    l_max = words.shape[1]
    word_real = np.arange(l_max)[None, :] < word_len[:, None]  # [C, L]
    for i in range(v):
        n_i = int(region_len[i])
        r = regions[i, :n_i]  # [n, d]
        sims = np.einsum("nd,cld->cnl", r, words)  # [C, n, L]
        cos = _attend(sims, words, np.broadcast_to(r, (c,) + r.shape), word_len, refine)
        v2l[i] = cos.mean(axis=1)
        cos_t = _attend(
            sims.transpose(0, 2, 1),
            np.broadcast_to(r, (c,) + r.shape),
            words,
            np.full(c, n_i),
            refine,
        )
        l2v[i] = (cos_t * word_real).sum(axis=1) / word_len
    return v2l, l2v
