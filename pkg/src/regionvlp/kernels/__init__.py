"""Retrieval-time region-word similarity kernels.

The compiled Cython kernel is used when it was built; otherwise the numpy
fallback is selected at import. Set ``REGIONVLP_PURE_PYTHON=1`` to force the
fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback

try:
    from . import _local_sim as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"numpy": _fallback.local_similarities}
if _compiled is not None:
    BACKENDS["cython"] = _compiled.local_similarities

if _compiled is not None and not os.environ.get("REGIONVLP_PURE_PYTHON"):
    BACKEND = "cython"
else:
    BACKEND = "numpy"


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, np.maximum(norm, 1e-12))


def local_similarities(regions, region_len, words, word_len, refine: bool = True, backend: str | None = None):
    """Region-word similarities between every video and every caption.

    regions: [V, N_max, d] content region features (no CLS), zero-padded;
    words: [C, L_max, d] content word features. Lengths give the real counts.
    Returns (v2l, l2v) as float64 [V, C] arrays indexed [video, caption].
    """
    region_len = np.ascontiguousarray(region_len, dtype=np.int32)
    word_len = np.ascontiguousarray(word_len, dtype=np.int32)
    if region_len.min(initial=1) < 1 or word_len.min(initial=1) < 1:
        raise ValueError("every video needs a region and every caption a word")
    regions = np.ascontiguousarray(normalize_rows(regions))
    words = np.ascontiguousarray(normalize_rows(words))
    if regions.shape[-1] != words.shape[-1]:
        raise ValueError(f"dim mismatch: {regions.shape[-1]} vs {words.shape[-1]}")
    fn = BACKENDS[backend or BACKEND]
    return fn(regions, region_len, words, word_len, bool(refine))


__all__ = ["BACKEND", "BACKENDS", "local_similarities", "normalize_rows"]
