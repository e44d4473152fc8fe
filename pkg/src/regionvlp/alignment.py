"""Global video-sentence and bidirectional region-word similarity and losses.

Every similarity here is a cosine, so all inputs are L2-normalized before use
and the results are invariant to positive rescaling of any single vector.
Zero vectors have cosine 0 with everything.

Index convention: every [B, B] matrix is indexed [video i, caption j].
``local_v2l[i, j]`` averages over the regions of video i, ``local_l2v[i, j]``
averages over the words of caption j.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor

_EPS = 1e-12


def _normalize(x: Tensor) -> Tensor:
    return F.normalize(x, dim=-1, eps=_EPS)


def cosine_matrix(x: Tensor, y: Tensor, x_mask: Tensor | None = None, y_mask: Tensor | None = None) -> Tensor:
    """[P, d] x [Q, d] -> [P, Q] cosines; masked rows and columns are set to 0."""
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"dim mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    out = _normalize(x) @ _normalize(y).transpose(-2, -1)
    if x_mask is not None:
        out = out * x_mask[..., :, None]
    if y_mask is not None:
        out = out * y_mask[..., None, :]
    return out


def attention_weights(sim: Tensor, mask: Tensor | None = None) -> Tensor:
    """Softmax of raw cosines over the last dim, restricted to unmasked entries."""
    if mask is not None:
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("attention row has no unmasked entries")
        sim = sim.masked_fill(~mask, float("-inf"))
    return sim.softmax(dim=-1)


def refinement_keep(a: Tensor, mask: Tensor | None = None) -> Tensor:
    """Boolean mask of attention weights strictly above their row mean.

    Over the L unmasked entries of a softmax row the mean is exactly 1/L.
    Rows with a single unmasked entry keep it.
    """
    if mask is None:
        mask = torch.ones_like(a, dtype=torch.bool)
    count = mask.sum(dim=-1, keepdim=True)
    threshold = 1.0 / count.clamp(min=1).to(a.dtype)
    return mask & ((a > threshold) | (count == 1))


def refine_weights(a: Tensor, mask: Tensor | None = None) -> Tensor:
    return a * refinement_keep(a, mask)


def attended_feature(weights: Tensor, feats: Tensor) -> Tensor:
    """Weighted sum of counterpart features; weights are not re-normalized."""
    return weights @ feats


def _local_pair(query: Tensor, keys: Tensor, key_mask: Tensor | None, refine: bool):
    sim = cosine_matrix(query, keys)
    a = attention_weights(sim, key_mask)
    keep = refinement_keep(a, key_mask) if refine else (key_mask if key_mask is not None else torch.ones_like(a, dtype=torch.bool))
    attended = attended_feature(a * keep, _normalize(keys))
    cos = (_normalize(query) * _normalize(attended)).sum(-1)
    return cos, a, a * keep


def local_similarity_v2l(r: Tensor, t: Tensor, r_mask=None, t_mask=None, refine: bool = True) -> Tensor:
    """One video vs one caption: mean over regions of cos(region, attended sentence).

    ``r`` holds content regions [N, d] and ``t`` content words [L, d]; CLS rows
    must already be stripped.
    """
    cos, _, _ = _local_pair(r, t, t_mask, refine)
    if r_mask is None:
        return cos.mean()
    if not bool(r_mask.any()):
        raise ValueError("no real regions")
    return (cos * r_mask).sum() / r_mask.sum()


def local_similarity_l2v(t: Tensor, r: Tensor, t_mask=None, r_mask=None, refine: bool = True) -> Tensor:
    """One caption vs one video: mean over words of cos(word, attended video)."""
    cos, _, _ = _local_pair(t, r, r_mask, refine)
    if t_mask is None:
        return cos.mean()
    if not bool(t_mask.any()):
        raise ValueError("no real words")
    return (cos * t_mask).sum() / t_mask.sum()


@dataclass
class SimilarityBundle:
    global_sim: Tensor  # [B, B]
    local_v2l: Tensor | None  # [B, B]
    local_l2v: Tensor | None  # [B, B]
    keep_v2l: Tensor | None = None  # [B, B, N, L] refinement masks
    keep_l2v: Tensor | None = None  # [B, B, L, N]
    attention: dict = field(default_factory=dict)


def compute_bundle(
    r: Tensor,
    t: Tensor,
    region_mask: Tensor,
    word_mask: Tensor,
    use_refinement: bool = True,
    with_local: bool = True,
    frozen_keep: tuple[Tensor, Tensor] | None = None,
    return_attention: bool = False,
) -> SimilarityBundle:
    """All similarities for a batch of encoded videos and captions.

    r: [B, N+1, d] with CLS in row 0; t: [B, L+1, d] likewise. ``region_mask``
    [B, N] and ``word_mask`` [B, L] cover content positions. ``frozen_keep``
    replaces the refinement masks, which is how finite-difference checks hold
    the threshold indicator fixed.
    """
    rn = _normalize(r)
    tn = _normalize(t)
    global_sim = rn[:, 0] @ tn[:, 0].T
    if not with_local:
        return SimilarityBundle(global_sim, None, None)

    regions, words = rn[:, 1:], tn[:, 1:]
    rm, wm = region_mask.bool(), word_mask.bool()
    n_real = rm.sum(dim=1).to(r.dtype)  # [B]
    l_real = wm.sum(dim=1).to(r.dtype)
    if bool((n_real == 0).any()) or bool((l_real == 0).any()):
        raise ValueError("every video needs a region and every caption a word")
    sims = torch.einsum("ind,jld->ijnl", regions, words)

    # region -> words
    wmask = wm[None, :, None, :].expand_as(sims)
    a = attention_weights(sims, wmask)
    if frozen_keep is not None:
        keep = frozen_keep[0]
    elif use_refinement:
        keep = refinement_keep(a, wmask)
    else:
        keep = wmask
    a_ref = a * keep
    alpha = torch.einsum("ijnl,jld->ijnd", a_ref, words)
    cos = (regions[:, None] * _normalize(alpha)).sum(-1)  # [B, B, N]
    v2l = (cos * rm[:, None, :]).sum(-1) / n_real[:, None]

    # word -> regions
    sims_t = sims.transpose(-1, -2)
    rmask = rm[:, None, None, :].expand_as(sims_t)
    b = attention_weights(sims_t, rmask)
    if frozen_keep is not None:
        keep_t = frozen_keep[1]
    elif use_refinement:
        keep_t = refinement_keep(b, rmask)
    else:
        keep_t = rmask
    b_ref = b * keep_t
    beta = torch.einsum("ijln,ind->ijld", b_ref, regions)
    cos_t = (words[None] * _normalize(beta)).sum(-1)  # [B, B, L]
    l2v = (cos_t * wm[None, :, :]).sum(-1) / l_real[None, :]

    attention = {}
    if return_attention:
        attention = {"v2l": a, "v2l_refined": a_ref, "l2v": b, "l2v_refined": b_ref}
    return SimilarityBundle(global_sim, v2l, l2v, keep, keep_t, attention)


def info_nce(S: Tensor, sigma: float, direction: str = "row") -> Tensor:
    """Mean negative log-probability of the diagonal under a softmax of S/sigma.

    ``row`` normalizes over j in S[i, j]; ``column`` normalizes over i.
    """
    if S.shape[0] < 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"need a square similarity matrix with B >= 2, got {tuple(S.shape)}")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if not bool(torch.isfinite(S).all()):
        raise FloatingPointError("non-finite similarity entries")
    if direction == "row":
        logp = F.log_softmax(S / sigma, dim=1)
    elif direction == "column":
        logp = F.log_softmax(S / sigma, dim=0)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return -logp.diagonal().mean()


LOSS_TERMS = ("global_v2l", "global_l2v", "local_v2l", "local_l2v")


def total_loss(bundle: SimilarityBundle, sigma: float, use_local_losses: bool = True):
    """Sum of the four contrastive terms and a per-term breakdown.

    With ``use_local_losses`` false both local terms are dropped and reported
    as exactly 0.
    """
    terms = {
        "global_v2l": info_nce(bundle.global_sim, sigma, "row"),
        "global_l2v": info_nce(bundle.global_sim, sigma, "column"),
    }
    if use_local_losses:
        if bundle.local_v2l is None or bundle.local_l2v is None:
            raise ValueError("bundle has no local similarities")
        terms["local_v2l"] = info_nce(bundle.local_v2l, sigma, "row")
        terms["local_l2v"] = info_nce(bundle.local_l2v, sigma, "column")
    else:
        zero = bundle.global_sim.new_zeros(())
        terms["local_v2l"] = zero
        terms["local_l2v"] = zero
    total = terms["global_v2l"] + terms["global_l2v"] + terms["local_v2l"] + terms["local_l2v"]
    return total, terms


def batch_loss(r, t, region_mask, word_mask, sigma, use_refinement=True, use_local_losses=True, frozen_keep=None):
    bundle = compute_bundle(
        r, t, region_mask, word_mask,
        use_refinement=use_refinement,
        with_local=use_local_losses,
        frozen_keep=frozen_keep,
    )
    return total_loss(bundle, sigma, use_local_losses)


def pair_attention(r: Tensor, t: Tensor, use_refinement: bool = True) -> dict:
    """Attention matrices for one (video, caption) pair of content features."""
    _, a, a_ref = _local_pair(r, t, None, use_refinement)
    _, b, b_ref = _local_pair(t, r, None, use_refinement)
    return {"v2l": a, "v2l_refined": a_ref, "l2v": b, "l2v_refined": b_ref}


def export_attention(path, video_id: str, caption: str, tokens, boxes, attention: dict, region_indices=None) -> dict:
    """Write one pair's attention matrices and region boxes as JSON.

    Row n of the region matrices is the region with stored position
    ``region_indices[n]`` when given.
    """
    record = {
        "video_id": video_id,
        "caption": caption,
        "tokens": list(tokens),
        "boxes": [[float(v) for v in box] for box in boxes],
        "region_indices": [int(i) for i in region_indices] if region_indices is not None else None,
        "region_to_word": _tolist(attention["v2l"]),
        "region_to_word_refined": _tolist(attention["v2l_refined"]),
        "word_to_region": _tolist(attention["l2v"]),
        "word_to_region_refined": _tolist(attention["l2v_refined"]),
    }
    Path(path).write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    return record


def _tolist(x) -> list:
    return x.detach().cpu().double().tolist() if isinstance(x, Tensor) else list(x)
