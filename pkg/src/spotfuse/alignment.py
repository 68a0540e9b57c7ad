"""Masked cross-modal contrastive alignment.

For each ordered modality pair, spots are positives with themselves in the
other modality; candidates too similar to the anchor *within the anchor's
own modality* are masked out of the denominator so near-duplicates are not
punished as negatives.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import combinations

import torch
from torch import Tensor


@dataclass
class SimilarityMask:
    """Self-similarity matrix with its binary candidate mask and threshold."""

    sim: Tensor
    mask: Tensor  # bool; True = keep in denominator
    delta: float


def _unit_rows(emb: Tensor) -> Tensor:
    # clamp (not add) keeps the self-similarity diagonal at exactly 1
    # for any nonzero row while still guarding zero rows
    return emb / emb.norm(dim=1, keepdim=True).clamp_min(1e-12)


def cosine_sim_matrix(a: Tensor, b: Tensor | None = None) -> Tensor:
    """Pairwise cosine similarities; sim(a, a) when b is omitted."""
    ua = _unit_rows(a)
    ub = ua if b is None else _unit_rows(b)
    return ua @ ub.T


def build_mask(emb: Tensor, delta: float) -> SimilarityMask:
    """Mask entry (i, j) is dropped iff sim(i, j) > delta and i != j.

    The diagonal always stays: each anchor keeps its own positive.
    """
    sim = cosine_sim_matrix(emb.detach())
    keep = sim <= delta
    keep.fill_diagonal_(True)
    return SimilarityMask(sim=sim, mask=keep, delta=delta)


def masked_infonce(emb_a: Tensor, emb_b: Tensor, mask: Tensor, tau: float) -> Tensor:
    """-mean_i log [ exp(sim_ii/tau) / sum_j mask_ij exp(sim_ij/tau) ].

    sim is the cross-modal cosine similarity; the mask (from modality a's
    self-similarity) selects which candidates enter the denominator.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if emb_a.shape != emb_b.shape:
        raise ValueError(f"embedding shapes differ: {tuple(emb_a.shape)} vs {tuple(emb_b.shape)}")
    logits = cosine_sim_matrix(emb_a, emb_b) / tau
    denom = torch.logsumexp(logits.masked_fill(~mask, float("-inf")), dim=1)
    return (denom - logits.diagonal()).mean()


def contrastive_terms(
    embeddings: dict[str, Tensor], delta: float, tau: float
) -> dict[tuple[str, str], Tensor]:
    """Symmetric loss per unordered modality pair.

    Each pair averages the two directions, each direction masked by its
    anchor modality's own similarity structure.
    """
    masks = {name: build_mask(emb, delta).mask for name, emb in embeddings.items()}
    terms = {}
    for m1, m2 in combinations(sorted(embeddings), 2):
        forward = masked_infonce(embeddings[m1], embeddings[m2], masks[m1], tau)
        backward = masked_infonce(embeddings[m2], embeddings[m1], masks[m2], tau)
        terms[(m1, m2)] = 0.5 * (forward + backward)
    return terms


def pairwise_contrastive(embeddings: dict[str, Tensor], delta: float, tau: float) -> Tensor:
    """Total alignment loss over all modality pairs (0 for a single modality)."""
    terms = contrastive_terms(embeddings, delta, tau)
    if not terms:
        warnings.warn("contrastive alignment needs at least two modalities; returning 0")
        return torch.zeros((), dtype=next(iter(embeddings.values())).dtype)
    return sum(terms.values())
