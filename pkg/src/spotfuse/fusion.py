"""Confidence-gated mixture-of-experts fusion and graph reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .neural import Ffn, KanLayer

GATE_EPSILON = 1e-6


@dataclass
class GateDecision:
    """Per-spot routing weights over modalities.

    raw:      softmax confidences (N, M)
    filtered: raw with entries below gamma zeroed (N, M)
    weights:  renormalized filtered weights; fallback rows are a one-hot
              on the argmax modality and are treated as constants
    fallback: bool (N,), True where every confidence missed the threshold
    """

    raw: Tensor
    filtered: Tensor
    weights: Tensor
    fallback: Tensor
    gamma: float


def gate_from_logits(logits: Tensor, gamma: float) -> GateDecision:
    """Threshold-and-renormalize soft routing from gate logits.

    Rows where at least one confidence clears gamma keep the surviving
    confidences, renormalized by their sum plus a small epsilon; gradient
    flows through the survivors. Rows where every confidence is below
    gamma fall back to a hard constant one-hot on the most confident
    modality (ties resolve to the lowest modality index).
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be (n, m), got shape {tuple(logits.shape)}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    raw = torch.softmax(logits, dim=1)
    filtered = torch.where(raw >= gamma, raw, torch.zeros((), dtype=raw.dtype))
    fallback = (raw < gamma).all(dim=1)
    soft = filtered / (filtered.sum(dim=1, keepdim=True) + GATE_EPSILON)
    # numpy argmax documents first-occurrence tie-breaking
    best = torch.from_numpy(np.argmax(raw.detach().numpy(), axis=1))
    onehot = torch.nn.functional.one_hot(best, logits.shape[1]).to(raw.dtype)
    weights = torch.where(fallback[:, None], onehot, soft)
    return GateDecision(raw=raw, filtered=filtered, weights=weights, fallback=fallback, gamma=gamma)


def gate(embeddings: dict[str, Tensor], gate_weight: Tensor, gamma: float) -> GateDecision:
    """Route from the mean of the modality embeddings through the gate matrix."""
    stack = torch.stack(list(embeddings.values()))
    if gate_weight.shape != (stack.shape[2], stack.shape[0]):
        raise ValueError(
            f"gate matrix must be ({stack.shape[2]}, {stack.shape[0]}),"
            f" got {tuple(gate_weight.shape)}"
        )
    return gate_from_logits(stack.mean(dim=0) @ gate_weight, gamma)


@dataclass
class FusedRepresentation:
    """Fused latent (N, d_L) plus each expert's output."""

    z: Tensor
    expert_outputs: dict[str, Tensor]


def fuse(
    embeddings: dict[str, Tensor],
    experts: dict[str, Ffn],
    decision: GateDecision | None,
) -> FusedRepresentation:
    """Weighted sum of expert outputs; unweighted sum when decision is None.

    The None path is the fusion ablation: every expert contributes with
    weight 1 and the gate is bypassed entirely.
    """
    outputs = {name: experts[name](emb) for name, emb in embeddings.items()}
    stacked = torch.stack(list(outputs.values()), dim=2)  # (N, d, M)
    if decision is None:
        z = stacked.sum(dim=2)
    else:
        if decision.weights.shape != (stacked.shape[0], stacked.shape[2]):
            raise ValueError(
                f"decision covers {tuple(decision.weights.shape)},"
                f" expected ({stacked.shape[0]}, {stacked.shape[2]})"
            )
        z = (stacked * decision.weights[:, None, :]).sum(dim=2)
    return FusedRepresentation(z=z, expert_outputs=outputs)


def decode(z: Tensor, adj_spatial: Tensor, decoders: dict[str, KanLayer]) -> dict[str, Tensor]:
    """Reconstruct each modality: F̂ = adj @ decoder(z), linear output."""
    return {name: adj_spatial @ layer(z) for name, layer in decoders.items()}


def reconstruction_loss(original: Tensor, reconstructed: Tensor) -> Tensor:
    """Mean over spots of the squared feature-space error."""
    if original.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch: {tuple(original.shape)} vs {tuple(reconstructed.shape)}")
    return ((original - reconstructed) ** 2).sum(dim=1).mean()


def total_loss(rec_losses, contrast: Tensor | float, lam: float) -> Tensor:
    """Sum of reconstruction terms plus lam times the alignment loss."""
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    rec_losses = list(rec_losses)
    if not rec_losses:
        raise ValueError("at least one reconstruction term is required")
    total = rec_losses[0]
    for term in rec_losses[1:]:
        total = total + term
    return total + lam * contrast
