"""Dual-graph encoding and attention fusion of per-modality embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .graph import SparseAdjacency
from .neural import DTYPE, AttentionParams, FusionModel


def dense_operator(adj: SparseAdjacency) -> Tensor:
    """Normalized adjacency as a dense float64 tensor for the autograd path."""
    return torch.from_numpy(adj.to_dense()).to(DTYPE)


@dataclass
class ModalityEmbeddings:
    """Spatial-view, feature-view, and attention-fused embeddings (N x d_L)."""

    spatial: Tensor
    feature: Tensor
    fused: Tensor
    attn: Tensor  # (N, 2) weights: column 0 spatial, column 1 feature


def kan_gcn_forward(adj: Tensor, x: Tensor, layers) -> Tensor:
    """Propagate through a stack of spline layers: h <- act(adj @ layer(h)).

    Hidden layers use ReLU; the final layer is linear. With all spline
    coefficients at zero this reduces to a plain graph convolution over
    the normalized inputs.
    """
    h = x
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        h = adj @ layer(h)
        if i != last:
            h = torch.relu(h)
    return h


def attention_fuse(spatial: Tensor, feature: Tensor, params: AttentionParams) -> ModalityEmbeddings:
    """Blend the two views with per-spot softmax attention weights."""
    scores = torch.stack([params.score(spatial), params.score(feature)], dim=1)
    attn = torch.softmax(scores, dim=1)
    fused = attn[:, :1] * spatial + attn[:, 1:] * feature
    return ModalityEmbeddings(spatial=spatial, feature=feature, fused=fused, attn=attn)


def encode_all(
    model: FusionModel,
    features: dict[str, Tensor],
    adj_spatial: Tensor,
    adj_feature: dict[str, Tensor],
) -> dict[str, ModalityEmbeddings]:
    """Encode every modality along both graphs and fuse the views."""
    out = {}
    for name in model.modality_names:
        f = features[name]
        e_spatial = kan_gcn_forward(adj_spatial, f, model.spatial_layers(name))
        e_feature = kan_gcn_forward(adj_feature[name], f, model.feature_stacks[name])
        out[name] = attention_fuse(e_spatial, e_feature, model.attention_params(name))
    return out


def freeze_shared_spatial(model: FusionModel, features: dict[str, Tensor], adj_spatial: Tensor):
    """Freeze the shared spatial stack's normalization over all modalities.

    Layer stats come from the row-concatenation of every modality's input
    to that layer; freezing on a single modality would clamp the others
    arbitrarily. No-op for per-modality stacks (they freeze lazily).
    """
    if not model.share_spatial:
        return
    with torch.no_grad():
        hs = [features[name] for name in model.modality_names]
        last = model.n_layers - 1
        for i, layer in enumerate(model.spatial_stack):
            if not layer.frozen:
                layer.freeze_normalization(torch.cat(hs))
            hs = [adj_spatial @ layer(h) for h in hs]
            if i != last:
                hs = [torch.relu(h) for h in hs]
