import numpy as np
import pytest
import torch

from spotfuse.encoder import (
    attention_fuse,
    dense_operator,
    encode_all,
    freeze_shared_spatial,
    kan_gcn_forward,
)
from spotfuse.graph import knn_graph, normalize
from spotfuse.neural import AttentionParams, FusionModel, KanLayer

torch.set_num_threads(1)


def random_operator(n, k, seed):
    rng = np.random.default_rng(seed)
    return dense_operator(normalize(knn_graph(rng.normal(size=(n, 2)), k)))


def plain_gcn_oracle(adj, x, layers):
    """Independent numpy GCN using each layer's frozen normalization and
    linear weights only (spline coefficients are assumed zero)."""
    a = adj.numpy()
    h = x.numpy()
    for i, layer in enumerate(layers):
        lo = layer.norm_lo.numpy()
        span = layer.norm_span.numpy()
        hn = np.clip((h - lo) / span, 0.0, 1.0)
        h = a @ (hn @ layer.linear_coeff.detach().numpy().T)
        if i != len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


class TestKanGcnForward:
    def test_reduces_to_plain_gcn_when_splines_zero(self):
        gen = torch.Generator().manual_seed(0)
        for trial in range(10):
            adj = random_operator(20, 4, trial)
            layers = [KanLayer(5, 7), KanLayer(7, 3)]
            for layer in layers:
                layer.init_weights(gen)
            x = torch.randn(20, 5, dtype=torch.float64, generator=gen)
            out = kan_gcn_forward(adj, x, layers)
            oracle = plain_gcn_oracle(adj, x, layers)
            assert np.abs(out.detach().numpy() - oracle).max() < 1e-10

    def test_single_layer_no_activation(self):
        adj = random_operator(10, 3, 1)
        layer = KanLayer(4, 2)
        with torch.no_grad():
            layer.linear_coeff.fill_(-1.0)  # strictly negative outputs
        x = torch.rand(10, 4, dtype=torch.float64) + 0.1
        out = kan_gcn_forward(adj, x, [layer])
        assert (out < 0).all()  # final layer is linear, not ReLU

    def test_dimension_chain_checked(self):
        adj = random_operator(8, 2, 2)
        layers = [KanLayer(3, 5), KanLayer(4, 2)]  # 5 -> 4 mismatch
        with pytest.raises(ValueError, match="shape"):
            kan_gcn_forward(adj, torch.zeros(8, 3, dtype=torch.float64), layers)

    def test_identity_adjacency_single_node(self):
        adj = torch.ones(1, 1, dtype=torch.float64)
        layer = KanLayer(2, 2)
        layer.set_normalization(0.0, 1.0)
        with torch.no_grad():
            layer.linear_coeff.copy_(torch.eye(2, dtype=torch.float64))
        x = torch.tensor([[0.2, 0.9]], dtype=torch.float64)
        assert torch.abs(kan_gcn_forward(adj, x, [layer]) - x).max() < 1e-15


class TestAttentionFuse:
    def make_params(self, seed=0):
        params = AttentionParams(d_latent=6, d_att=4)
        params.init_weights(torch.Generator().manual_seed(seed))
        return params

    def test_matches_numpy_oracle(self):
        params = self.make_params()
        gen = torch.Generator().manual_seed(1)
        e_s = torch.randn(9, 6, dtype=torch.float64, generator=gen)
        e_f = torch.randn(9, 6, dtype=torch.float64, generator=gen)
        out = attention_fuse(e_s, e_f, params)

        w = params.proj.detach().numpy()
        b = params.bias.detach().numpy()
        q = params.query.detach().numpy()
        scores = np.stack([
            np.tanh(e_s.numpy() @ w.T + b) @ q,
            np.tanh(e_f.numpy() @ w.T + b) @ q,
        ], axis=1)
        ex = np.exp(scores - scores.max(axis=1, keepdims=True))
        alpha = ex / ex.sum(axis=1, keepdims=True)
        fused = alpha[:, :1] * e_s.numpy() + alpha[:, 1:] * e_f.numpy()
        assert np.abs(out.attn.detach().numpy() - alpha).max() < 1e-12
        assert np.abs(out.fused.detach().numpy() - fused).max() < 1e-12

    def test_weights_positive_and_normalized(self):
        params = self.make_params(2)
        gen = torch.Generator().manual_seed(3)
        e_s = torch.randn(30, 6, dtype=torch.float64, generator=gen)
        e_f = torch.randn(30, 6, dtype=torch.float64, generator=gen)
        out = attention_fuse(e_s, e_f, params)
        attn = out.attn.detach()
        assert torch.all(attn > 0)
        assert torch.abs(attn.sum(dim=1) - 1.0).max() < 1e-12

    def test_fused_between_views(self):
        params = self.make_params(4)
        gen = torch.Generator().manual_seed(5)
        e_s = torch.randn(20, 6, dtype=torch.float64, generator=gen)
        e_f = torch.randn(20, 6, dtype=torch.float64, generator=gen)
        fused = attention_fuse(e_s, e_f, params).fused.detach()
        lo = torch.minimum(e_s, e_f) - 1e-12
        hi = torch.maximum(e_s, e_f) + 1e-12
        assert torch.all(fused >= lo)
        assert torch.all(fused <= hi)


class TestEncodeAll:
    def setup_inputs(self, dims=(5, 5, 5), n=16, seed=0):
        rng = np.random.default_rng(seed)
        names = ["rna", "adt", "img"]
        feats = {m: torch.from_numpy(rng.normal(size=(n, d))) for m, d in zip(names, dims)}
        adj_s = random_operator(n, 3, seed + 10)
        adj_f = {m: random_operator(n, 4, seed + 20 + i) for i, m in enumerate(names)}
        return feats, adj_s, adj_f

    def test_shapes_and_keys(self):
        feats, adj_s, adj_f = self.setup_inputs()
        model = FusionModel({m: 5 for m in feats}, d_latent=6, d_att=3, grid_size=4)
        out = encode_all(model, feats, adj_s, adj_f)
        assert list(out) == ["rna", "adt", "img"]
        for emb in out.values():
            assert emb.spatial.shape == (16, 6)
            assert emb.feature.shape == (16, 6)
            assert emb.fused.shape == (16, 6)
            assert emb.attn.shape == (16, 2)

    def test_shared_stats_cover_all_modalities(self):
        feats, adj_s, adj_f = self.setup_inputs()
        # push one modality's scale far away from the others
        feats["img"] = feats["img"] * 50.0
        model = FusionModel({m: 5 for m in feats}, d_latent=6, d_att=3, grid_size=4)
        freeze_shared_spatial(model, feats, adj_s)
        first = model.spatial_layers("rna")[0]
        stacked = torch.cat(list(feats.values()))
        lo = stacked.min(dim=0).values
        hi = stacked.max(dim=0).values
        assert torch.all(first.norm_lo <= lo)
        assert torch.all(first.norm_lo + first.norm_span >= hi)
        # idempotent: second call leaves frozen stats alone
        before = first.norm_lo.clone()
        freeze_shared_spatial(model, feats, adj_s)
        assert torch.equal(first.norm_lo, before)

    def test_per_modality_stacks_support_unequal_dims(self):
        feats, adj_s, adj_f = self.setup_inputs(dims=(5, 4, 3))
        model = FusionModel(
            {"rna": 5, "adt": 4, "img": 3}, d_latent=6, d_att=3, grid_size=4,
            share_spatial=False,
        )
        out = encode_all(model, feats, adj_s, adj_f)
        assert all(emb.fused.shape == (16, 6) for emb in out.values())
