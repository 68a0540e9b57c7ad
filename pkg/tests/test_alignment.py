import math

import numpy as np
import pytest
import torch

from spotfuse.alignment import (
    build_mask,
    contrastive_terms,
    cosine_sim_matrix,
    masked_infonce,
    pairwise_contrastive,
)

torch.set_num_threads(1)


def naive_cosine(a, b):
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            na = max(np.linalg.norm(a[i]), 1e-12)
            nb = max(np.linalg.norm(b[j]), 1e-12)
            out[i, j] = float(a[i] @ b[j]) / (na * nb)
    return out


def naive_masked_infonce(a, b, delta, tau):
    """Double-loop reference: mask from a's self-similarity, loss per anchor."""
    n = len(a)
    self_sim = naive_cosine(a, a)
    mask = np.ones((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if i != j and self_sim[i, j] > delta:
                mask[i, j] = False
    cross = naive_cosine(a, b)
    total = 0.0
    for i in range(n):
        num = math.exp(cross[i, i] / tau)
        den = sum(math.exp(cross[i, j] / tau) for j in range(n) if mask[i, j])
        total += -math.log(num / den)
    return total / n


def rand_emb(n, d, seed):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=(n, d)))


class TestCosine:
    def test_matches_naive(self):
        a = rand_emb(7, 4, 0)
        b = rand_emb(9, 4, 1)
        got = cosine_sim_matrix(a, b).numpy()
        assert np.abs(got - naive_cosine(a.numpy(), b.numpy())).max() < 1e-12

    def test_self_diagonal_is_one(self):
        a = rand_emb(12, 5, 2) * 0.001  # even tiny rows keep an exact diagonal
        sim = cosine_sim_matrix(a)
        assert torch.abs(sim.diagonal() - 1.0).max() < 1e-12

    def test_zero_row_guarded(self):
        a = rand_emb(4, 3, 3)
        a[1] = 0.0
        sim = cosine_sim_matrix(a)
        assert torch.isfinite(sim).all()
        assert torch.all(sim[1] == 0.0)


class TestBuildMask:
    def test_worked_example(self):
        emb = torch.tensor([
            [1.0, 0.0],
            [0.999, 0.01],   # nearly parallel to row 0
            [0.0, 1.0],
        ], dtype=torch.float64)
        m = build_mask(emb, delta=0.9)
        assert m.delta == 0.9
        assert m.mask.diagonal().all()
        assert not m.mask[0, 1] and not m.mask[1, 0]
        assert m.mask[0, 2] and m.mask[2, 0]

    def test_low_delta_keeps_diagonal_only(self):
        emb = rand_emb(6, 4, 4)
        m = build_mask(emb, delta=-1.5)
        assert torch.equal(m.mask, torch.eye(6, dtype=torch.bool))

    def test_high_delta_keeps_everything(self):
        emb = rand_emb(6, 4, 5)
        m = build_mask(emb, delta=1.5)
        assert m.mask.all()


class TestMaskedInfonce:
    @pytest.mark.parametrize("delta", [-1.5, 0.5, 0.9, 1.5])
    @pytest.mark.parametrize("tau", [0.1, 0.5, 1.0])
    def test_matches_double_loop(self, delta, tau):
        for seed in range(3):
            n = [5, 11, 16][seed]
            a = rand_emb(n, 6, seed)
            b = rand_emb(n, 6, 100 + seed)
            mask = build_mask(a, delta).mask
            got = masked_infonce(a, b, mask, tau).item()
            want = naive_masked_infonce(a.numpy(), b.numpy(), delta, tau)
            assert abs(got - want) < 1e-10

    def test_identity_mask_on_self_is_zero(self):
        a = rand_emb(8, 5, 7)
        mask = build_mask(a, delta=-1.5).mask  # diagonal only
        assert abs(masked_infonce(a, a, mask, 0.5).item()) < 1e-12

    def test_duplicate_anchor_masked_out(self):
        a = rand_emb(5, 4, 8)
        a[3] = a[0]  # duplicate anchors within the source modality
        b = rand_emb(5, 4, 9)
        loss = masked_infonce(a, b, build_mask(a, 0.99).mask, 0.5)
        want = naive_masked_infonce(a.numpy(), b.numpy(), 0.99, 0.5)
        assert abs(loss.item() - want) < 1e-10

    def test_bad_tau(self):
        a = rand_emb(3, 2, 0)
        with pytest.raises(ValueError, match="tau"):
            masked_infonce(a, a, build_mask(a, 0.9).mask, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            masked_infonce(rand_emb(3, 2, 0), rand_emb(4, 2, 1),
                           torch.ones(3, 3, dtype=torch.bool), 0.5)

    def test_gradient_flows(self):
        a = rand_emb(6, 4, 10).requires_grad_(True)
        b = rand_emb(6, 4, 11).requires_grad_(True)
        loss = masked_infonce(a, b, build_mask(a.detach(), 0.9).mask, 0.5)
        ga, gb = torch.autograd.grad(loss, [a, b])
        assert torch.isfinite(ga).all() and torch.isfinite(gb).all()
        assert ga.abs().max() > 0 and gb.abs().max() > 0


class TestPairwise:
    def embeddings(self, seed=0):
        return {
            "rna": rand_emb(9, 5, seed),
            "adt": rand_emb(9, 5, seed + 1),
            "img": rand_emb(9, 5, seed + 2),
        }

    def test_three_pairs_symmetric_average(self):
        embs = self.embeddings()
        terms = contrastive_terms(embs, delta=0.9, tau=0.5)
        assert set(terms) == {("adt", "img"), ("adt", "rna"), ("img", "rna")}
        m_rna = build_mask(embs["rna"], 0.9).mask
        m_adt = build_mask(embs["adt"], 0.9).mask
        want = 0.5 * (
            masked_infonce(embs["adt"], embs["rna"], m_adt, 0.5)
            + masked_infonce(embs["rna"], embs["adt"], m_rna, 0.5)
        )
        assert abs(terms[("adt", "rna")].item() - want.item()) < 1e-12

    def test_invariant_to_renaming(self):
        embs = self.embeddings(3)
        total = pairwise_contrastive(embs, 0.9, 0.5).item()
        renamed = {"x": embs["img"], "y": embs["rna"], "z": embs["adt"]}
        assert abs(pairwise_contrastive(renamed, 0.9, 0.5).item() - total) < 1e-12

    def test_single_modality_warns_and_returns_zero(self):
        with pytest.warns(UserWarning, match="two modalities"):
            out = pairwise_contrastive({"rna": rand_emb(4, 3, 0)}, 0.9, 0.5)
        assert out.item() == 0.0
