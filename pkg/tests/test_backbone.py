import math

import numpy as np
import pytest
import torch

from oracles import block_forward, block_params, central_difference, layer_norm, relative_error
from plcr.backbone import (
    Backbone,
    bce_loss,
    block_checksums,
    checksum,
    embed_sequence,
    encode_sequence,
    first_differing_block,
    pad_batch,
    pretrain_batch_loss,
    sample_negatives,
    score_next,
)
from plcr.layers import SelfAttentionBlock


def small_backbone(n_items=12, d=4, blocks=1, seed=0, dtype=torch.float64, dropout=0.0):
    torch.manual_seed(seed)
    return Backbone(n_items, d, max_len=8, blocks=blocks, dropout=dropout).to(dtype)


class TestEmbedding:
    def test_zero_tables(self):
        b = small_backbone()
        torch.nn.init.zeros_(b.item_emb.weight)
        torch.nn.init.zeros_(b.pos_emb.weight)
        assert torch.count_nonzero(embed_sequence((1, 2, 3), b)) == 0

    def test_single_item(self):
        b = small_backbone().eval()
        e = embed_sequence((5,), b)
        assert torch.equal(e[0], b.item_emb.weight[5] + b.pos_emb.weight[0])

    def test_elementwise(self):
        b = small_backbone().eval()
        seq = (3, 0, 11)
        e = embed_sequence(seq, b).detach().numpy()
        table, pos = b.item_emb.weight.detach().numpy(), b.pos_emb.weight.detach().numpy()
        expected = np.stack([table[s] + pos[i] for i, s in enumerate(seq)])
        np.testing.assert_allclose(e, expected, atol=1e-12)

    @pytest.mark.parametrize("seq", [(12,), (-1,), tuple(range(9))])
    def test_invalid(self, seq):
        b = small_backbone()
        with pytest.raises(ValueError):
            embed_sequence(seq, b)


class TestBlock:
    def test_matches_numpy_oracle(self):
        torch.manual_seed(1)
        block = SelfAttentionBlock(6, causal=True).double().eval()
        for p in block.parameters():
            torch.nn.init.normal_(p, 0, 0.5)
        x = torch.randn(1, 5, 6, dtype=torch.float64)
        out = block(x)[0].detach().numpy()
        np.testing.assert_allclose(out, block_forward(x[0].numpy(), block_params(block), True), atol=1e-10)

    def test_hand_computed_two_tokens(self):
        # width 2, identity projections, zero FFN: the hand value follows from
        # softmax([1*1 + 0*0, 1*0 + 0*1] / sqrt2) for token 2 attending to tokens 1 and 2
        block = SelfAttentionBlock(2, causal=True).double().eval()
        with torch.no_grad():
            for lin in (block.w_q, block.w_k, block.w_v):
                lin.weight.copy_(torch.eye(2))
            for lin in (block.ffn1, block.ffn2):
                lin.weight.zero_()
                lin.bias.zero_()
        x = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
        out, w = block(x, return_attention=True)
        a = 1 / (1 + math.exp(1 / math.sqrt(2)))  # weight of token 1 seen from token 2
        assert w[0, 0, 0].tolist() == [1.0, 0.0]
        assert w[0, 0, 1].tolist() == pytest.approx([a, 1 - a], abs=1e-12)
        # token 1: x + s = (2, 0) -> LN gives (1, -1); LN again leaves it (up to eps)
        assert out[0, 0].tolist() == pytest.approx([1.0, -1.0], abs=1e-5)
        # token 2: x + s = (a, 2 - a) -> sign pattern (-1, 1) since a < 1
        assert out[0, 1].tolist() == pytest.approx([-1.0, 1.0], abs=1e-5)

    def test_degenerate_block_is_layer_norm(self):
        torch.manual_seed(2)
        block = SelfAttentionBlock(5, causal=True).double().eval()
        with torch.no_grad():
            block.w_v.weight.zero_()
            block.ffn2.weight.zero_()
            block.ffn2.bias.zero_()
        x = torch.randn(1, 4, 5, dtype=torch.float64)
        ln = layer_norm(x[0].numpy(), 1.0, 0.0)
        np.testing.assert_allclose(block(x)[0].detach().numpy(), layer_norm(ln, 1.0, 0.0), atol=1e-12)
        # a second layer norm of an already normalised row only rescales it by the eps term
        np.testing.assert_allclose(block(x)[0].detach().numpy(), ln, atol=1e-4)

    def test_causality(self):
        b = small_backbone(blocks=2, seed=3).eval()
        seq = [1, 4, 2, 7, 9]
        base = b(torch.tensor([seq]))[0]
        changed = b(torch.tensor([seq[:3] + [0, 5]]))[0]
        assert torch.equal(base[:3], changed[:3])
        assert not torch.equal(base[3], changed[3])

    def test_attention_rows_stochastic_and_causal(self):
        b = small_backbone(blocks=2, seed=4).eval()
        _, attns = b(torch.tensor([[1, 2, 3, 4]]), return_attention=True)
        for w in attns:
            assert torch.allclose(w.sum(-1), torch.ones(1, 1, 4, dtype=w.dtype))
            assert torch.count_nonzero(w[0, 0].triu(1)) == 0

    def test_padding_invisible(self):
        b = small_backbone(seed=5).eval()
        ids, lengths = pad_batch([(1, 2), (3, 4, 5)])
        reps = b.sequence_repr(ids, lengths)
        assert torch.allclose(reps[0], encode_sequence((1, 2), b).repr, atol=1e-12)
        assert torch.allclose(reps[1], encode_sequence((3, 4, 5), b).repr, atol=1e-12)


class TestScoring:
    def test_orthogonal_and_unit(self):
        b = small_backbone(d=3)
        with torch.no_grad():
            b.item_emb.weight[0] = torch.tensor([1.0, 0.0, 0.0])
        assert score_next(torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64), 0, b) == 0
        assert score_next(torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64), 0, b) == 1

    def test_random_dot(self):
        b = small_backbone()
        s = torch.randn(4, dtype=torch.float64)
        expected = float(s @ b.item_emb.weight[7].detach())
        assert float(score_next(s, 7, b).detach()) == pytest.approx(expected, abs=1e-12)


class TestLoss:
    def test_chance_level(self):
        z = torch.zeros(3, 4)
        assert float(bce_loss(z, z, torch.ones(3, 4))) == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_perfect(self):
        assert float(bce_loss(torch.full((2, 2), 40.0), torch.full((2, 2), -40.0), torch.ones(2, 2))) < 1e-12

    def test_mask_ignores_padding(self):
        pos = torch.tensor([[0.0, 100.0]])
        neg = torch.tensor([[0.0, 100.0]])
        mask = torch.tensor([[True, False]])
        assert float(bce_loss(pos, neg, mask)) == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_negatives_same_domain_and_unseen(self):
        gen = torch.Generator().manual_seed(0)
        full = torch.tensor([[0, 1, 2, -1], [10, 11, 12, 13]])
        ranges = [range(0, 6), range(6, 16)]
        for _ in range(20):
            neg = sample_negatives(full, ranges, gen)
            for row, r in zip(range(2), ranges):
                assert all(int(n) in r for n in neg[row])
                assert not set(neg[row].tolist()) & set(full[row].tolist())

    def test_loss_decreases_small_lr(self):
        b = small_backbone(n_items=20, d=8, seed=6)
        rows = [(0, 3, 5, 7), (2, 4, 6, 8, 1), (11, 13, 15), (12, 14, 16, 18)]
        ranges = [range(0, 10)] * 2 + [range(10, 20)] * 2
        opt = torch.optim.SGD(b.parameters(), lr=1e-4)
        losses = []
        for step in range(50):
            loss = pretrain_batch_loss(b, rows, ranges, torch.Generator().manual_seed(0))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        assert losses[-1] < losses[0]

    def test_gradient_matches_finite_differences(self):
        b = small_backbone(n_items=10, d=4, seed=7)
        rows = [(1, 2, 3), (6, 7, 8)]
        ranges = [range(0, 5), range(5, 10)]
        # larger weights than the default init keep every gradient well above the
        # finite-difference noise floor
        with torch.no_grad():
            for p in b.parameters():
                p.normal_(0, 0.5)

        def loss():
            return pretrain_batch_loss(b, rows, ranges, torch.Generator().manual_seed(3))

        b.zero_grad()
        loss().backward()
        with torch.no_grad():
            for name, p in b.named_parameters():
                numeric = central_difference(loss, p)
                assert relative_error(p.grad.numpy(), numeric.numpy()) < 1e-4, name


class TestFreeze:
    def test_freeze_sets_flags(self):
        b = small_backbone(dropout=0.2)
        digest = b.freeze()
        assert digest == checksum(b) == b.freeze_checksum
        assert not any(p.requires_grad for p in b.parameters())
        b.train()
        assert not b.training

    def test_first_differing_block(self):
        b = small_backbone(blocks=2)
        before = block_checksums(b)
        with torch.no_grad():
            b.blocks[1].ffn1.bias[0] += 1e-9
        after = block_checksums(b)
        assert first_differing_block(before, after) == "blocks.1.ffn1.bias"
        assert first_differing_block(before, before) is None
