import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import block_forward, block_params, central_difference, relative_error, softmax
from plcr.model import PromptConfig, build_model
from plcr.prompt import (
    LAYOUTS,
    PromptEncoder,
    PromptSet,
    aggregate_tokens,
    compose_prompt,
    encode_prompt,
    normalize_layout,
    prompt_vector,
)

D = 4
TABLE = torch.randn(10, D, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
RANGES = {"A": range(0, 6), "B": range(6, 10)}


def prompt_set(m1=3, m2=5, layout="label_end", seed=0, **kw):
    torch.manual_seed(seed)
    return PromptSet(D, m1, m2, layout, **kw).double()


def encoder(length, seed=0, **kw):
    torch.manual_seed(seed)
    kw.setdefault("dropout", 0.0)
    return PromptEncoder(D, length, **kw).double().eval()


class TestCompose:
    def test_length_and_label_row(self):
        ps = prompt_set()
        t = compose_prompt(2, "A", ps, TABLE, RANGES["A"])
        assert t.shape == (9, D)
        assert torch.equal(t[-1], TABLE[2])
        assert torch.equal(t[:3], ps.shared.detach())
        assert torch.equal(t[3:8], ps.specific["A"].detach())

    def test_layouts_are_row_permutations(self):
        rows = {}
        for layout in LAYOUTS:
            ps = prompt_set(layout=layout)
            t = compose_prompt(7, "B", ps, TABLE, RANGES["B"])
            assert torch.equal(t[ps.label_index()], TABLE[7])
            rows[layout] = sorted(map(tuple, t.detach().tolist()))
        assert rows["label_end"] == rows["label_middle"] == rows["label_front"]

    def test_wrong_domain(self):
        with pytest.raises(ValueError, match="does not belong"):
            compose_prompt(7, "A", prompt_set(), TABLE, RANGES["A"])

    def test_aliases(self):
        assert normalize_layout("front") == "label_front"
        with pytest.raises(ValueError):
            normalize_layout("sideways")

    def test_no_specific_and_no_independent_lengths(self):
        assert compose_prompt(1, "A", prompt_set(m2=0), TABLE, RANGES["A"]).shape[0] == 4
        assert compose_prompt(1, "A", prompt_set(m1=0), TABLE, RANGES["A"]).shape[0] == 6

    def test_label_is_not_a_gradient_path(self):
        table = TABLE.clone().requires_grad_(True)
        t = compose_prompt(1, "A", prompt_set(), table, RANGES["A"])
        t.sum().backward()
        assert table.grad is None


class TestEncode:
    def test_identical_rows_identical_outputs(self):
        enc = encoder(5, use_positions=False)
        x = encode_prompt(TABLE[3].expand(5, D).clone(), enc)
        assert torch.allclose(x, x[0].expand(5, D), atol=1e-12)

    def test_single_block_matches_numpy(self):
        enc = encoder(3, blocks=1)
        with torch.no_grad():
            for p in enc.blocks[0].parameters():
                p.normal_(0, 0.5)
        t = torch.randn(3, D, dtype=torch.float64)
        expected = block_forward((t + enc.pos_emb).detach().numpy(), block_params(enc.blocks[0]), False)
        np.testing.assert_allclose(encode_prompt(t, enc).detach().numpy(), expected, atol=1e-10)

    def test_attention_rows_sum_to_one_and_unmasked(self):
        enc = encoder(6)
        _, attns = enc.encode(torch.randn(2, 6, D, dtype=torch.float64), return_attention=True)
        for w in attns:
            assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)))
            assert torch.count_nonzero(w[0, 0].triu(1)) > 0

    def test_permutation_equivariance_without_positions(self):
        enc = encoder(5, use_positions=False)
        t = torch.randn(5, D, dtype=torch.float64)
        perm = torch.tensor([3, 0, 4, 1, 2])
        assert torch.allclose(encode_prompt(t[perm], enc), encode_prompt(t, enc)[perm], atol=1e-12)
        label = torch.randn(D, dtype=torch.float64)
        z1 = aggregate_tokens(encode_prompt(t, enc), label, enc)
        z2 = aggregate_tokens(encode_prompt(t[perm], enc), label, enc)
        assert torch.allclose(z1, z2, atol=1e-12)

    def test_positions_break_permutation_symmetry(self):
        enc = encoder(5)
        t = torch.randn(5, D, dtype=torch.float64)
        perm = torch.tensor([3, 0, 4, 1, 2])
        assert not torch.allclose(encode_prompt(t[perm], enc), encode_prompt(t, enc)[perm], atol=1e-6)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            encoder(3).encode(torch.zeros(1, 3, D + 1, dtype=torch.float64))


class TestAggregate:
    def test_zero_output_weights_give_mean(self):
        enc = encoder(4)
        with torch.no_grad():
            enc.agg_out.weight.zero_()
            enc.agg_out.bias.zero_()
        x = torch.randn(4, D, dtype=torch.float64)
        assert torch.allclose(aggregate_tokens(x, TABLE[0], enc), x.mean(0), atol=1e-12)

    def test_hand_weights(self):
        # hidden unit 0 reads x_i[0]; scores are (ln 1, ln 3) so weights are (1/4, 3/4)
        enc = encoder(2)
        with torch.no_grad():
            for p in (enc.agg_hidden.weight, enc.agg_hidden.bias, enc.agg_out.weight, enc.agg_out.bias):
                p.zero_()
            enc.agg_hidden.weight[0, D] = 1.0
            enc.agg_out.weight[0, 0] = 1.0
        x = torch.zeros(1, 2, D, dtype=torch.float64)
        x[0, 0, 0], x[0, 1, 0] = math.log(1), math.log(3)
        x[0, :, 1] = torch.tensor([1.0, 5.0])
        gamma = enc.token_weights(x, TABLE[:1])
        assert gamma[0].tolist() == pytest.approx([0.25, 0.75], abs=1e-12)
        z = enc.aggregate(x, TABLE[:1])[0]
        assert z[1].item() == pytest.approx(0.25 * 1 + 0.75 * 5, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.integers(1, 8))
    def test_weights_are_a_distribution(self, seed, length):
        enc = encoder(length, seed=seed)
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(3, length, D, generator=g, dtype=torch.float64) * 5
        gamma = enc.token_weights(x, torch.randn(3, D, generator=g, dtype=torch.float64))
        assert bool((gamma >= 0).all())
        assert torch.allclose(gamma.sum(-1), torch.ones(3, dtype=torch.float64))

    def test_scores_match_numpy(self):
        enc = encoder(3)
        x = torch.randn(2, 3, D, dtype=torch.float64)
        labels = torch.randn(2, D, dtype=torch.float64)
        w1, b1 = enc.agg_hidden.weight.detach().numpy(), enc.agg_hidden.bias.detach().numpy()
        w2, b2 = enc.agg_out.weight.detach().numpy()[0], enc.agg_out.bias.item()
        expected = np.empty((2, 3))
        for n in range(2):
            for i in range(3):
                cat = np.concatenate([labels[n].numpy(), x[n, i].numpy()])
                expected[n, i] = w2 @ np.maximum(w1 @ cat + b1, 0) + b2
        np.testing.assert_allclose(enc.token_weights(x, labels).detach().numpy(), softmax(expected), atol=1e-12)

    def test_no_attention_is_uniform_mean(self):
        enc = encoder(4, use_attention=False)
        x = torch.randn(1, 4, D, dtype=torch.float64)
        assert torch.allclose(enc.aggregate(x, TABLE[:1])[0], x[0].mean(0), atol=1e-12)


class TestPromptVector:
    def test_deterministic(self):
        ps, enc = prompt_set(), encoder(9)
        a = prompt_vector(1, "A", ps, enc, TABLE, RANGES["A"])
        b = prompt_vector(1, "A", ps, enc, TABLE, RANGES["A"])
        assert torch.equal(a, b) and a.shape == (D,)

    def test_shared_and_specific_reach(self):
        ps = prompt_set()
        enc = {"A": encoder(9), "B": encoder(9, seed=1)}
        vec = lambda dom, item: prompt_vector(item, dom, ps, enc[dom], TABLE, RANGES[dom])
        a0, b0 = vec("A", 1), vec("B", 7)
        with torch.no_grad():
            ps.specific["B"].add_(0.3)
        assert torch.equal(vec("A", 1), a0)
        assert not torch.allclose(vec("B", 7), b0)
        b1 = vec("B", 7)
        with torch.no_grad():
            ps.shared.add_(0.3)
        assert not torch.allclose(vec("A", 1), a0)
        assert not torch.allclose(vec("B", 7), b1)

    def test_domain_parameters_disjoint(self):
        ps = prompt_set()
        a, b = map(lambda d: {id(p) for p in ps.domain_parameters(d)}, "AB")
        assert a & b == {id(ps.shared)}
        ps2 = prompt_set(share_context=False)
        a, b = map(lambda d: {id(p) for p in ps2.domain_parameters(d)}, "AB")
        assert not a & b

    def test_gradient_matches_finite_differences(self):
        ps, enc = prompt_set(m1=2, m2=2), encoder(5, blocks=1)
        with torch.no_grad():
            for p in list(enc.parameters()):
                p.normal_(0, 0.5)
        w = torch.randn(D, dtype=torch.float64)

        def objective():
            return prompt_vector(3, "A", ps, enc, TABLE, RANGES["A"]) @ w

        params = list(ps.domain_parameters("A")) + list(enc.parameters())
        for p in params:
            p.grad = None
        objective().backward()
        with torch.no_grad():
            # the aggregation bias has an exactly zero gradient, so compare the whole vector
            analytic = np.concatenate([p.grad.numpy().ravel() for p in params])
            numeric = np.concatenate([central_difference(objective, p).numpy().ravel() for p in params])
        assert relative_error(analytic, numeric) < 1e-4


def test_build_model_ties_encoder_init_and_restores_rng(toy_backbone, toy_data):
    state = torch.random.get_rng_state()
    model = build_model(toy_backbone, toy_data.id_ranges, PromptConfig(m1=2, m2=2, blocks=1), seed=4)
    assert torch.equal(torch.random.get_rng_state(), state)
    sa, sb = model.encoders["A"].state_dict(), model.encoders["B"].state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert model.encoders["A"].pos_emb is not model.encoders["B"].pos_emb
    untied = build_model(toy_backbone, toy_data.id_ranges,
                         PromptConfig(m1=2, m2=2, blocks=1, tie_encoder_init=False), seed=4)
    assert not torch.equal(untied.encoders["A"].pos_emb, untied.encoders["B"].pos_emb)
