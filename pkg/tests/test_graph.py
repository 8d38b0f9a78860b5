import numpy as np
import pytest
import torch

from conftest import check_gradients

from testam.graph import (
    GraphConvolution,
    MemoryQuery,
    MetaNodeBank,
    NodeEmbeddings,
    adaptive_adjacency,
)


class TestNodeEmbeddings:
    def test_near_identity_mixing_recovers_projected_bank(self):
        torch.manual_seed(0)
        bank = MetaNodeBank(m=4, e=3)
        emb = NodeEmbeddings(bank, n_nodes=4, d_node=5)
        with torch.no_grad():
            emb.mix_logits.copy_(torch.eye(4) * 50.0)  # softmax -> ~identity
        expected = bank.memory @ emb.proj
        assert torch.allclose(emb(), expected, atol=1e-5)

    def test_zero_bank_gives_zero_embeddings(self):
        bank = MetaNodeBank(m=3, e=4)
        with torch.no_grad():
            bank.memory.zero_()
        emb = NodeEmbeddings(bank, n_nodes=5, d_node=4)
        assert torch.allclose(emb(), torch.zeros(5, 4))

    def test_perturbing_one_item_moves_every_node(self):
        torch.manual_seed(1)
        bank = MetaNodeBank(m=3, e=4)
        emb = NodeEmbeddings(bank, n_nodes=6, d_node=4)
        before = emb().detach().clone()
        with torch.no_grad():
            bank.memory[1] += 1.0
        after = emb().detach()
        # softmax mixing weights are strictly positive: every node shifts
        assert ((after - before).norm(dim=1) > 0).all()


class TestAdaptiveAdjacency:
    def test_identity_embeddings_frozen_values(self):
        adj = adaptive_adjacency(torch.eye(2))
        frozen = torch.tensor(
            [[0.7310585786, 0.2689414214], [0.2689414214, 0.7310585786]]
        )
        assert torch.allclose(adj, frozen, atol=1e-6)

    def test_zero_embeddings_uniform(self):
        adj = adaptive_adjacency(torch.zeros(5, 3))
        assert torch.allclose(adj, torch.full((5, 5), 0.2), atol=1e-7)

    def test_rows_sum_to_one_and_positive(self):
        torch.manual_seed(2)
        adj = adaptive_adjacency(torch.randn(7, 4))
        sums = adj.sum(dim=-1)
        assert torch.allclose(sums, torch.ones(7), atol=1e-6)
        assert (adj > 0).all()

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        node_emb = torch.randn(3, 3, dtype=torch.float64, requires_grad=True)
        target = torch.rand(3, 3, dtype=torch.float64)

        def loss():
            return ((adaptive_adjacency(node_emb) - target) ** 2).sum()

        check_gradients(loss, [node_emb], rtol=1e-3, eps=1e-6)


class TestGraphConvolution:
    def test_identity_adjacency_identity_weight(self):
        conv = GraphConvolution(4)
        with torch.no_grad():
            conv.weight.copy_(torch.eye(4))
        h = torch.randn(2, 3, 5, 4)
        assert torch.allclose(conv(h, torch.eye(5)), h, atol=1e-6)

    def test_uniform_adjacency_averages_nodes(self):
        conv = GraphConvolution(4)
        with torch.no_grad():
            conv.weight.copy_(torch.eye(4))
        h = torch.randn(1, 2, 5, 4)
        out = conv(h, torch.full((5, 5), 0.2))
        mean = h.mean(dim=2, keepdim=True).expand_as(h)
        assert torch.allclose(out, mean, atol=1e-6)

    def test_three_node_chain_matches_dense_oracle(self):
        torch.manual_seed(4)
        conv = GraphConvolution(3).double()
        adj = torch.tensor(
            [[0.5, 0.5, 0.0], [0.25, 0.5, 0.25], [0.0, 0.5, 0.5]],
            dtype=torch.float64,
        )
        h = torch.randn(1, 2, 3, 3, dtype=torch.float64)
        out = conv(h, adj).detach().numpy()
        w = conv.weight.detach().numpy()
        for t in range(2):
            expected = adj.numpy() @ h[0, t].numpy() @ w
            np.testing.assert_allclose(out[0, t], expected, atol=1e-6)

    def test_missing_adjacency_rejected(self):
        with pytest.raises(ValueError):
            GraphConvolution(3)(torch.randn(1, 1, 2, 3), None)


class TestMemoryQuery:
    def test_single_item_returns_it_regardless_of_query(self):
        torch.manual_seed(5)
        bank = MetaNodeBank(m=1, e=4)
        query = MemoryQuery(bank, in_channels=2)
        read, weights = query(torch.randn(3, 2), return_weights=True)
        assert torch.allclose(weights, torch.ones(3, 1))
        for row in read:
            assert torch.allclose(row, bank.memory[0], atol=1e-6)

    def test_weights_sum_to_one(self):
        torch.manual_seed(6)
        bank = MetaNodeBank(m=5, e=4)
        query = MemoryQuery(bank, in_channels=3)
        _, weights = query(torch.randn(2, 7, 3), return_weights=True)
        sums = weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_orthogonal_query_reads_the_mean(self):
        bank = MetaNodeBank(m=3, e=4)
        with torch.no_grad():
            bank.memory.copy_(
                torch.tensor(
                    [
                        [1.0, 0.0, 0.0, 0.0],
                        [0.0, 1.0, 0.0, 0.0],
                        [0.0, 0.0, 1.0, 0.0],
                    ]
                )
            )
        query = MemoryQuery(bank, in_channels=2)
        with torch.no_grad():
            query.input_proj.weight.zero_()
            # bias picks the direction orthogonal to every memory row
            query.input_proj.bias.copy_(torch.tensor([0.0, 0.0, 0.0, 5.0]))
        read, weights = query(torch.randn(4, 2), return_weights=True)
        assert torch.allclose(weights, torch.full((4, 3), 1 / 3), atol=1e-6)
        for row in read:
            assert torch.allclose(row, bank.memory.mean(dim=0), atol=1e-6)

    def test_argmax_invariant_to_constant_logit_shift(self):
        torch.manual_seed(7)
        bank = MetaNodeBank(m=4, e=3)
        query = MemoryQuery(bank, in_channels=2)
        x = torch.randn(6, 2)
        _, w1 = query(x, return_weights=True)
        with torch.no_grad():
            # shifting every logit by the same constant leaves argmax alone
            logits = query.input_proj(x) @ bank.memory.t()
            w2 = torch.softmax(logits + 7.0, dim=-1)
        assert torch.equal(w1.argmax(dim=-1), w2.argmax(dim=-1))

    def test_bank_requires_items(self):
        with pytest.raises(ValueError):
            MetaNodeBank(m=0, e=4)
