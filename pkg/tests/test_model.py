import math

import pytest
import torch

from testam.embedding import Time2Vec, TimeTable
from testam.attention import TemporalTransfer, TimeEnhancedAttention
from testam.graph import MetaNodeBank
from testam.losses import LossWeights, total_loss
from testam.model import (
    AblationConfig,
    EXPERT_KINDS,
    ExpertStack,
    ModelConfig,
    TESTAM,
    count_parameters,
)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        n_nodes=4,
        steps_per_day=24,
        t_in=3,
        t_out=3,
        d=8,
        e=8,
        m=4,
        n_layers=2,
        n_heads=2,
        h_ff=16,
        h_time=4,
        dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_batch(cfg, batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, cfg.t_in, cfg.n_nodes, cfg.in_channels, generator=g)
    y = torch.rand(batch, cfg.t_out, cfg.n_nodes, 1, generator=g) * 60 + 5
    tau_in = torch.randint(0, cfg.steps_per_day, (batch, cfg.t_in), generator=g)
    tau_out = torch.randint(0, cfg.steps_per_day, (batch, cfg.t_out), generator=g)
    return x, y, tau_in, tau_out


class TestExpertStack:
    def test_identity_expert_ignores_other_nodes(self):
        cfg = tiny_config()
        torch.manual_seed(0)
        stack = ExpertStack("identity", cfg, MetaNodeBank(cfg.m, cfg.e)).eval()
        x, _, tau_in, tau_out = tiny_batch(cfg)
        y1, _ = stack(x, tau_in, tau_out)
        permuted = x.clone()
        permuted[:, :, 1:] = x[:, :, torch.tensor([3, 1, 2])]
        y2, _ = stack(permuted, tau_in, tau_out)
        assert torch.allclose(y1[:, :, 0], y2[:, :, 0], atol=1e-6)
        # stronger: arbitrary replacement of other nodes cannot reach node 0
        replaced = x.clone()
        replaced[:, :, 1:] = torch.randn_like(replaced[:, :, 1:])
        y3, _ = stack(replaced, tau_in, tau_out)
        assert torch.allclose(y1[:, :, 0], y3[:, :, 0], atol=1e-6)

    def test_attention_expert_mixes_nodes(self):
        cfg = tiny_config()
        torch.manual_seed(0)
        stack = ExpertStack("attention", cfg, MetaNodeBank(cfg.m, cfg.e)).eval()
        x, _, tau_in, tau_out = tiny_batch(cfg)
        y1, _ = stack(x, tau_in, tau_out)
        replaced = x.clone()
        replaced[:, :, 1:] = torch.randn_like(replaced[:, :, 1:]) * 3
        y2, _ = stack(replaced, tau_in, tau_out)
        assert not torch.allclose(y1[:, :, 0], y2[:, :, 0], atol=1e-6)

    @pytest.mark.parametrize("kind", EXPERT_KINDS)
    def test_output_shapes(self, kind):
        cfg = tiny_config(t_out=5)
        stack = ExpertStack(kind, cfg, MetaNodeBank(cfg.m, cfg.e)).eval()
        x = torch.randn(2, cfg.t_in, cfg.n_nodes, cfg.in_channels)
        tau_in = torch.zeros(2, cfg.t_in, dtype=torch.long)
        tau_out = torch.zeros(2, 5, dtype=torch.long)
        y, z = stack(x, tau_in, tau_out)
        assert y.shape == (2, 5, cfg.n_nodes, 1)
        assert z.shape == (2, 5, cfg.n_nodes, cfg.d)

    def test_adaptive_and_attention_differ_under_shared_seed(self):
        cfg = tiny_config()
        bank = MetaNodeBank(cfg.m, cfg.e)
        torch.manual_seed(7)
        adaptive = ExpertStack("adaptive", cfg, bank).eval()
        torch.manual_seed(7)
        attention = ExpertStack("attention", cfg, bank).eval()
        x, _, tau_in, tau_out = tiny_batch(cfg)
        ya, _ = adaptive(x, tau_in, tau_out)
        yb, _ = attention(x, tau_in, tau_out)
        assert not torch.allclose(ya, yb, atol=1e-6)

    def test_spatial_parameter_count_ordering(self):
        def spatial_params(stack):
            total = sum(
                p.numel() for layer in stack.layers
                for p in layer.spatial.parameters()
            )
            if stack.node_embeddings is not None:
                total += sum(
                    p.numel()
                    for name, p in stack.node_embeddings.named_parameters()
                    if not name.startswith("bank.")
                )
            return total

        for cfg in (tiny_config(), ModelConfig(n_nodes=207, steps_per_day=288)):
            bank = MetaNodeBank(cfg.m, cfg.e)
            counts = {
                kind: spatial_params(ExpertStack(kind, cfg, bank))
                for kind in EXPERT_KINDS
            }
            assert counts["identity"] < counts["adaptive"] < counts["attention"]


class TestRouting:
    def test_identical_hidden_states_give_uniform_probabilities(self):
        cfg = tiny_config()
        model = TESTAM(cfg).eval()
        z = torch.randn(1, 2, cfg.t_out, cfg.n_nodes, cfg.d).repeat(3, 1, 1, 1, 1)
        read = torch.randn(2, cfg.n_nodes, cfg.e)
        p = model.routing_probabilities(z, read)
        assert torch.allclose(p, torch.full_like(p, 1 / 3), atol=1e-6)

    def test_probabilities_sum_to_one(self):
        cfg = tiny_config()
        model = TESTAM(cfg).eval()
        x, _, tau_in, tau_out = tiny_batch(cfg)
        p = model(x, tau_in, tau_out).p
        sums = p.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_aligned_hidden_state_saturates(self):
        cfg = tiny_config(d=4, e=4, n_heads=2)
        model = TESTAM(cfg).eval()
        read = torch.zeros(1, cfg.n_nodes, 4)
        read[..., 0] = 1.0
        z = torch.zeros(3, 1, cfg.t_out, cfg.n_nodes, 4)
        z[0] = read.unsqueeze(1) * 20.0  # aligned with the memory read
        z[1, ..., 1] = 20.0  # orthogonal
        z[2, ..., 2] = 20.0  # orthogonal
        p = model.routing_probabilities(z, read)
        assert (p[..., 0] > 0.999).all()


class TestModelForward:
    def test_composite_is_exact_gather_of_selected(self):
        cfg = tiny_config()
        torch.manual_seed(1)
        model = TESTAM(cfg).eval()
        x, _, tau_in, tau_out = tiny_batch(cfg)
        bundle = model(x, tau_in, tau_out)
        assert torch.equal(bundle.selected, bundle.p.argmax(dim=-1))
        b, t, n = bundle.selected.shape
        for bi in range(b):
            for ti in range(t):
                for ni in range(n):
                    e = bundle.selected[bi, ti, ni]
                    assert (
                        bundle.y_hat[bi, ti, ni]
                        == bundle.y_hat_per_expert[e, bi, ti, ni]
                    )

    def test_no_gating_uses_attention_expert_only(self):
        cfg = tiny_config(ablation=AblationConfig(no_gating=True))
        torch.manual_seed(2)
        model = TESTAM(cfg).eval()
        assert model.expert_kinds == ("attention",)
        assert model.gating is None
        x, _, tau_in, tau_out = tiny_batch(cfg)
        bundle = model(x, tau_in, tau_out)
        assert bundle.p is None
        assert torch.equal(bundle.y_hat, bundle.y_hat_per_expert[0])

    def test_ensemble_composite_is_probability_weighted_sum(self):
        cfg = tiny_config(ablation=AblationConfig(ensemble=True))
        torch.manual_seed(3)
        model = TESTAM(cfg).eval()
        x, _, tau_in, tau_out = tiny_batch(cfg)
        bundle = model(x, tau_in, tau_out)
        manual = torch.einsum(
            "btne,ebtnc->btnc", bundle.p, bundle.y_hat_per_expert
        )
        assert torch.allclose(bundle.y_hat, manual, atol=1e-6)

    def test_degenerate_onehot_mixture_selects_single_expert(self):
        y_all = torch.randn(3, 1, 2, 2, 1)
        p = torch.zeros(1, 2, 2, 3)
        p[..., 0] = 1.0
        mixed = torch.einsum("btne,ebtnc->btnc", p, y_all)
        assert torch.allclose(mixed, y_all[0], atol=1e-7)

    def test_replaced_identity_keeps_three_experts(self):
        cfg = tiny_config(ablation=AblationConfig(replaced_identity=True))
        model = TESTAM(cfg)
        assert model.expert_kinds == ("adaptive", "adaptive", "attention")
        assert model.num_experts == 3

    def test_no_tim_swaps_in_table_encoder(self):
        cfg = tiny_config(ablation=AblationConfig(no_tim=True))
        model = TESTAM(cfg)
        assert isinstance(model.experts[0].time_encoder, TimeTable)
        plain = TESTAM(tiny_config())
        assert isinstance(plain.experts[0].time_encoder, Time2Vec)

    def test_no_time_enhanced_swaps_transfer(self):
        cfg = tiny_config(ablation=AblationConfig(no_time_enhanced=True))
        model = TESTAM(cfg)
        layer = model.experts[0].layers[0]
        assert isinstance(layer.transfer, TemporalTransfer)
        plain = TESTAM(tiny_config())
        assert isinstance(plain.experts[0].layers[0].transfer, TimeEnhancedAttention)

    def test_no_time_enhanced_requires_equal_horizons(self):
        with pytest.raises(ValueError, match="no_time_enhanced"):
            TESTAM(tiny_config(t_in=4, t_out=3,
                               ablation=AblationConfig(no_time_enhanced=True)))

    def test_invalid_ablation_combination(self):
        with pytest.raises(ValueError, match="invalid ablation"):
            TESTAM(tiny_config(ablation=AblationConfig(no_gating=True, ensemble=True)))

    def test_mismatched_widths_rejected(self):
        with pytest.raises(ValueError, match="d=8 != e=4"):
            TESTAM(tiny_config(e=4))

    def test_scaler_denormalizes_head_output(self):
        cfg = tiny_config()
        torch.manual_seed(4)
        model = TESTAM(cfg).eval()
        x, _, tau_in, tau_out = tiny_batch(cfg)
        base = model(x, tau_in, tau_out).y_hat_per_expert.detach()
        from testam.data import Scaler

        model.set_scaler(Scaler(mean=50.0, std=10.0))
        scaled = model(x, tau_in, tau_out).y_hat_per_expert.detach()
        assert torch.allclose(scaled, base * 10.0 + 50.0, atol=1e-5)


class TestGradientFlow:
    def test_regression_loss_reaches_no_gating_parameters(self):
        cfg = tiny_config()
        torch.manual_seed(5)
        model = TESTAM(cfg)
        model.train()
        x, y, tau_in, tau_out = tiny_batch(cfg)
        bundle = model(x, tau_in, tau_out)
        loss, _ = total_loss(
            bundle, y, weights=LossWeights(reg=1.0, worst=0.0, best=0.0)
        )
        gate = model.gating.input_proj
        grads = torch.autograd.grad(
            loss, [gate.weight, gate.bias], allow_unused=True
        )
        assert grads[0] is None or torch.allclose(grads[0], torch.zeros_like(grads[0]))
        assert grads[1] is None or torch.allclose(grads[1], torch.zeros_like(grads[1]))

    def test_routing_losses_reach_gating_parameters(self):
        cfg = tiny_config()
        torch.manual_seed(6)
        model = TESTAM(cfg)
        x, y, tau_in, tau_out = tiny_batch(cfg)
        bundle = model(x, tau_in, tau_out)
        loss, _ = total_loss(bundle, y)
        loss.backward()
        assert model.gating.input_proj.weight.grad.abs().sum() > 0
        assert model.bank.memory.grad.abs().sum() > 0

    def test_bank_gets_no_gradient_without_gating_and_adaptive(self):
        cfg = tiny_config(ablation=AblationConfig(no_gating=True))
        torch.manual_seed(7)
        model = TESTAM(cfg)
        x, y, tau_in, tau_out = tiny_batch(cfg)
        bundle = model(x, tau_in, tau_out)
        loss, _ = total_loss(bundle, y)
        loss.backward()
        assert model.bank.memory.grad is None


class TestParameterCount:
    def test_reference_configuration_under_budget(self):
        model = TESTAM(ModelConfig(n_nodes=207, steps_per_day=288))
        total = count_parameters(model)
        assert total < 300_000
        # three experts plus shared memory at d=e=32, m=20, l=3, K=4
        assert total > 100_000
