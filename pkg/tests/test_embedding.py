import math

import numpy as np
import pytest
import torch

from conftest import check_gradients

from testam.embedding import InputEmbedding, Time2Vec, TimeTable, time2vec_scaled


class TestTime2Vec:
    def test_linear_component(self):
        # w0=2, phi0=0.5, v=1 -> component 0 is 2.5
        w = torch.tensor([2.0, 1.0])
        phi = torch.tensor([0.5, 0.0])
        out = time2vec_scaled(torch.tensor(1.0), w, phi)
        assert out[0].item() == pytest.approx(2.5)

    def test_periodic_zero_at_pi(self):
        # w_i=1, phi_i=0, v=pi -> sin(pi)=0 on every periodic component
        w = torch.ones(4)
        phi = torch.zeros(4)
        out = time2vec_scaled(torch.tensor(math.pi), w, phi)
        assert torch.allclose(out[1:], torch.zeros(3), atol=1e-6)

    def test_periodicity(self):
        w = torch.tensor([0.3, 1.7, -2.2, 4.0], dtype=torch.float64)
        phi = torch.tensor([0.1, 0.4, -0.9, 2.0], dtype=torch.float64)
        v = torch.tensor(0.37, dtype=torch.float64)
        base = time2vec_scaled(v, w, phi)
        for i in range(1, 4):
            shifted = time2vec_scaled(v + 2 * math.pi / w[i], w, phi)
            assert abs(shifted[i] - base[i]) < 1e-6

    def test_module_scales_by_steps_per_day(self):
        enc = Time2Vec(width=3, steps_per_day=288)
        with torch.no_grad():
            enc.w.copy_(torch.tensor([1.0, 0.0, 0.0]))
            enc.phi.zero_()
        out = enc(torch.tensor([144]))
        assert out[0, 0].item() == pytest.approx(0.5)

    def test_width_must_allow_a_periodic_component(self):
        with pytest.raises(ValueError):
            Time2Vec(width=1, steps_per_day=288)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        enc = Time2Vec(width=4, steps_per_day=24).double()
        tau = torch.tensor([3, 7, 21])
        target = torch.randn(3, 4, dtype=torch.float64)

        def loss():
            return ((enc(tau) - target) ** 2).sum()

        check_gradients(loss, [enc.w, enc.phi], rtol=1e-4, eps=1e-5)


class TestInputEmbedding:
    def _embed(self, width=2, d=3, c=2, steps_per_day=24, table=False):
        torch.manual_seed(1)
        enc_cls = TimeTable if table else Time2Vec
        return InputEmbedding(c, enc_cls(width, steps_per_day), d)

    def test_output_shape(self):
        emb = self._embed()
        out = emb(torch.randn(1, 1, 1, 2), torch.tensor([[5]]))
        assert out.shape == (1, 1, 1, 3)

    def test_zero_parameters_give_zero_output(self):
        emb = self._embed()
        with torch.no_grad():
            for p in emb.parameters():
                p.zero_()
        out = emb(torch.randn(2, 3, 4, 2), torch.zeros(2, 3, dtype=torch.long))
        assert torch.allclose(out, torch.zeros_like(out))

    def test_time_code_shared_across_nodes(self):
        emb = self._embed()
        x = torch.zeros(1, 2, 5, 2)  # identical (zero) features on every node
        out = emb(x, torch.tensor([[3, 9]]))
        for n in range(1, 5):
            assert torch.allclose(out[0, :, n], out[0, :, 0])

    def test_no_positional_encoding_permutation_equivariance(self):
        torch.manual_seed(2)
        emb = self._embed(width=4, d=5, steps_per_day=48)
        x = torch.randn(1, 6, 3, 2)
        tau = torch.randint(0, 48, (1, 6))
        perm = torch.randperm(6)
        out = emb(x, tau)
        out_perm = emb(x[:, perm], tau[:, perm])
        assert torch.allclose(out[:, perm], out_perm, atol=1e-6)

    def test_shape_mismatch_raises(self):
        emb = self._embed()
        with pytest.raises(ValueError):
            emb(torch.randn(1, 4, 2, 2), torch.zeros(1, 3, dtype=torch.long))

    def test_table_variant_shape(self):
        emb = self._embed(table=True)
        out = emb(torch.randn(2, 4, 3, 2), torch.randint(0, 24, (2, 4)))
        assert out.shape == (2, 4, 3, 3)
