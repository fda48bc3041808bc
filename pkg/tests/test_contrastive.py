import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from slimcontrast.contrastive import (
    ContrastiveModel,
    MomentumEncoder,
    NegativeQueue,
    info_nce,
    info_nce_in_batch,
    momentum_update,
    multi_width_forward,
)
from slimcontrast.errors import UnknownWidthError
from slimcontrast.slimnet import WidthConfig, mlp_specs

W3 = WidthConfig((1.0, 0.5, 0.25))


def unit(v):
    return v / v.norm()


def make_model(mode="mocov2", widths=W3, dim=8, feat=6, seed=0):
    torch.manual_seed(seed)
    return ContrastiveModel(mlp_specs(dim, [10, 10]), widths, feature_dim=feat, mode=mode)


class TestInfoNCE:
    def test_scalar_example(self):
        # s+ = 1, one negative with s- = 0, tau = 1 -> ln(1 + e^-1)
        q = torch.tensor([1.0, 0.0], dtype=torch.float64)
        pos = torch.tensor([1.0, 0.0], dtype=torch.float64)
        neg = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        expected = math.log(1.0 + math.exp(-1.0))
        assert info_nce(q, pos, neg, 1.0).item() == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("k", [1, 4, 63])
    def test_uniform_similarities(self, k):
        q = torch.tensor([1.0, 0.0], dtype=torch.float64)
        negs = q.repeat(k, 1)
        loss = info_nce(q, q.clone(), negs, 0.37)
        assert loss.item() == pytest.approx(math.log(k + 1), rel=1e-12)

    def test_rejects_nonunit(self):
        q = torch.tensor([2.0, 0.0])
        with pytest.raises(ValueError):
            info_nce(q, unit(torch.randn(2)), unit(torch.randn(2)).unsqueeze(0), 1.0)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_rejects_bad_temperature(self, tau):
        q = torch.tensor([1.0, 0.0])
        with pytest.raises(ValueError):
            info_nce(q, q.clone(), q.unsqueeze(0), tau)

    def test_rejects_empty_negatives(self):
        q = torch.tensor([1.0, 0.0])
        with pytest.raises(ValueError):
            info_nce(q, q.clone(), torch.zeros(0, 2), 1.0)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        d = 12
        q0 = unit(torch.randn(d, dtype=torch.float64))
        pos = unit(torch.randn(d, dtype=torch.float64))
        negs = F.normalize(torch.randn(7, d, dtype=torch.float64), dim=1)
        q = q0.clone().requires_grad_(True)
        info_nce(q, pos, negs, 0.2).backward()
        h = 1e-6
        for i in range(d):
            e = torch.zeros(d, dtype=torch.float64)
            e[i] = h
            f_plus = info_nce(q0 + e, pos, negs, 0.2).item()
            f_minus = info_nce(q0 - e, pos, negs, 0.2).item()
            fd = (f_plus - f_minus) / (2 * h)
            assert abs(q.grad[i].item() - fd) <= 1e-4 * max(abs(fd), 1e-8)

    def test_positive_and_negatives_receive_no_gradient(self):
        q = unit(torch.randn(5, dtype=torch.float64)).requires_grad_(True)
        pos = unit(torch.randn(5, dtype=torch.float64)).requires_grad_(True)
        negs = F.normalize(torch.randn(3, 5, dtype=torch.float64), dim=1).requires_grad_(True)
        info_nce(q, pos, negs, 1.0).backward()
        assert q.grad is not None
        assert pos.grad is None
        assert negs.grad is None


class TestInBatchNegatives:
    def test_batch_of_two_has_single_negative(self):
        torch.manual_seed(4)
        q = F.normalize(torch.randn(2, 6, dtype=torch.float64), dim=1)
        t = F.normalize(torch.randn(2, 6, dtype=torch.float64), dim=1)
        loss = info_nce_in_batch(q, t, 0.5)
        per_row = [info_nce(q[0], t[0], t[1].unsqueeze(0), 0.5),
                   info_nce(q[1], t[1], t[0].unsqueeze(0), 0.5)]
        expected = (per_row[0] + per_row[1]) / 2
        assert loss.item() == pytest.approx(expected.item(), rel=1e-12)

    def test_rejects_batch_of_one(self):
        v = F.normalize(torch.randn(1, 4), dim=1)
        with pytest.raises(ValueError):
            info_nce_in_batch(v, v.clone(), 1.0)


class TestMomentumUpdate:
    def test_zero_momentum_copies(self):
        theta = [torch.randn(3, 3, dtype=torch.float64)]
        xi = [torch.randn(3, 3, dtype=torch.float64)]
        momentum_update(xi, theta, 0.0)
        assert torch.equal(xi[0], theta[0])

    def test_single_step_from_zero(self):
        xi = [torch.zeros(1, dtype=torch.float64)]
        theta = [torch.ones(1, dtype=torch.float64)]
        momentum_update(xi, theta, 0.999)
        assert xi[0].item() == pytest.approx(0.001, abs=1e-15)

    def test_closed_form_geometric_recursion(self):
        # constant theta over k steps: xi_k = theta + m^k (xi_0 - theta)
        torch.manual_seed(5)
        m, k = 0.9, 10
        theta = [torch.randn(4, 4, dtype=torch.float64)]
        xi0 = torch.randn(4, 4, dtype=torch.float64)
        xi = [xi0.clone()]
        for _ in range(k):
            momentum_update(xi, theta, m)
        expected = theta[0] + m ** k * (xi0 - theta[0])
        assert (xi[0] - expected).abs().max().item() <= 1e-10

    @pytest.mark.parametrize("m", [-0.1, 1.0, 1.5])
    def test_rejects_bad_coefficient(self, m):
        with pytest.raises(ValueError):
            momentum_update([torch.zeros(1)], [torch.zeros(1)], m)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            momentum_update([torch.zeros(2)], [torch.zeros(3)], 0.5)


class TestQueue:
    def test_fifo_replacement(self):
        rng = np.random.default_rng(0)
        q = NegativeQueue(4, 3, rng)
        a, b, c, d, e, f = [unit(torch.randn(3, dtype=torch.float32)) for _ in range(6)]
        q.enqueue(torch.stack([a, b, c, d]))
        q.enqueue(torch.stack([e, f]))
        expected = torch.stack([c, d, e, f])
        assert torch.equal(q.snapshot(), expected)

    def test_full_turnover(self):
        rng = np.random.default_rng(1)
        q = NegativeQueue(5, 4, rng)
        keys = F.normalize(torch.randn(5, 4), dim=1)
        q.enqueue(keys)
        assert torch.equal(q.snapshot(), keys)

    def test_capacity_constant(self):
        rng = np.random.default_rng(2)
        q = NegativeQueue(8, 4, rng)
        for _ in range(5):
            q.enqueue(F.normalize(torch.randn(3, 4), dim=1))
            assert q.buffer.shape == (8, 4)

    def test_rejects_oversized_batch(self):
        q = NegativeQueue(4, 3, np.random.default_rng(3))
        with pytest.raises(ValueError):
            q.enqueue(F.normalize(torch.randn(5, 3), dim=1))

    def test_warm_fill_rows_unit_norm(self):
        q = NegativeQueue(16, 6, np.random.default_rng(4))
        assert (q.buffer.norm(dim=1) - 1).abs().max().item() < 1e-6

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.integers(min_value=1, max_value=6), min_size=1, max_size=8))
    def test_rows_stay_unit_norm(self, batch_sizes):
        q = NegativeQueue(6, 5, np.random.default_rng(7))
        g = torch.Generator().manual_seed(11)
        for b in batch_sizes:
            q.enqueue(F.normalize(torch.randn(b, 5, generator=g), dim=1))
            assert (q.buffer.norm(dim=1) - 1).abs().max().item() < 1e-5


class TestMultiWidthForward:
    def test_slow_start_single_width(self):
        model = make_model()
        momentum = MomentumEncoder(model)
        x1, x2 = torch.randn(4, 8), torch.randn(4, 8)
        batch = multi_width_forward(model, momentum, x1, x2, [1.0])
        assert set(batch.predictions) == {1.0}
        assert batch.target.shape == (4, model.feature_dim)

    def test_three_widths_one_target_all_unit(self):
        model = make_model()
        momentum = MomentumEncoder(model)
        batch = multi_width_forward(model, momentum, torch.randn(4, 8), torch.randn(4, 8),
                                    [1.0, 0.5, 0.25])
        assert set(batch.predictions) == {1.0, 0.5, 0.25}
        batch.validate(active_widths=[1.0, 0.5, 0.25])

    def test_sync_model_and_identical_views_match(self):
        model = make_model().eval()
        momentum = MomentumEncoder(model)
        momentum.sync(model)
        x = torch.randn(4, 8)
        batch = multi_width_forward(model, momentum, x, x.clone(), [1.0])
        rel = (batch.predictions[1.0] - batch.target).norm() / batch.target.norm()
        assert rel.item() <= 1e-6

    def test_missing_full_width_rejected(self):
        model = make_model()
        with pytest.raises(ValueError):
            multi_width_forward(model, MomentumEncoder(model), torch.randn(2, 8),
                                torch.randn(2, 8), [0.5])

    def test_unregistered_width_rejected(self):
        model = make_model()
        with pytest.raises(UnknownWidthError):
            multi_width_forward(model, MomentumEncoder(model), torch.randn(2, 8),
                                torch.randn(2, 8), [1.0, 0.75])

    def test_momentum_branch_blocks_gradients(self):
        model = make_model()
        momentum = MomentumEncoder(model)
        batch = multi_width_forward(model, momentum, torch.randn(4, 8), torch.randn(4, 8), [1.0])
        assert batch.target.requires_grad is False
        negs = NegativeQueue(16, model.feature_dim, np.random.default_rng(0)).negatives()
        loss = info_nce(batch.predictions[1.0], batch.target, negs, 0.2)
        loss.backward()
        assert all(p.grad is None for p in momentum.model.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.parameters())

    def test_perturbing_momentum_changes_loss_value(self):
        model = make_model().eval()
        momentum = MomentumEncoder(model)
        x1, x2 = torch.randn(4, 8), torch.randn(4, 8)
        negs = NegativeQueue(16, model.feature_dim, np.random.default_rng(0)).negatives()

        def loss_value():
            batch = multi_width_forward(model, momentum, x1, x2, [1.0])
            return info_nce(batch.predictions[1.0], batch.target, negs, 0.2).item()

        before = loss_value()
        with torch.no_grad():
            for p in momentum.model.parameters():
                p.add_(0.1 * torch.randn_like(p))
        assert loss_value() != before

    def test_in_batch_mode_has_predictor(self):
        model = make_model(mode="mocov3")
        assert model.predictor is not None
        momentum = MomentumEncoder(model)
        batch = multi_width_forward(model, momentum, torch.randn(4, 8), torch.randn(4, 8),
                                    [1.0, 0.5])
        loss = info_nce_in_batch(batch.predictions[0.5], batch.target, 1.0)
        assert torch.isfinite(loss)
