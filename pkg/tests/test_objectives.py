import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sfda import objectives as obj
from sfda.errors import NumericError, ValidationError

from conftest import grad_rel_error, random_stochastic


def T(x):
    return torch.tensor(x, dtype=torch.float64)


def scalar_soft_ce(logits, target):
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    return -sum(t * (l - lse) for t, l in zip(target, logits))


def scalar_consistency(weak, strong, global_mean):
    B, K = len(weak), len(weak[0])
    batch_mean = [sum(r[k] for r in weak) / B for k in range(K)]
    ratio = [global_mean[k] / batch_mean[k] for k in range(K)]
    total = 0.0
    for w, s in zip(weak, strong):
        scaled = [w[k] * ratio[k] for k in range(K)]
        z = sum(math.exp(v) for v in scaled)
        target = [math.exp(v) / z for v in scaled]
        total -= sum(target[k] * math.log(s[k]) for k in range(K))
    return total / B


class TestFrobenius:
    def test_one_hot_rows(self):
        assert float(obj.frobenius_norm(torch.eye(4))) == pytest.approx(2.0)

    def test_uniform_rows(self):
        assert float(obj.frobenius_norm(torch.full((4, 4), 0.25))) == pytest.approx(1.0)

    def test_hand_case(self):
        A = [[0.5, 0.5], [0.8, 0.2]]
        expected = math.sqrt(sum(v * v for row in A for v in row))
        assert expected == pytest.approx(1.0862780491200217, abs=1e-15)
        assert float(obj.frobenius_norm(T(A))) == pytest.approx(expected, abs=1e-12)

    def test_bounds_on_random_matrices(self, rng):
        for _ in range(200):
            B, K = rng.integers(2, 65), rng.integers(2, 33)
            A = random_stochastic(rng, B, K)
            fro = float(obj.frobenius_norm(T(A)))
            assert math.sqrt(B / K) - 1e-12 <= fro <= math.sqrt(B) + 1e-12


class TestNMLoss:
    def test_values(self):
        assert float(obj.nm_loss(torch.eye(4))) == pytest.approx(-2.0)
        assert float(obj.nm_loss(torch.full((4, 4), 0.25))) == pytest.approx(-1.0)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValidationError):
            obj.nm_loss(torch.zeros(0, 4))

    def test_gradient_matches_finite_differences(self, rng):
        f = lambda z: obj.nm_loss(torch.softmax(z, dim=1))
        for _ in range(5):
            assert grad_rel_error(f, T(rng.normal(size=(4, 5)))) <= 1e-3

    def test_gradient_at_uniform_is_zero_by_symmetry(self):
        z = torch.zeros(4, 4, dtype=torch.float64, requires_grad=True)
        obj.nm_loss(torch.softmax(z, 1)).backward()
        assert torch.allclose(z.grad, torch.zeros_like(z), atol=1e-12)

    def test_gradient_pushes_toward_argmax(self):
        z = T([[0.1, 0.0, 0.0], [0.0, 0.0, 0.2]]).requires_grad_(True)
        obj.nm_loss(torch.softmax(z, 1)).backward()
        # descending the loss raises the leading logit of each row
        assert (-z.grad[0, 0]) > 0 and (-z.grad[1, 2]) > 0

    def test_descent_reaches_one_hot_optimum(self, rng):
        B, K = 6, 3
        z = torch.tensor(rng.normal(scale=0.1, size=(B, K)), requires_grad=True)
        opt = torch.optim.SGD([z], lr=50.0)
        for _ in range(3000):
            opt.zero_grad()
            loss = obj.nm_loss(torch.softmax(z, 1))
            loss.backward()
            opt.step()
        assert loss.item() <= -math.sqrt(B) + 1e-3


class TestNuclearNormCheck:
    def test_identity(self):
        fro, nuc, rank = obj.nuclear_norm_check(np.eye(3))
        assert (fro, nuc, rank) == (pytest.approx(math.sqrt(3)), pytest.approx(3.0), 3)

    def test_rank_one(self, rng):
        A = np.outer(rng.uniform(size=6), rng.uniform(size=4))
        fro, nuc, rank = obj.nuclear_norm_check(A)
        assert rank == 1 and fro == pytest.approx(nuc, rel=1e-12)

    def test_matches_eigen_route(self, rng):
        A = random_stochastic(rng, 6, 4)
        _, nuc, _ = obj.nuclear_norm_check(A)
        eig = np.clip(np.linalg.eigvalsh(A.T @ A), 0, None)
        assert nuc == pytest.approx(np.sqrt(eig).sum(), rel=1e-9)

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            obj.nuclear_norm_check(np.array([[np.nan, 1.0]]))


class TestPseudoCE:
    def test_perfect_prediction(self):
        assert float(obj.pseudo_ce_loss(T([[1000.0, 0, 0, 0]]), torch.tensor([0]))) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_logits(self):
        loss = obj.pseudo_ce_loss(torch.zeros(3, 4), torch.tensor([0, 2, 3]))
        assert float(loss) == pytest.approx(math.log(4))

    def test_soft_label_against_scalar_oracle(self):
        expected = scalar_soft_ce([1.0, 0.0], [0.7, 0.3])
        assert expected == pytest.approx(0.6132616875182227, abs=1e-15)
        assert float(obj.pseudo_ce_loss(T([[1.0, 0.0]]), T([[0.7, 0.3]]))) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("label", [-1, 4])
    def test_out_of_range(self, label):
        with pytest.raises(ValidationError):
            obj.pseudo_ce_loss(torch.zeros(1, 4), torch.tensor([label]))

    def test_gradient(self, rng):
        soft = T(random_stochastic(rng, 4, 5))
        hard = torch.tensor(rng.integers(0, 5, size=4))
        assert grad_rel_error(lambda z: obj.pseudo_ce_loss(z, soft), T(rng.normal(size=(4, 5)))) <= 1e-3
        assert grad_rel_error(lambda z: obj.pseudo_ce_loss(z, hard), T(rng.normal(size=(4, 5)))) <= 1e-3


class TestConsistency:
    def test_hand_case_against_scalar_oracle(self):
        weak = [[0.5, 0.5], [1 / 6, 5 / 6]]
        strong = [[0.7, 0.3], [0.4, 0.6]]
        global_mean = [2 / 3, 1 / 3]
        ratio = obj.expectation_ratio(T(global_mean), T(weak).mean(0))
        assert ratio.tolist() == pytest.approx([2.0, 0.5])
        expected = scalar_consistency(weak, strong, global_mean)
        assert expected == pytest.approx(0.6668110093947621, abs=1e-14)
        assert float(obj.consistency_loss(T(weak), T(strong), T(global_mean))) == pytest.approx(expected, abs=1e-12)

    def test_unit_ratio_reduces_to_soft_ce_on_softmaxed_weak(self, rng):
        weak = T(random_stochastic(rng, 5, 3))
        strong = T(random_stochastic(rng, 5, 3))
        loss = obj.consistency_loss(weak, strong, weak.mean(0))
        target = torch.softmax(weak, 1)
        assert float(loss) == pytest.approx(float(-(target * strong.log()).sum(1).mean()), abs=1e-12)

    def test_one_hot_identity_under_divide_normalization(self):
        eye = torch.eye(4, dtype=torch.float64)
        assert float(obj.consistency_loss(eye, eye, eye.mean(0), mode="divide")) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_under_softmax_normalization_is_unbounded(self):
        eye = torch.eye(4, dtype=torch.float64)
        assert math.isinf(float(obj.consistency_loss(eye, eye, eye.mean(0))))

    def test_ratio_times_batch_mean_is_global_mean(self, rng):
        weak = T(random_stochastic(rng, 8, 5))
        g = T(random_stochastic(rng, 1, 5)[0])
        ratio = obj.expectation_ratio(g, weak.mean(0))
        assert torch.allclose(ratio * weak.mean(0), g) and (ratio > 0).all()

    def test_zero_batch_mean_names_class(self):
        weak = T([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        with pytest.raises(NumericError, match="class 1"):
            obj.consistency_loss(weak, weak, T([0.4, 0.3, 0.3]))

    def test_gradient_flows_only_through_strong(self, rng):
        zw = T(rng.normal(size=(4, 5))).requires_grad_(True)
        zs = T(rng.normal(size=(4, 5))).requires_grad_(True)
        g = T(random_stochastic(rng, 1, 5)[0])
        obj.consistency_loss(torch.softmax(zw, 1), torch.softmax(zs, 1), g).backward()
        assert zw.grad is None or torch.count_nonzero(zw.grad) == 0
        assert torch.count_nonzero(zs.grad) > 0

    def test_gradient_matches_finite_differences(self, rng):
        weak = T(random_stochastic(rng, 4, 5))
        g = T(random_stochastic(rng, 1, 5)[0])
        f = lambda z: obj.consistency_loss(weak, torch.softmax(z, 1), g)
        assert grad_rel_error(f, T(rng.normal(size=(4, 5)))) <= 1e-3

    def test_nonnegative_and_minimized_at_target(self, rng):
        for _ in range(50):
            weak = T(random_stochastic(rng, 6, 4))
            g = T(random_stochastic(rng, 1, 4)[0])
            strong = T(random_stochastic(rng, 6, 4))
            target = obj.normalize_weak(weak, g)
            loss = float(obj.consistency_loss(weak, strong, g))
            at_target = float(obj.consistency_loss(weak, target, g))
            entropy = float(-(target * target.log()).sum(1).mean())
            assert loss >= 0
            assert at_target == pytest.approx(entropy, abs=1e-12)
            assert loss >= at_target - 1e-12


class TestTotalAndMixup:
    def test_total(self):
        w = obj.LossWeights(1.0, 0.3, 1.0)
        assert obj.total_loss(-1.5, 2.0, 0.4, w) == pytest.approx(-1.5 + 0.3 * 2.0 + 0.4)
        assert obj.total_loss(-1.5, 2.0, 0.4, w) == pytest.approx(-0.5)
        assert obj.total_loss(-1.5, 2.0, 0.4, obj.LossWeights(1, 0, 0)) == -1.5
        assert obj.total_loss(-1.5, 2.0, 0.4, obj.LossWeights(0, 0, 0)) == 0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValidationError):
            obj.LossWeights(-1, 0, 0)

    def test_mixup_endpoints_and_arithmetic(self, rng):
        x_i, x_j = torch.rand(3, 4, 4), torch.rand(3, 4, 4)
        y_i, y_j = T([1.0, 0.0]), T([0.0, 1.0])
        x, y = obj.mixup_pair(x_i, y_i, x_j, y_j, 1.0)
        assert x is x_i and y is y_i
        x, y = obj.mixup_pair(x_i, y_i, x_j, y_i, 0.5)
        assert torch.allclose(x, 0.5 * (x_i + x_j)) and torch.equal(y, y_i)
        _, y = obj.mixup_pair(x_i, y_i, x_j, y_j, 0.3)
        assert y.tolist() == pytest.approx([0.3, 0.7])
        assert float(y.sum()) == pytest.approx(1.0)

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_mixup_lambda_range(self, lam):
        with pytest.raises(ValidationError):
            obj.mixup_pair(0, T([1.0]), 0, T([1.0]), lam)
        with pytest.raises(ValidationError):
            obj.mkd_loss(torch.zeros(1, 2), T([[1.0, 0]]), T([[1.0, 0]]), lam)


class TestMKD:
    def test_lambda_one(self, rng):
        z = T(rng.normal(size=(4, 3)))
        y_i, y_j = T(random_stochastic(rng, 4, 3)), T(random_stochastic(rng, 4, 3))
        assert float(obj.mkd_loss(z, y_i, y_j, 1.0)) == pytest.approx(float(obj.pseudo_ce_loss(z, y_i)))

    def test_uniform_logits(self, rng):
        y_i, y_j = T(random_stochastic(rng, 5, 4)), T(random_stochastic(rng, 5, 4))
        assert float(obj.mkd_loss(torch.zeros(5, 4, dtype=torch.float64), y_i, y_j, 0.5)) == pytest.approx(math.log(4))

    @pytest.mark.parametrize("lam", [0.0, 0.25, 0.5, 0.75, 1.0])
    def test_linearity_identity(self, rng, lam):
        z = T(rng.normal(size=(6, 4)))
        y_i, y_j = T(random_stochastic(rng, 6, 4)), T(random_stochastic(rng, 6, 4))
        mixed = lam * y_i + (1 - lam) * y_j
        assert abs(float(obj.mkd_loss(z, y_i, y_j, lam)) - float(obj.pseudo_ce_loss(z, mixed))) <= 1e-8

    def test_per_sample_lambda(self, rng):
        z = T(rng.normal(size=(6, 4)))
        y_i, y_j = T(random_stochastic(rng, 6, 4)), T(random_stochastic(rng, 6, 4))
        lam = T(rng.uniform(size=6))
        mixed = lam[:, None] * y_i + (1 - lam[:, None]) * y_j
        assert float(obj.mkd_loss(z, y_i, y_j, lam)) == pytest.approx(float(obj.pseudo_ce_loss(z, mixed)), abs=1e-12)

    def test_gradient(self, rng):
        y_i, y_j = T(random_stochastic(rng, 4, 5)), T(random_stochastic(rng, 4, 5))
        assert grad_rel_error(lambda z: obj.mkd_loss(z, y_i, y_j, 0.35), T(rng.normal(size=(4, 5)))) <= 1e-3


class TestExpectationTracker:
    def test_reset_and_ema(self):
        tr = obj.ExpectationTracker(2, momentum=0.9)
        tr.reset(T([[1.0, 0.0], [0.0, 1.0]]))
        assert tr.mean.tolist() == [0.5, 0.5]
        tr.update(T([[1.0, 0.0], [1.0, 0.0]]))
        assert tr.mean.tolist() == pytest.approx([0.55, 0.45])


@settings(max_examples=50, deadline=None)
@given(B=st.integers(2, 16), K=st.integers(2, 8), seed=st.integers(0, 2**31 - 1))
def test_norm_sandwich_property(B, K, seed):
    A = random_stochastic(np.random.default_rng(seed), B, K)
    fro, nuc, rank = obj.nuclear_norm_check(A)
    assert fro <= nuc + 1e-8 and nuc <= math.sqrt(rank) * fro + 1e-8
    assert fro <= math.sqrt(B) + 1e-12
