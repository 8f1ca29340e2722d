import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdvpt import numerics as nx
from sdvpt.gradcheck import finite_diff_check
from sdvpt.losses import (LossWeights, contrastive_loss, loss_cspi, loss_tgpr, mse_count_loss, recon_loss)
from sdvpt.numerics import ContractError, NumericError, Tensor
from sdvpt.optim import Adam, adam_step


def contrastive_oracle(img, txt, ids, tau):
    """Scalar-loop evaluation with same-category negatives removed."""
    n = len(ids)

    def cos(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    total = 0.0
    for i in range(n):
        pos = math.exp(cos(img[i], txt[i]) / tau)
        den_i2t = pos + sum(math.exp(cos(img[i], txt[j]) / tau) for j in range(n) if ids[j] != ids[i])
        den_t2i = pos + sum(math.exp(cos(img[j], txt[i]) / tau) for j in range(n) if ids[j] != ids[i])
        total += -math.log(pos / den_i2t) - math.log(pos / den_t2i)
    return total / n


class TestContrastive:
    def test_single_sample_zero(self):
        assert contrastive_loss(np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]]), [0], 0.07).item() == 0.0

    def test_two_sample_value(self):
        eye = np.eye(2)
        val = contrastive_loss(eye, eye, [0, 1], 1.0).item()
        assert val == pytest.approx(2 * -math.log(math.e / (math.e + 1)), abs=1e-12)
        assert val == pytest.approx(0.62652, abs=1e-5)

    def test_duplicate_category_masked(self):
        rng = np.random.default_rng(0)
        img, txt = rng.normal(size=(2, 2, 4))
        assert contrastive_loss(img, txt, [5, 5], 0.5).item() == pytest.approx(0.0, abs=1e-15)
        img3, txt3 = rng.normal(size=(2, 3, 4))
        val = contrastive_loss(img3, txt3, [1, 1, 2], 0.3).item()
        assert val == pytest.approx(contrastive_oracle(img3, txt3, [1, 1, 2], 0.3), abs=1e-12)

    def test_random_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = int(rng.integers(1, 7))
            img, txt = rng.normal(size=(2, n, 5))
            ids = rng.integers(0, 4, size=n)
            tau = float(rng.uniform(0.05, 2))
            assert contrastive_loss(img, txt, ids, tau).item() == pytest.approx(
                contrastive_oracle(img, txt, ids, tau), rel=1e-10, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_and_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 6))
        img, txt = rng.normal(size=(2, n, 3))
        ids = rng.integers(0, 3, size=n)
        a = contrastive_loss(img, txt, ids, 0.2).item()
        b = contrastive_loss(txt, img, ids, 0.2).item()
        assert a >= 0
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)

    def test_sharpening_drives_loss_to_zero(self):
        eye = np.eye(3)
        vals = [contrastive_loss(eye, eye, [0, 1, 2], tau).item() for tau in (1.0, 0.5, 0.2, 0.1, 0.05, 0.01)]
        assert all(b < a for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-40

    def test_misaligned(self):
        with pytest.raises(ContractError):
            contrastive_loss(np.ones((2, 3)), np.ones((3, 3)), [0, 1])
        with pytest.raises(ContractError):
            contrastive_loss(np.ones((2, 3)), np.ones((2, 3)), [0])

    def test_gradients(self):
        rng = np.random.default_rng(2)
        img = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        txt = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        assert finite_diff_check(lambda: contrastive_loss(img, txt, [0, 1, 1, 2], 0.3), [img, txt], eps=1e-6) < 1e-3


class TestMseRecon:
    def test_mse(self):
        assert mse_count_loss([1.0, 2.0], [1.0, 2.0]).item() == 0.0
        assert mse_count_loss([3.0, 5.0], [1.0, 5.0]).item() == 2.0
        assert mse_count_loss([2.5], [1.0]).item() == 2.25
        with pytest.raises(ValueError):
            mse_count_loss([], [])

    def test_recon_values(self):
        p = np.array([1.0, 0.0])
        assert recon_loss(p, p).item() == 0.0
        assert recon_loss(p, p, "cosine").item() == pytest.approx(0.0, abs=1e-15)
        assert recon_loss(np.array([0.5, 0.5]), p).item() == 0.5
        with pytest.raises(ValueError):
            recon_loss(p, p, "l1")

    def test_recon_gradient_analytic(self):
        rng = np.random.default_rng(0)
        target = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        fused = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        recon_loss(fused, target).backward()
        np.testing.assert_allclose(target.grad, 2 * (target.data - fused.data))
        np.testing.assert_allclose(fused.grad, -2 * (target.data - fused.data))

    def test_recon_permutation_invariant(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 24))
        perm = rng.permutation(24)
        assert recon_loss(a, b).item() == pytest.approx(recon_loss(a[perm], b[perm]).item(), rel=1e-14)

    @pytest.mark.parametrize("metric", ["l2", "cosine"])
    def test_recon_gradients(self, metric):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(3, 2, 2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 2, 2, 3)), requires_grad=True)
        assert finite_diff_check(lambda: recon_loss(a, b, metric), [a, b], eps=1e-6) < 1e-3

    def test_mse_gradients(self):
        p = Tensor(np.array([1.0, 4.0, 2.0]), requires_grad=True)
        assert finite_diff_check(lambda: mse_count_loss(p, [2.0, 2.0, 2.0]), [p]) < 1e-6


class TestComposites:
    def test_zero_lambdas(self):
        w = LossWeights(0.0, 0.0, 0.0)
        assert loss_tgpr(2.0, 3.0, 0.5, w) == 2.0
        assert loss_cspi(2.0, 3.0, w) == 2.0

    def test_hand_value(self):
        w = LossWeights(1.0, 0.0, 10.0)
        assert loss_tgpr(2.0, 3.0, 0.5, w, l_model=0.0) == 10.0
        assert loss_cspi(2.0, 3.0, w) == 5.0

    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.lambda3, w.tau) == (1.0, 0.0, 10.0, 0.07)

    def test_validation(self):
        with pytest.raises(ValueError):
            LossWeights(tau=0.0)
        with pytest.raises(ValueError):
            LossWeights(lambda1=-1.0)


class TestAdam:
    def test_zero_gradient_unchanged(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        Adam().step({"p": p})
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_hand_oracle(self):
        g = np.array([0.5, -3.0, 1e-3])
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        m = (1 - b1) * g
        v = (1 - b2) * g * g
        mhat, vhat = m / (1 - b1), v / (1 - b2)
        expected = np.ones(3) - lr * mhat / (np.sqrt(vhat) + eps)
        p = Tensor(np.ones(3), requires_grad=True)
        p.grad = g.copy()
        Adam(lr=lr).step({"p": p})
        np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)
        # roughly lr * sign(g) on the first step
        np.testing.assert_allclose(p.data, 1 - lr * np.sign(g), atol=1e-6)
        q, _, _, t = adam_step(np.ones(3), g, np.zeros(3), np.zeros(3), 0, lr=lr)
        np.testing.assert_allclose(q, expected, atol=1e-15)
        assert t == 1

    def test_deterministic(self):
        def run():
            p = Tensor(np.linspace(-1, 1, 5), requires_grad=True)
            opt = Adam(lr=0.1)
            for i in range(10):
                p.grad = np.sin(p.data * (i + 1))
                opt.step({"p": p})
            return p.data.tobytes()

        assert run() == run()

    def test_matches_functional_over_steps(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=4), requires_grad=True)
        ref, m, v, t = p.data.copy(), np.zeros(4), np.zeros(4), 0
        opt = Adam(lr=0.05)
        for _ in range(5):
            g = rng.normal(size=4)
            p.grad = g
            opt.step({"p": p})
            ref, m, v, t = adam_step(ref, g, m, v, t, lr=0.05)
        np.testing.assert_allclose(p.data, ref, atol=1e-15)

    def test_row_sparse_leaves_other_rows(self):
        p = Tensor(np.ones((3, 2)), requires_grad=True)
        p.grad = np.ones((3, 2))
        opt = Adam(lr=0.1, row_sparse=["p"])
        opt.step({"p": p}, rows={"p": [1]})
        np.testing.assert_array_equal(p.data[[0, 2]], 1.0)
        assert np.all(p.data[1] < 1.0)
        np.testing.assert_array_equal(opt.t["p"], [0, 1, 0])

    def test_state_round_trip(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.array([1.0, 2.0])
        opt = Adam()
        opt.step({"p": p})
        other = Adam()
        other.load_state_arrays(opt.state_arrays())
        for kind in ("m", "v", "t"):
            np.testing.assert_array_equal(getattr(other, kind)["p"], getattr(opt, kind)["p"])

    def test_nan_gradient_checked(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.array([np.nan, 0.0])
        with nx.checked(True):
            with pytest.raises(NumericError):
                Adam().step({"p": p})

    def test_bad_lr(self):
        with pytest.raises(ValueError):
            Adam(lr=0.0)
        with pytest.raises(ValueError):
            Adam(lr_overrides={"p": -1.0})

    def test_lr_override_per_parameter(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        a.grad = np.ones(2)
        b.grad = np.ones(2)
        Adam(lr=0.01, lr_overrides={"b": 0.1}).step({"a": a, "b": b})
        np.testing.assert_allclose(a.data, 0.99, atol=1e-6)
        np.testing.assert_allclose(b.data, 0.9, atol=1e-6)
