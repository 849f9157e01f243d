"""Link BCE, topological MSE and IoU against independent oracles."""
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from topocalib.losses import LossConfig, bce_link_loss, bce_link_loss_logits, iou, loss_from_patch_mse, topological_mse


def brute_force_topological(pred, target, alpha, beta, n):
    """Double loop over patches; neighbors include the center and skip out-of-range indices."""
    c, h, w = pred.shape
    ph, pw = h // n, w // n
    mse = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d = pred[:, i * ph : (i + 1) * ph, j * pw : (j + 1) * pw] - target[:, i * ph : (i + 1) * ph, j * pw : (j + 1) * pw]
            mse[i, j] = np.mean(d * d)
    total = 0.0
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in (-1, 0, 1):
                for l in (-1, 0, 1):
                    if 0 <= i + k < n and 0 <= j + l < n:
                        acc += max(0.0, mse[i + k, j + l] - beta)
            total += mse[i, j] + alpha * acc
    return total / (n * n)


class TestBCE:
    @pytest.mark.parametrize("n", [1, 10, 1000])
    def test_half_probability(self, n):
        y = np.random.default_rng(n).integers(0, 2, n)
        assert abs(bce_link_loss(np.full(n, 0.5), y) - n * math.log(2)) < 1e-12

    def test_perfect_prediction(self):
        y = np.array([0, 1, 1, 0])
        eps = 1e-7
        assert bce_link_loss(y.astype(float), y, eps) <= len(y) * -math.log(1 - eps) + 1e-15

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.01, 0.99, 100)
        y = rng.integers(0, 2, 100)
        want = 0.0
        for pi, yi in zip(p, y):
            want -= yi * math.log(pi) + (1 - yi) * math.log(1 - pi)
        assert abs(bce_link_loss(p, y) - want) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bce_link_loss(np.ones(3) * 0.5, np.ones(4))
        with pytest.raises(ValueError):
            bce_link_loss(torch.full((3,), 0.5), np.ones(4))

    def test_saturated_is_finite(self):
        assert np.isfinite(bce_link_loss(np.array([0.0, 1.0]), np.array([1, 0])))

    def test_torch_matches_numpy_and_logits(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal(50)
        y = rng.integers(0, 2, 50)
        p = 1 / (1 + np.exp(-z))
        t = bce_link_loss(torch.as_tensor(p), y)
        assert abs(float(t) - bce_link_loss(p, y)) < 1e-12
        assert abs(float(bce_link_loss_logits(torch.as_tensor(z), y)) - bce_link_loss(p, y)) < 1e-10

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 0.98), st.floats(0.001, 0.01), st.integers(0, 1))
    def test_moving_toward_label_decreases(self, p, step, y):
        q = p + step if y == 1 else p - step
        if not 0 < q < 1:
            return
        rest = np.array([0.3, 0.8])
        assert bce_link_loss(np.r_[q, rest], np.r_[y, 0, 1]) < bce_link_loss(np.r_[p, rest], np.r_[y, 0, 1])


class TestTopologicalMSE:
    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        cfg = LossConfig(alpha=0.5, beta=0.01, patches_per_side=8)
        worst = 0.0
        for _ in range(50):
            pred = rng.random((4, 64, 64))
            target = rng.random((4, 64, 64)) * (rng.random((4, 64, 64)) < 0.5)
            want = brute_force_topological(pred, target, 0.5, 0.01, 8)
            worst = max(worst, abs(topological_mse(pred, target, cfg) - want) / want)
        assert worst < 1e-9

    def test_sparse_errors_exercise_hinge(self):
        """Errors confined to a few patches so some fall below beta."""
        rng = np.random.default_rng(1)
        pred = np.zeros((4, 64, 64))
        target = np.zeros((4, 64, 64))
        target[:, :16, :8] = rng.random((4, 16, 8))
        target[:, 40:48, 40:44] = 0.1 * rng.random((4, 8, 4))
        cfg = LossConfig(alpha=0.5, beta=0.01, patches_per_side=8)
        want = brute_force_topological(pred, target, 0.5, 0.01, 8)
        assert abs(topological_mse(pred, target, cfg) - want) / want < 1e-9

    def test_identical_inputs(self):
        x = np.random.default_rng(2).random((3, 16, 16))
        assert topological_mse(x, x, LossConfig(patches_per_side=4)) == 0.0

    def test_alpha_zero_is_global_mse(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((2, 32, 32)), rng.random((2, 32, 32))
        got = topological_mse(a, b, LossConfig(alpha=0.0, patches_per_side=4))
        assert abs(got - np.mean((a - b) ** 2)) < 1e-12

    def test_batched_matches_single(self):
        rng = np.random.default_rng(4)
        a, b = torch.as_tensor(rng.random((3, 2, 16, 16))), torch.as_tensor(rng.random((3, 2, 16, 16)))
        cfg = LossConfig(patches_per_side=4)
        out = topological_mse(a, b, cfg)
        assert out.shape == (3,)
        for i in range(3):
            assert float(out[i]) == float(topological_mse(a[i], b[i], cfg))

    def test_patch_form_matches(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((2, 16, 16)), rng.random((2, 16, 16))
        cfg = LossConfig(patches_per_side=4)
        mse = ((a - b) ** 2).reshape(2, 4, 4, 4, 4).mean(axis=(0, 2, 4))
        assert abs(loss_from_patch_mse(mse, cfg) - topological_mse(a, b, cfg)) < 1e-12

    def test_indivisible_grid(self):
        with pytest.raises(ValueError):
            topological_mse(np.zeros((1, 10, 10)), np.zeros((1, 10, 10)), LossConfig(patches_per_side=3))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            topological_mse(np.zeros((1, 8, 8)), np.zeros((2, 8, 8)), LossConfig(patches_per_side=2))

    @pytest.mark.parametrize("kw", [{"patches_per_side": 0}, {"alpha": -1.0}, {"beta": -0.1}, {"epsilon": 0.01}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)

    @settings(max_examples=30, deadline=None)
    @given(
        arrays(np.float64, (2, 8, 8), elements=st.floats(0, 1)),
        arrays(np.float64, (2, 8, 8), elements=st.floats(0, 1)),
        st.floats(0, 2),
        st.floats(0, 2),
    )
    def test_nonnegative_and_monotone_in_alpha(self, a, b, a1, a2):
        lo, hi = sorted((a1, a2))
        l1 = topological_mse(a, b, LossConfig(alpha=lo, patches_per_side=4))
        l2 = topological_mse(a, b, LossConfig(alpha=hi, patches_per_side=4))
        assert 0.0 <= l1 <= l2 + 1e-15

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        cfg = LossConfig(alpha=0.5, beta=0.01, patches_per_side=4)
        target = torch.as_tensor(rng.random((2, 16, 16)))
        pred = torch.tensor(rng.random((2, 16, 16)), requires_grad=True)
        topological_mse(pred, target, cfg).backward()
        analytic = pred.grad.numpy().ravel()
        base = pred.detach().numpy().copy()
        h = 1e-4
        numeric = np.zeros(base.size)
        for idx in range(base.size):
            up, dn = base.copy().ravel(), base.copy().ravel()
            up[idx] += h
            dn[idx] -= h
            numeric[idx] = (
                topological_mse(up.reshape(base.shape), target.numpy(), cfg)
                - topological_mse(dn.reshape(base.shape), target.numpy(), cfg)
            ) / (2 * h)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-6)
        assert rel.max() < 1e-3


class TestIoU:
    def test_identical(self):
        g = np.array([[0, 1], [2, 2]])
        assert iou(g, g) == 1.0

    def test_disjoint(self):
        a = np.array([[1, 0], [0, 0]])
        b = np.array([[0, 0], [0, 1]])
        assert iou(a, b) == 0.0

    def test_hand_built_case(self):
        a = np.zeros((4, 4), int)
        b = np.zeros((4, 4), int)
        a[0, 0:3] = 1
        b[0, 1:4] = 1
        assert iou(a, b) == 0.5

    def test_absent_classes_excluded(self):
        a = np.array([[0, 1, 1, 3]])
        b = np.array([[0, 1, 1, 3]])
        assert iou(a, b) == 1.0

    def test_only_background(self):
        assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_palette_background(self):
        from topocalib.scene import ClassInfo, ClassPalette

        pal = ClassPalette({0: ClassInfo("a", (1, 1, 1)), 1: ClassInfo("bg", (0, 0, 0))}, background_id=1)
        assert iou(np.array([[0, 1]]), np.array([[1, 1]]), pal) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            iou(np.zeros((2, 2)), np.zeros((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.uint8, (6, 6), elements=st.integers(0, 3)), arrays(np.uint8, (6, 6), elements=st.integers(0, 3)))
    def test_symmetric_and_relabel_invariant(self, a, b):
        assert iou(a, b) == iou(b, a)
        perm = np.array([0, 3, 1, 2])
        assert abs(iou(perm[a], perm[b]) - iou(a, b)) < 1e-15
