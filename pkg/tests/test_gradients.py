"""Finite-difference spot checks for every differentiable operation.

Each test compares reverse-mode gradients against central differences in
64-bit mode on a couple of shapes; the wide randomized sweep lives in
the acceptance suite.
"""

import numpy as np

from conftest import fd_ok
from warpfit.nn import (batchnorm2d, bce_with_logits, conv2d, dense,
                        maxpool2d, smooth_l1)
from warpfit.losses import dice_loss, smoothness_loss
from warpfit.tensor import concat, elu, leaky_relu, matmul, sigmoid
from warpfit.tps import (ControlGrid, bilinear_sample, tps_grid, tps_solve)


class TestElementwiseGrads:
    def test_arithmetic_chain(self, rng):
        x = rng.standard_normal((3, 4))
        y = rng.standard_normal((3, 4)) + 3.0
        fd_ok(lambda a, b: ((a * b + a / b - b) ** 2).sum(), x, y)

    def test_broadcast_add_mul(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((3, 1))
        fd_ok(lambda u, v: (u * v + v).sum(), a, b)

    def test_activations(self, rng):
        # keep inputs away from the relu kinks so the FD stencil is valid
        x = rng.standard_normal((4, 5)) * 2.0
        x[np.abs(x) < 0.05] = 0.5
        fd_ok(lambda a: sigmoid(a).sum(), x)
        fd_ok(lambda a: leaky_relu(a, 1e-4).sum(), x)
        fd_ok(lambda a: elu(a).sum(), x)

    def test_exp_log_sqrt_abs(self, rng):
        x = rng.random((3, 3)) + 0.5
        fd_ok(lambda a: (a.exp() + a.log() + a.sqrt() + a.abs()).sum(), x)

    def test_getitem_and_concat(self, rng):
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal((2, 3))
        fd_ok(lambda u, v: concat([u[1:3], v], axis=0).sum(), a, b)

    def test_reductions(self, rng):
        x = rng.standard_normal((3, 4, 2))
        fd_ok(lambda a: (a.mean(axis=(0, 2)) * a.sum(axis=(0, 2))).sum(), x)


class TestLinearGrads:
    def test_matmul(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        fd_ok(lambda u, v: (matmul(u, v) ** 2).sum(), a, b)

    def test_batched_matmul(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 3))
        fd_ok(lambda u, v: matmul(u, v).sum(), a, b)

    def test_dense(self, rng):
        x = rng.standard_normal((5, 4))
        w = rng.standard_normal((4, 3))
        b = rng.standard_normal(3)
        fd_ok(lambda u, v, c: (dense(u, v, c) ** 2).sum(), x, w, b)


class TestConvPoolGrads:
    def test_conv2d_basic(self, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        fd_ok(lambda u, v, c: (conv2d(u, v, c, padding=1) ** 2).mean(), x, w, b)

    def test_conv2d_strided(self, rng):
        x = rng.standard_normal((1, 2, 7, 7))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        fd_ok(lambda u, v, c: conv2d(u, v, c, stride=2, padding=1).sum(), x, w, b)

    def test_maxpool(self, rng):
        # distinct values so the argmax is stable under the FD step
        x = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8) * 0.1
        fd_ok(lambda u: (maxpool2d(u, 2) ** 2).sum(), x)

    def test_batchnorm_train_mode(self, rng):
        x = rng.standard_normal((4, 3, 5, 5))
        g = rng.random(3) + 0.5
        b = rng.standard_normal(3)

        def f(u, gamma, beta):
            rm = np.zeros(3)
            rv = np.ones(3)
            return (batchnorm2d(u, gamma, beta, rm, rv, training=True) ** 2).sum()

        fd_ok(f, x, g, b)

    def test_batchnorm_eval_mode(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        g = rng.random(3) + 0.5
        b = rng.standard_normal(3)
        rm_data = rng.standard_normal(3)
        rv_data = rng.random(3) + 0.5

        def f(u, gamma, beta):
            return batchnorm2d(u, gamma, beta, rm_data.copy(), rv_data.copy(),
                               training=False).sum()

        fd_ok(f, x, g, b)


class TestHeadLossGrads:
    def test_smooth_l1(self, rng):
        # keep |x| away from the quadratic/linear switch at 1
        x = rng.standard_normal((4, 4)) * 3.0
        x[np.abs(np.abs(x) - 1.0) < 0.05] = 0.0
        fd_ok(lambda a: smooth_l1(a).sum(), x)

    def test_bce_with_logits(self, rng):
        logits = rng.standard_normal((3, 7)) * 4.0
        targets = (rng.random((3, 7)) > 0.5).astype(np.float64)
        fd_ok(lambda a: bce_with_logits(a, targets).sum(), logits)

    def test_dice_loss(self, rng):
        f = rng.random((2, 1, 6, 6))
        m = rng.random((2, 1, 6, 6))
        fd_ok(lambda a, b: dice_loss(a, b, axes=(1, 2, 3)).sum(), f, m)

    def test_smoothness_loss(self, rng):
        d = rng.standard_normal((9, 2)) * 0.1
        fd_ok(lambda a: smoothness_loss(a, 3).sum(), d)


class TestWarpGrads:
    def test_bilinear_sample(self, rng):
        image = rng.random((1, 1, 6, 6))
        field = rng.uniform(-0.8, 0.8, (1, 5, 5, 2))

        def f(img, fld):
            return (bilinear_sample(img, fld) ** 2).sum()

        fd_ok(f, image, field)

    def test_tps_solve_and_grid(self, rng):
        grid = ControlGrid(3)
        affine = np.eye(2, 3) + rng.standard_normal((2, 3)) * 0.05
        disp = rng.standard_normal((9, 2)) * 0.1

        def f(a, d):
            coeffs = tps_solve(grid, a, d)
            return (tps_grid(grid, coeffs, (5, 5)) ** 2).sum()

        fd_ok(f, affine, disp)

    def test_full_warp_chain(self, rng):
        grid = ControlGrid(2)
        image = rng.random((1, 1, 7, 7))
        affine = np.eye(2, 3)[None] + rng.standard_normal((1, 2, 3)) * 0.05
        disp = rng.standard_normal((1, 4, 2)) * 0.1

        def f(img, a, d):
            coeffs = tps_solve(grid, a, d)
            field = tps_grid(grid, coeffs, (7, 7))
            return (bilinear_sample(img, field) ** 2).sum()

        fd_ok(f, image, affine, disp)
