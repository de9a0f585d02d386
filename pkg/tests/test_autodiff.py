"""Engine tests: reverse rules vs central differences, Adam oracle, checkpoints."""

import numpy as np
import pytest

from pairdis.autodiff import (
    Adam,
    CheckpointError,
    GraphError,
    NonFiniteError,
    PoisonedGradientError,
    ShapeError,
    Tensor,
    clamp,
    concat,
    conv2d,
    conv2d_transpose,
    dense,
    finite_diff_check,
    load_checkpoint,
    maximum_const,
    maxpool2,
    save_checkpoint,
    sigmoid,
    upsample2,
)

TOL = 1e-4  # primitive reverse rules vs double-precision central differences


def _t(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


class TestPrimitiveGradients:
    """Every primitive matches finite differences on random smooth inputs."""

    def test_elementwise_binary(self):
        rng = np.random.default_rng(0)
        ops = [
            lambda a, b: (a + b).sum(),
            lambda a, b: (a - b).sum(),
            lambda a, b: (a * b).sum(),
            lambda a, b: (a / b).sum(),
        ]
        for trial in range(5):
            a = _t(rng, 3, 4)
            b = _t(rng, 3, 4, lo=0.5, hi=2.0)  # keep divisors away from 0
            for op in ops:
                rep = finite_diff_check(op, [a, b])
                assert rep["max_rel_err"] < TOL, rep

    def test_broadcasting_binary(self):
        rng = np.random.default_rng(1)
        a = _t(rng, 4, 3)
        b = _t(rng, 3, lo=0.5, hi=2.0)
        rep = finite_diff_check(lambda x, y: ((x * y) / y + x - y).sum(), [a, b])
        assert rep["max_rel_err"] < TOL

    def test_elementwise_unary(self):
        rng = np.random.default_rng(2)
        cases = [
            (lambda x: x.exp().sum(), (-2.0, 2.0)),
            (lambda x: x.log().sum(), (0.2, 3.0)),
            (lambda x: x.tanh().sum(), (-2.0, 2.0)),
            (lambda x: x.sqrt().sum(), (0.2, 3.0)),
            (lambda x: x.square().sum(), (-2.0, 2.0)),
            (lambda x: x.abs().sum(), (0.1, 2.0)),  # away from the kink
            (lambda x: (-x).sum(), (-2.0, 2.0)),
            (lambda x: (x ** 3).sum(), (-2.0, 2.0)),
            (lambda x: (x ** 1.5).sum(), (0.2, 2.0)),
        ]
        for op, (lo, hi) in cases:
            x = _t(rng, 2, 5, lo=lo, hi=hi)
            rep = finite_diff_check(op, x)
            assert rep["max_rel_err"] < TOL, rep

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(3)
        h = 1e-5
        x = Tensor(np.where(rng.standard_normal((4, 4)) > 0, 1.0, -1.0)
                   * rng.uniform(10 * h + 0.01, 2.0, (4, 4)), requires_grad=True)
        rep = finite_diff_check(lambda t: t.relu().sum(), x, h=h)
        assert rep["max_rel_err"] < TOL

    def test_reductions_and_shape(self):
        rng = np.random.default_rng(4)
        x = _t(rng, 3, 4, 2)
        for op in [
            lambda t: t.sum(),
            lambda t: t.sum(axis=1).square().sum(),
            lambda t: t.sum(axis=(0, 2), keepdims=True).square().sum(),
            lambda t: t.mean(),
            lambda t: t.mean(axis=0).square().sum(),
            lambda t: t.reshape(6, 4).square().sum(),
        ]:
            rep = finite_diff_check(op, x)
            assert rep["max_rel_err"] < TOL, rep

    def test_max_over_axis(self):
        rng = np.random.default_rng(5)
        # ties broken deterministically; keep entries distinct so FD is smooth
        x = Tensor(rng.permutation(24).reshape(4, 6) * 0.37 + 0.1, requires_grad=True)
        rep = finite_diff_check(lambda t: t.max(axis=1).square().sum(), x)
        assert rep["max_rel_err"] < TOL

    def test_concat(self):
        rng = np.random.default_rng(6)
        a, b = _t(rng, 2, 3), _t(rng, 2, 5)
        rep = finite_diff_check(lambda x, y: concat([x, y], axis=1).square().sum(), [a, b])
        assert rep["max_rel_err"] < TOL

    def test_matmul_and_dense(self):
        rng = np.random.default_rng(7)
        x, w, b = _t(rng, 3, 4), _t(rng, 4, 5), _t(rng, 5)
        rep = finite_diff_check(lambda a, c, d: dense(a, c, d).square().sum(), [x, w, b])
        assert rep["max_rel_err"] < TOL

    def test_conv2d(self):
        rng = np.random.default_rng(8)
        x, w, b = _t(rng, 2, 3, 6, 7), _t(rng, 4, 3, 3, 3), _t(rng, 4)
        rep = finite_diff_check(lambda a, c, d: conv2d(a, c, d).square().sum(), [x, w, b])
        assert rep["max_rel_err"] < TOL

    def test_conv2d_transpose(self):
        rng = np.random.default_rng(9)
        x, w, b = _t(rng, 2, 3, 4, 5), _t(rng, 3, 2, 3, 3), _t(rng, 2)
        rep = finite_diff_check(
            lambda a, c, d: conv2d_transpose(a, c, d).square().sum(), [x, w, b])
        assert rep["max_rel_err"] < TOL

    def test_maxpool2(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.permutation(2 * 2 * 4 * 6).reshape(2, 2, 4, 6) * 0.13,
                   requires_grad=True)
        rep = finite_diff_check(lambda t: maxpool2(t).square().sum(), x)
        assert rep["max_rel_err"] < TOL

    def test_upsample2(self):
        rng = np.random.default_rng(11)
        x = _t(rng, 2, 3, 3, 4)
        rep = finite_diff_check(lambda t: upsample2(t).square().sum(), x)
        assert rep["max_rel_err"] < TOL

    def test_composed_helpers(self):
        rng = np.random.default_rng(12)
        x = _t(rng, 3, 4)
        for op in [
            lambda t: sigmoid(t).square().sum(),
            lambda t: clamp(t, -0.7, 0.9).square().sum(),
            lambda t: maximum_const(t, -0.3).square().sum(),
        ]:
            rep = finite_diff_check(op, x)
            assert rep["max_rel_err"] < TOL


class TestForwardContracts:
    def test_conv_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(conv2d(x, w).data, x.data)

    def test_conv_ones_kernel_on_constant(self):
        c = 0.4
        x = Tensor(np.full((1, 1, 6, 6), c))
        w = Tensor(np.ones((1, 1, 3, 3)))
        np.testing.assert_allclose(conv2d(x, w).data, 9 * c, rtol=1e-12)

    def test_maxpool_constant(self):
        x = Tensor(np.full((1, 2, 4, 4), 0.7))
        out = maxpool2(x)
        assert out.shape == (1, 2, 2, 2)
        np.testing.assert_array_equal(out.data, 0.7)

    def test_maxpool_tie_routes_first_rowmajor(self):
        x = Tensor(np.array([[[[1.0, 1.0], [1.0, 1.0]]]]), requires_grad=True)
        maxpool2(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_maxpool_backward_conserves_gradient(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.standard_normal((3, 2, 6, 8)), requires_grad=True)
        maxpool2(x).sum().backward()
        assert x.grad.sum() == pytest.approx(3 * 2 * 3 * 4)
        assert np.count_nonzero(x.grad) == 3 * 2 * 3 * 4  # one route per window

    def test_sum_gradient_all_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gradient_hand_value(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_relu_dense_matches_fd(self):
        rng = np.random.default_rng(14)
        x, w, b = _t(rng, 4, 3), _t(rng, 3, 2), _t(rng, 2)
        rep = finite_diff_check(lambda a, c, d: dense(a, c, d).relu().sum(), [x, w, b])
        assert rep["max_rel_err"] < TOL

    def test_transpose_conv_is_adjoint_of_conv(self):
        # d<conv(x,w), y>/dx must equal conv_T(y, w) with the (C_in,C_out) kernel layout
        rng = np.random.default_rng(15)
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        y = rng.standard_normal((2, 4, 4, 4))
        xg = Tensor(x, requires_grad=True)
        (conv2d(xg, Tensor(w)) * Tensor(y)).sum().backward()
        # same kernel array: its first axis is the transpose's input channels
        adj = conv2d_transpose(Tensor(y), Tensor(w)).data
        np.testing.assert_allclose(xg.grad, adj, rtol=1e-10, atol=1e-12)

    def test_graph_determinism(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.standard_normal((2, 1, 8, 8)), requires_grad=True)
            w = Tensor(rng.standard_normal((3, 1, 3, 3)), requires_grad=True)
            loss = maxpool2(conv2d(x, w)).tanh().square().sum()
            loss.backward()
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)


class TestErrors:
    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))

    def test_backward_requires_scalar(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(GraphError):
            (x * 2).backward()

    def test_log_of_nonpositive_trapped(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, 0.0])).log()

    def test_div_by_zero_trapped(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.ones(2)) / Tensor(np.array([1.0, 0.0]))

    def test_exp_overflow_trapped(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1000.0])).exp()

    def test_probe_failure_reports_index(self):
        from pairdis.autodiff import ProbeFailure
        x = Tensor(np.array([0.5, 1e-6]), requires_grad=True)
        with pytest.raises(ProbeFailure):
            finite_diff_check(lambda t: t.log().sum(), x, h=1e-5)


class TestFiniteDiffOracle:
    def test_quadratic(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        rep = finite_diff_check(lambda t: t.square().sum(), x, h=1e-5)
        assert rep["max_rel_err"] < 1e-6
        assert rep["numeric"] == pytest.approx(6.0, rel=1e-6)

    def test_constant_function(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        rep = finite_diff_check(lambda t: (t * 0.0).sum(), x)
        assert rep["max_rel_err"] == 0.0


class TestAdam:
    def test_zero_grad_zero_decay_noop(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert opt.t == 1

    def test_first_step_magnitude_is_lr(self):
        p = Tensor(np.array([5.0, -3.0, 0.0]), requires_grad=True)
        opt = Adam([p], lr=0.01)
        p.grad = np.array([7.0, -0.3, 2.0])
        opt.step()
        np.testing.assert_allclose(np.abs(p.data - [5.0, -3.0, 0.0]), 0.01, rtol=1e-6)

    def test_trajectory_matches_scalar_oracle(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p = Tensor(np.array([0.5]), requires_grad=True)
        opt = Adam([p], lr=lr, betas=(b1, b2), eps=eps)
        # hand-rolled scalar Adam with fixed gradient 1
        theta, m, v = 0.5, 0.0, 0.0
        for t in range(1, 3):
            p.grad = np.array([1.0])
            opt.step()
            m = b1 * m + (1 - b1) * 1.0
            v = b2 * v + (1 - b2) * 1.0
            mh = m / (1 - b1 ** t)
            vh = v / (1 - b2 ** t)
            theta -= lr * mh / (np.sqrt(vh) + eps)
            assert abs(float(p.data[0]) - theta) < 1e-12

    def test_decoupled_decay_applied_before_update(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = Adam([p], lr=0.1, weight_decay=0.5)
        p.grad = np.zeros(1)
        opt.step()
        # decay only: 2.0 * (1 - 0.1*0.5)
        assert float(p.data[0]) == pytest.approx(1.9, rel=1e-12)

    def test_poisoned_gradient_halts(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.array([1.0, np.nan])
        with pytest.raises(PoisonedGradientError):
            opt.step()

    def test_group_learning_rates(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([{"params": [a], "lr": 0.1}, {"params": [b], "lr": 0.01}])
        a.grad = np.array([1.0])
        b.grad = np.array([1.0])
        opt.step()
        assert abs(1.0 - float(a.data[0])) == pytest.approx(0.1, rel=1e-6)
        assert abs(1.0 - float(b.data[0])) == pytest.approx(0.01, rel=1e-6)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(21)
        tensors = {"enc.w0": rng.standard_normal((3, 1, 5, 5)).astype(np.float32),
                   "enc.b0": np.zeros(3, dtype=np.float32),
                   "head.mu": rng.standard_normal((4, 3, 1, 1)).astype(np.float32)}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tensors, config_hash="abc", rng_seeds=[1, 2], step=17)
        loaded, manifest = load_checkpoint(path)
        assert manifest["step"] == 17 and manifest["rng_seeds"] == [1, 2]
        assert list(loaded) == list(tensors)
        for k in tensors:
            np.testing.assert_array_equal(loaded[k], tensors[k])

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"w": np.ones(4, dtype=np.float32)})
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_manifest(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"w": np.ones(2, dtype=np.float32)})
        (tmp_path / "model.ckpt.json").unlink()
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
