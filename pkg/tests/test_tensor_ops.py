import numpy as np
import pytest

from maptone import tensor as T
from maptone.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from maptone.tensor import SGD, Tensor, backward, grad_check, make_rng


class TestForwardOps:
    def test_softmax_uniform_logits(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])

    def test_matmul_identity(self):
        rng = make_rng(0)
        a = rng.standard_normal((3, 5))
        out = T.matmul(Tensor(np.eye(3)), Tensor(a))
        assert np.allclose(out.data, a)

    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == pytest.approx(0.5)

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(T.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(T.ShapeError, match=r"add.*\(2, 3\).*\(4, 5\)"):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_strict_mode_rejects_nonfinite(self):
        bad = Tensor([1.0, np.nan])
        T.exp(bad)  # fine outside strict mode
        with T.strict_nonfinite():
            with pytest.raises(T.NonFiniteError, match="exp"):
                T.exp(bad)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        backward(T.sum_(x))
        assert np.array_equal(x.grad, np.ones((2, 2)))

    def test_square_gradient(self):
        x = Tensor([3.0], requires_grad=True)
        backward(T.sum_(x * x))
        assert np.allclose(x.grad, [6.0])

    def test_softmax_sum_gradient_vanishes(self):
        # softmax rows sum to 1, so the sum is constant; frozen against a
        # central-difference probe as well
        x = Tensor([0.3, -1.2, 0.7], requires_grad=True)
        backward(T.sum_(T.softmax(x)))
        assert np.max(np.abs(x.grad)) < 1e-12
        eps = 1e-6
        for c in range(3):
            data = x.data.copy()
            data[c] += eps
            fp = T.sum_(T.softmax(Tensor(data))).item()
            data[c] -= 2 * eps
            fm = T.sum_(T.softmax(Tensor(data))).item()
            assert abs((fp - fm) / (2 * eps)) < 1e-9

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(T.ShapeError, match="scalar"):
            backward(x * 2.0)

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.sum_(x * x)
        backward(loss)
        backward(loss)
        assert np.allclose(x.grad, [4.0, 8.0])

    def test_fanout_sums_both_contributions(self):
        # y feeds two consumers; gradient must be the sum of both paths
        y = Tensor([0.5, -0.3], requires_grad=True)

        def f():
            a = T.exp(y)
            b = T.sigmoid(y)
            return T.sum_(a * b + a)

        assert grad_check(f, [y], max_coords=2) < 1e-8


class TestGradCheck:
    def test_analytic_quadratic(self):
        x = Tensor(make_rng(1).standard_normal(5), requires_grad=True)
        err = grad_check(lambda: T.sum_(x * x), [x], max_coords=5)
        assert err < 1e-6
        backward(T.sum_(x * x))
        assert np.allclose(x.grad, 2 * x.data)

    def test_constant_function_zero_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        err = grad_check(lambda: Tensor(4.0) * 1.0, [x], max_coords=2)
        assert err == 0.0

    def test_nondeterministic_f_detected(self):
        state = {"n": 0}
        x = Tensor([1.0], requires_grad=True)

        def f():
            state["n"] += 1
            return T.sum_(x * float(state["n"]))

        with pytest.raises(RuntimeError, match="non-deterministic"):
            grad_check(f, [x])

    def test_every_primitive_under_tolerance(self):
        from maptone.gradcheck import ops_gradcheck
        results = ops_gradcheck(seed=0, instances=5)
        for name, err in results.items():
            assert err < 1e-4, f"{name}: {err}"


class TestOptimizer:
    def test_single_step_no_momentum(self):
        p = Tensor([0.0], requires_grad=True)
        p.grad = np.array([1.0])
        SGD([p], lr=0.1, momentum=0.0).step()
        assert np.allclose(p.data, [-0.1])
        assert p.grad is None

    def test_two_steps_with_momentum(self):
        p = Tensor([0.0], requires_grad=True)
        opt = SGD([p], lr=0.1, momentum=0.5)
        p.grad = np.array([1.0])
        opt.step()
        assert np.allclose(p.data, [-0.1])
        p.grad = np.array([1.0])
        opt.step()  # velocity = 0.5*1 + 1 = 1.5
        assert np.allclose(p.data, [-0.25])

    def test_translator_optimizer_settings(self):
        from maptone.training import TrainConfig
        cfg = TrainConfig()
        assert cfg.lr_t == pytest.approx(1e-3)
        assert cfg.momentum == pytest.approx(0.5)

    def test_functional_step(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([2.0])
        v = [np.zeros(1)]
        T.sgd_momentum_step([p], v, lr=0.5, momentum=0.0)
        assert np.allclose(p.data, [0.0])


class TestDeterminism:
    def test_bit_identical_composite(self):
        def run():
            rng = make_rng(7)
            a = Tensor(rng.standard_normal((6, 6)), requires_grad=True)
            b = Tensor(rng.standard_normal((6, 6)), requires_grad=True)
            out = T.sum_(T.softmax(T.matmul(a, b), axis=1) * T.sigmoid(a))
            backward(out)
            return out.data.tobytes(), a.grad.tobytes()

        assert run() == run()


class TestPrecisionModes:
    def test_float32_mode(self):
        with T.precision(np.float32):
            x = Tensor([1.0, 2.0])
            assert x.dtype == np.float32
            assert T.exp(x).dtype == np.float32
        assert Tensor([1.0]).dtype == np.float64


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = make_rng(3)
        params = {
            "enc.w": Tensor(rng.standard_normal((3, 4))),
            "dec.bias": Tensor(rng.standard_normal(7)),
        }
        path = tmp_path / "model.pltc"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(params)
        for k in params:
            assert np.array_equal(loaded[k], params[k].data)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.pltc"
        save_checkpoint(path, {"p": Tensor(np.zeros((2, 2)))})
        blob = path.read_bytes()
        assert blob[:4] == b"PLTC"
        assert int.from_bytes(blob[4:8], "little") == 1    # version
        assert int.from_bytes(blob[8:12], "little") == 1   # count

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.pltc"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)
