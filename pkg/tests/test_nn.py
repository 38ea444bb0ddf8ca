"""Network blocks: linear, batch norm, MLP composition, EMA link."""

import numpy as np
import pytest

from tricontrast.errors import ContractError, ShapeError
from tricontrast.nn import (
    BatchNormLayer,
    LinearLayer,
    Mlp,
    MlpSpec,
    EmaParams,
    backbone_forward,
    batchnorm_forward,
    clone_as_momentum,
    ema_update,
    linear_forward,
    mlp_forward,
)
from tricontrast.tensor import Tape, Tensor, mul, tsum


def _rng(seed=0):
    return np.random.default_rng(seed)


class TestLinear:
    def test_identity_passthrough(self):
        layer = LinearLayer(3, 3, _rng())
        layer.weight.data[:] = np.eye(3)
        layer.bias.data[:] = 0.0
        x = Tensor(_rng(1).standard_normal((4, 3)))
        np.testing.assert_allclose(linear_forward(layer, x).data, x.data, atol=1e-15)

    def test_scalar_arithmetic(self):
        layer = LinearLayer(1, 1, _rng())
        layer.weight.data[:] = [[2.0]]
        layer.bias.data[:] = [1.0]
        out = linear_forward(layer, Tensor([[3.0]]))
        np.testing.assert_array_equal(out.data, [[7.0]])

    def test_zero_batch_returns_bias_rows(self):
        layer = LinearLayer(2, 3, _rng(2))
        layer.bias.data[:] = [1.0, 2.0, 3.0]
        out = linear_forward(layer, Tensor(np.zeros((5, 2))))
        np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0, 3.0], (5, 1)))

    def test_shape_mismatch(self):
        layer = LinearLayer(4, 2, _rng())
        with pytest.raises(ShapeError):
            linear_forward(layer, Tensor(np.zeros((3, 5))))

    def test_no_bias_variant(self):
        layer = LinearLayer(2, 2, _rng(), use_bias=False)
        assert layer.bias is None
        assert len(layer.parameters()) == 1
        out = linear_forward(layer, Tensor(np.ones((1, 2))))
        assert out.shape == (1, 2)


class TestBatchNorm:
    def test_standardized_input_matches_formula(self):
        # column [-1, 1]: mean 0, biased variance 1
        layer = BatchNormLayer(1)
        x = np.array([[-1.0], [1.0]])
        out = batchnorm_forward(layer, Tensor(x), "train")
        expected = x / np.sqrt(1.0 + layer.eps)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)
        np.testing.assert_allclose(out.data, x, atol=1e-5)

    def test_constant_column_collapses_to_beta(self):
        layer = BatchNormLayer(2)
        layer.beta.data[:] = [0.3, -0.7]
        out = batchnorm_forward(layer, Tensor(np.full((4, 2), 9.0)), "train")
        np.testing.assert_array_equal(out.data, np.tile([0.3, -0.7], (4, 1)))

    def test_zero_gamma_gives_beta_exactly(self):
        layer = BatchNormLayer(3)
        layer.gamma.data[:] = 0.0
        layer.beta.data[:] = [1.0, 2.0, 3.0]
        out = batchnorm_forward(layer, Tensor(_rng(3).standard_normal((5, 3))), "train")
        np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0, 3.0], (5, 1)))

    def test_single_row_train_rejected(self):
        layer = BatchNormLayer(2)
        with pytest.raises(ContractError):
            batchnorm_forward(layer, Tensor(np.ones((1, 2))), "train")

    def test_eval_mode_uses_running_stats(self):
        layer = BatchNormLayer(1)
        layer.running_mean[:] = 2.0
        layer.running_var[:] = 4.0
        out = batchnorm_forward(layer, Tensor([[4.0]]), "eval")
        np.testing.assert_allclose(out.data, [[2.0 / np.sqrt(4.0 + layer.eps)]], atol=1e-12)

    def test_running_stats_update(self):
        layer = BatchNormLayer(1)
        x = np.array([[0.0], [2.0]])  # mean 1, biased var 1
        batchnorm_forward(layer, Tensor(x), "train")
        np.testing.assert_allclose(layer.running_mean, [0.1])
        np.testing.assert_allclose(layer.running_var, [0.9 * 1.0 + 0.1 * 1.0])


class TestMlp:
    def test_single_layer_equals_linear(self):
        rng = _rng(4)
        mlp = Mlp(3, MlpSpec([2]), rng)
        x = Tensor(rng.standard_normal((5, 3)))
        np.testing.assert_array_equal(
            mlp_forward(mlp, x).data, linear_forward(mlp.layers[0], x).data
        )

    def test_manual_composition_eval_mode(self):
        mlp = Mlp(2, MlpSpec([2, 2]), _rng(5))
        for layer in mlp.layers:
            layer.weight.data[:] = np.eye(2)
            layer.bias.data[:] = 0.0
        # eval-mode running stats (0,1): BN divides by sqrt(1+eps)
        x = np.array([[1.0, -2.0], [-0.5, 3.0]])
        out = mlp_forward(mlp, Tensor(x), "eval")
        expected = np.maximum(x / np.sqrt(1.0 + 1e-5), 0.0)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_negative_input_leaves_only_bias_path(self):
        mlp = Mlp(2, MlpSpec([2, 2]), _rng(6))
        for layer in mlp.layers:
            layer.weight.data[:] = np.eye(2)
        mlp.layers[0].bias.data[:] = 0.0
        mlp.layers[1].bias.data[:] = [5.0, -5.0]
        out = mlp_forward(mlp, Tensor([[-1.0, -3.0], [-2.0, -0.1]]), "eval")
        np.testing.assert_array_equal(out.data, np.tile([5.0, -5.0], (2, 1)))

    def test_width_mismatch(self):
        mlp = Mlp(4, MlpSpec([2]), _rng())
        with pytest.raises(ShapeError):
            mlp_forward(mlp, Tensor(np.zeros((2, 3))))

    def test_final_layer_superposition(self):
        """The head ends in a bare affine layer: f(a+b)-f(0) == (f(a)-f(0))+(f(b)-f(0))."""
        rng = _rng(7)
        mlp = Mlp(4, MlpSpec([8, 8, 4]), rng)
        last = mlp.layers[-1]
        a = Tensor(rng.standard_normal((3, 8)))
        b = Tensor(rng.standard_normal((3, 8)))
        zero = Tensor(np.zeros((3, 8)))
        f = lambda t: linear_forward(last, t).data
        lhs = f(Tensor(a.data + b.data)) - f(zero)
        rhs = (f(a) - f(zero)) + (f(b) - f(zero))
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_bad_widths_rejected(self):
        with pytest.raises(ContractError):
            MlpSpec([])
        with pytest.raises(ContractError):
            MlpSpec([4, 0])


class TestBackbone:
    def test_identity_configuration_passthrough(self):
        enc = Mlp(3, MlpSpec([3]), _rng(8))
        enc.layers[0].weight.data[:] = np.eye(3)
        enc.layers[0].bias.data[:] = 0.0
        x = Tensor(_rng(9).standard_normal((4, 3)))
        np.testing.assert_allclose(backbone_forward(enc, x, "eval").data, x.data, atol=1e-15)

    def test_seeded_determinism(self):
        x = np.arange(8.0).reshape(2, 4)
        outs = []
        for _ in range(2):
            enc = Mlp(4, MlpSpec([6, 3]), np.random.default_rng(42))
            outs.append(backbone_forward(enc, Tensor(x), "eval").data)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_output_shape_contract(self):
        enc = Mlp(4, MlpSpec([6, 3]), _rng(10))
        for n in (2, 5, 17):
            assert backbone_forward(enc, Tensor(np.zeros((n, 4))), "eval").shape == (n, 3)


class TestEma:
    def test_m_one_is_identity(self):
        rng = _rng(11)
        online = [Tensor(rng.standard_normal(4))]
        momentum = [Tensor(rng.standard_normal(4))]
        before = momentum[0].data.copy()
        ema_update(online, momentum, 1.0)
        assert np.array_equal(momentum[0].data, before)

    def test_m_zero_copies_online(self):
        rng = _rng(12)
        online = [Tensor(rng.standard_normal(4))]
        momentum = [Tensor(rng.standard_normal(4))]
        ema_update(online, momentum, 0.0)
        assert np.array_equal(momentum[0].data, online[0].data)

    def test_scalar_arithmetic(self):
        online = [Tensor([0.0])]
        momentum = [Tensor([1.0])]
        ema_update(online, momentum, 0.9)
        np.testing.assert_allclose(momentum[0].data, [0.9])

    def test_stays_in_interval(self):
        rng = _rng(13)
        for trial in range(5):
            theta = Tensor(rng.standard_normal(6))
            xi = Tensor(rng.standard_normal(6))
            lo = np.minimum(theta.data, xi.data).copy()
            hi = np.maximum(theta.data, xi.data).copy()
            ema_update([theta], [xi], rng.uniform(0.01, 0.99))
            assert np.all(xi.data >= lo) and np.all(xi.data <= hi)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ema_update([Tensor(np.zeros(2))], [Tensor(np.zeros(3))], 0.5)

    def test_cosine_schedule_monotone_to_one(self):
        ema = EmaParams(0.9, "cosine-to-one")
        values = [ema.coefficient(s, 100) for s in range(0, 101, 5)]
        assert values[0] == pytest.approx(0.9)
        assert values[-1] == pytest.approx(1.0)
        assert all(b >= a for a, b in zip(values, values[1:]))


class TestMomentumIsolation:
    def test_momentum_clone_never_requires_grad(self):
        mlp = Mlp(3, MlpSpec([4, 2]), _rng(14))
        twin = clone_as_momentum(mlp)
        assert all(not p.requires_grad for p in twin.parameters())
        for a, b in zip(mlp.parameters(), twin.parameters()):
            np.testing.assert_array_equal(a.data, b.data)
            assert a.data is not b.data

    def test_loss_through_momentum_gives_it_no_gradient(self):
        rng = _rng(15)
        mlp = Mlp(3, MlpSpec([4, 2]), rng)
        twin = clone_as_momentum(mlp)
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        with Tape() as tape:
            out = mlp_forward(twin, x, "train")
            tape.backward(tsum(mul(out, out)))
        for p in twin.parameters():
            assert p.grad is None
            assert id(p) not in tape.leaf_set
        assert x.grad is not None and np.any(x.grad != 0)
