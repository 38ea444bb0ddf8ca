"""Sequence encoder: positional encoding, attention, Shift, centroids."""

import numpy as np
import pytest

from tricontrast.attention import (
    EncoderLayerParams,
    MhsaParams,
    NeighbourSequences,
    TransformerEncoderParams,
    centroids_from_sequences,
    encoder_layer_forward,
    layer_norm,
    mhsa_forward,
    sequences_from_array,
    shift,
    sinusoidal_pe,
)
from tricontrast.errors import ContractError, ShapeError
from tricontrast.gradcheck import check_centroid_pipeline, check_encoder_layer, check_mhsa
from tricontrast.tensor import Tape, Tensor, mul, tsum


def _rng(seed=0):
    return np.random.default_rng(seed)


class TestSinusoidalPe:
    def test_position_zero(self):
        pe = sinusoidal_pe(3, 6).data
        np.testing.assert_array_equal(pe[0, 0::2], np.zeros(3))
        np.testing.assert_array_equal(pe[0, 1::2], np.ones(3))

    def test_position_one_dim_four(self):
        pe = sinusoidal_pe(2, 4).data
        np.testing.assert_allclose(pe[1], [0.84147, 0.54030, 0.01000, 0.99995], atol=1e-4)

    def test_bounded(self):
        pe = sinusoidal_pe(50, 16).data
        assert np.all(pe >= -1.0) and np.all(pe <= 1.0)

    def test_odd_dim_rejected(self):
        with pytest.raises(ContractError):
            sinusoidal_pe(4, 5)


class TestMhsa:
    def test_identical_rows_give_identical_outputs(self):
        rng = _rng(1)
        attn = MhsaParams(8, 2, rng)
        row = rng.standard_normal(8)
        x = Tensor(np.tile(row, (5, 1)))
        out = mhsa_forward(attn, x).data
        np.testing.assert_allclose(out, np.tile(out[0], (5, 1)), atol=1e-12)

    def test_single_token_identity_projections(self):
        rng = _rng(2)
        attn = MhsaParams(4, 1, rng)
        for lin in (attn.wq, attn.wk, attn.wv, attn.wo):
            lin.weight.data[:] = np.eye(4)
            if lin.bias is not None:
                lin.bias.data[:] = 0.0
        x = Tensor(rng.standard_normal((1, 4)))
        np.testing.assert_allclose(mhsa_forward(attn, x).data, x.data, atol=1e-12)

    def test_attention_rows_stochastic(self):
        rng = _rng(3)
        attn = MhsaParams(8, 4, rng)
        x = Tensor(rng.standard_normal((6, 5, 8)))
        _, weights = mhsa_forward(attn, x, return_weights=True)
        assert weights.shape == (6, 4, 5, 5)
        np.testing.assert_allclose(weights.sum(axis=-1), np.ones((6, 4, 5)), atol=1e-12)

    def test_dim_mismatch(self):
        attn = MhsaParams(8, 2, _rng())
        with pytest.raises(ShapeError):
            mhsa_forward(attn, Tensor(np.zeros((3, 7))))

    def test_head_divisibility_enforced(self):
        with pytest.raises(ContractError):
            MhsaParams(6, 4, _rng())

    def test_gradients(self):
        assert check_mhsa() <= 1e-4


class TestEncoderLayer:
    def test_zero_ff_identity_attention_reduces_to_layer_norm(self):
        rng = _rng(4)
        layer = EncoderLayerParams(4, 1, 8, rng)
        for lin in (layer.attn.wq, layer.attn.wk, layer.attn.wv, layer.attn.wo):
            lin.weight.data[:] = np.eye(4)
            if lin.bias is not None:
                lin.bias.data[:] = 0.0
        layer.ff1.weight.data[:] = 0.0
        layer.ff1.bias.data[:] = 0.0
        layer.ff2.weight.data[:] = 0.0
        layer.ff2.bias.data[:] = 0.0
        # single token: attention is the identity, so out = LN(LN(x + x) + 0)
        x = Tensor(rng.standard_normal((1, 4)))
        expected = layer_norm(
            layer_norm(Tensor(2.0 * x.data), layer.ln1_gamma, layer.ln1_beta),
            layer.ln2_gamma,
            layer.ln2_beta,
        ).data
        np.testing.assert_allclose(encoder_layer_forward(layer, x).data, expected, atol=1e-12)

    def test_output_shape(self):
        layer = EncoderLayerParams(8, 2, 16, _rng(5))
        for shape in [(3, 8), (4, 3, 8)]:
            assert encoder_layer_forward(layer, Tensor(np.ones(shape))).shape == shape

    def test_finite_for_random_weights_hundred_trials(self):
        for trial in range(100):
            rng = np.random.default_rng([99, trial])
            layer = EncoderLayerParams(8, 2, 16, rng)
            out = encoder_layer_forward(layer, Tensor(rng.standard_normal((4, 8))))
            assert np.isfinite(out.data).all()

    def test_gradients(self):
        assert check_encoder_layer() <= 1e-4


class TestShift:
    def test_paper_case_k5(self):
        seqs = sequences_from_array(np.arange(5.0).reshape(1, 5, 1))
        p = Tensor(np.array([[9.0]]))
        out = shift(seqs, p)
        np.testing.assert_array_equal(out.elements.data[0, :, 0], [9.0, 0.0, 1.0, 2.0, 3.0])
        assert out.origins[0].tolist() == ["pred", "queue", "queue", "queue", "queue"]

    def test_degenerate_length_one(self):
        seqs = sequences_from_array(np.array([[[1.0, 2.0]]]))
        out = shift(seqs, Tensor(np.array([[7.0, 8.0]])))
        np.testing.assert_array_equal(out.elements.data, [[[7.0, 8.0]]])
        assert out.origins[0].tolist() == ["pred"]

    def test_double_shift_preserves_order(self):
        seqs = sequences_from_array(np.arange(1.0, 6.0).reshape(1, 5, 1))
        once = shift(seqs, Tensor(np.array([[10.0]])))
        twice = shift(once, Tensor(np.array([[20.0]])))
        np.testing.assert_array_equal(twice.elements.data[0, :, 0], [20.0, 10.0, 1.0, 2.0, 3.0])

    def test_empty_sequence_rejected(self):
        seqs = NeighbourSequences(Tensor(np.zeros((1, 0, 2))), np.zeros((1, 0), dtype="<U5"))
        with pytest.raises(ContractError):
            shift(seqs, Tensor(np.zeros((1, 2))))

    @pytest.mark.parametrize("k", [1, 2, 5, 8])
    def test_multiset_and_length_invariants(self, k):
        for trial in range(10):
            rng = np.random.default_rng([k, trial])
            vals = rng.standard_normal((3, k, 4))
            p = rng.standard_normal((3, 4))
            out = shift(sequences_from_array(vals), Tensor(p))
            assert out.length == k
            for row in range(3):
                got = {tuple(v) for v in out.elements.data[row]}
                expect = {tuple(p[row])} | {tuple(v) for v in vals[row, : k - 1]}
                assert got == expect
            assert (out.origins[:, 0] == "pred").all()
            if k > 1:
                assert (out.origins[:, 1:] == "queue").all()

    def test_shape_mismatch(self):
        seqs = sequences_from_array(np.zeros((2, 3, 4)))
        with pytest.raises(ShapeError):
            shift(seqs, Tensor(np.zeros((2, 5))))


class TestCentroids:
    def test_output_shape(self):
        rng = _rng(6)
        psi = TransformerEncoderParams(8, 2, 2, rng)
        seqs = sequences_from_array(rng.standard_normal((7, 4, 8)))
        assert centroids_from_sequences(psi, seqs).c.shape == (7, 8)

    def test_identical_sequences_identical_centroids(self):
        rng = _rng(7)
        psi = TransformerEncoderParams(8, 2, 2, rng)
        seq = rng.standard_normal((1, 4, 8))
        seqs = sequences_from_array(np.concatenate([seq, seq], axis=0))
        c = centroids_from_sequences(psi, seqs).c.data
        np.testing.assert_array_equal(c[0], c[1])

    def test_positional_encoding_breaks_permutation_invariance(self):
        hits = 0
        for trial in range(10):
            rng = np.random.default_rng([55, trial])
            psi = TransformerEncoderParams(8, 1, 2, rng)
            base = rng.standard_normal((1, 5, 8))
            seqs = sequences_from_array(base)
            p = Tensor(rng.standard_normal((1, 8)))
            c_orig = centroids_from_sequences(psi, shift(seqs, p)).c.data.copy()
            permuted = base[:, [3, 0, 2, 1], :]  # positions 1..K-1 after shift drop last
            c_perm = centroids_from_sequences(
                psi, shift(sequences_from_array(base[:, [2, 0, 1, 3], :]), p)
            ).c.data
            hits += int(not np.allclose(c_orig, c_perm, atol=1e-10))
        assert hits == 10

    def test_queue_elements_detached_predictor_gets_gradient(self):
        rng = _rng(8)
        psi = TransformerEncoderParams(8, 1, 2, rng)
        seqs = sequences_from_array(rng.standard_normal((2, 3, 8)))
        p = Tensor(rng.standard_normal((2, 8)), requires_grad=True)
        with Tape() as tape:
            c = centroids_from_sequences(psi, shift(seqs, p)).c
            tape.backward(tsum(mul(c, c)))
        assert not seqs.elements.requires_grad
        assert seqs.elements.grad is None
        assert id(seqs.elements) not in tape.leaf_set
        assert p.grad is not None and np.any(p.grad != 0)
        assert all(layer.ln2_gamma.grad is not None for layer in psi.layers)

    def test_dim_mismatch(self):
        psi = TransformerEncoderParams(8, 1, 2, _rng())
        with pytest.raises(ShapeError):
            centroids_from_sequences(psi, sequences_from_array(np.zeros((2, 3, 6))))

    def test_gradcheck_through_pipeline(self):
        assert check_centroid_pipeline() <= 1e-4
