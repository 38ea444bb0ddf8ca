"""Gradient verification suite: analytic backward vs central differences.

Every check builds a small fixture (N=4 rows, D=8 features, K=3 neighbours),
evaluates a scalar loss and compares backward() gradients against central
finite differences at h=1e-5. All reported values are max relative errors.
"""

from __future__ import annotations

import numpy as np

from .attention import (
    EncoderLayerParams,
    MhsaParams,
    TransformerEncoderParams,
    centroids_from_sequences,
    mhsa_forward,
    encoder_layer_forward,
    sequences_from_array,
    shift,
)
from .config import DatasetSpec, ModelSpec, TrainConfig
from .nn import BatchNormLayer, batchnorm_forward
from .objectives import (
    ObjectiveParams,
    centroid_loss,
    cross_correlation,
    neighbour_loss,
    redundancy_loss,
    total_loss,
)
from .tensor import Tensor, finite_diff_check, finite_diff_check_params, mul, tsum
from .training import TrainerState

N, D, K = 4, 8, 3
H = 1e-5
TOLERANCE = 1e-4


def _rng(tag: int) -> np.random.Generator:
    return np.random.default_rng([0xC0FFEE, tag])


def _quadratic_readout(shape: tuple[int, ...], rng: np.random.Generator):
    """sum((R*t)^2) with fixed random R.

    Plain sum(t^2) is blind after a layer norm or batch norm (each normalized
    slice has near-constant square sum), so the weights make the readout
    sensitive to direction, not just magnitude.
    """
    weights = Tensor(rng.uniform(0.5, 1.5, size=shape))

    def readout(t: Tensor) -> Tensor:
        wt = mul(t, weights)
        return tsum(mul(wt, wt))

    return readout


def check_neighbour_loss() -> float:
    rng = _rng(1)
    nn1 = Tensor(rng.standard_normal((N, D)))
    nn2 = Tensor(rng.standard_normal((N, D)))
    base_p2 = rng.standard_normal((N, D))
    p1 = Tensor(rng.standard_normal((N, D)), requires_grad=True)
    err_p2 = finite_diff_check(
        lambda p2: neighbour_loss(nn1, p2, 0.2, nn2, p1), Tensor(base_p2), h=H
    )
    p2 = Tensor(base_p2, requires_grad=True)
    err_p1 = finite_diff_check_params(
        lambda: neighbour_loss(nn1, p2, 0.2, nn2, p1), [p1], h=H
    )
    return max(err_p2, err_p1)


def check_centroid_loss() -> float:
    rng = _rng(2)
    c1 = Tensor(rng.standard_normal((N, D)), requires_grad=True)
    c2 = Tensor(rng.standard_normal((N, D)), requires_grad=True)
    return finite_diff_check_params(lambda: centroid_loss(c1, c2, 0.2, True), [c1, c2], h=H)


def check_redundancy_loss() -> float:
    rng = _rng(3)
    z1 = Tensor(rng.standard_normal((N, D)), requires_grad=True)
    z2 = Tensor(rng.standard_normal((N, D)), requires_grad=True)

    def loss():
        return redundancy_loss(cross_correlation(z1, z2), cross_correlation(z2, z1), 0.5)

    return finite_diff_check_params(loss, [z1, z2], h=H)


def check_total_loss() -> float:
    rng = _rng(4)
    params = ObjectiveParams()
    nn1 = Tensor(rng.standard_normal((N, D)))
    p2 = Tensor(rng.standard_normal((N, D)), requires_grad=True)
    c1 = Tensor(rng.standard_normal((N, D)), requires_grad=True)
    c2 = Tensor(rng.standard_normal((N, D)), requires_grad=True)
    z1 = Tensor(rng.standard_normal((N, D)), requires_grad=True)
    z2 = Tensor(rng.standard_normal((N, D)), requires_grad=True)

    def loss():
        l_nn = neighbour_loss(nn1, p2, params.tau)
        l_c = centroid_loss(c1, c2, params.tau)
        l_red = redundancy_loss(
            cross_correlation(z1, z2), cross_correlation(z2, z1), params.lambda_red
        )
        return total_loss(l_nn, l_c, l_red, params).total

    return finite_diff_check_params(loss, [p2, c1, c2, z1, z2], h=H)


def check_mhsa() -> float:
    rng = _rng(5)
    attn = MhsaParams(D, 4, rng)
    base_x = rng.standard_normal((K, D))
    readout = _quadratic_readout((K, D), rng)
    err_x = finite_diff_check(
        lambda x: readout(mhsa_forward(attn, x)), Tensor(base_x), h=H
    )
    x = Tensor(base_x)
    err_w = finite_diff_check_params(
        lambda: readout(mhsa_forward(attn, x)), attn.parameters(), h=H
    )
    return max(err_x, err_w)


def check_encoder_layer() -> float:
    rng = _rng(6)
    layer = EncoderLayerParams(D, 4, 2 * D, rng)
    base_x = rng.standard_normal((N, K, D))
    readout = _quadratic_readout((N, K, D), rng)
    err_x = finite_diff_check(
        lambda x: readout(encoder_layer_forward(layer, x)), Tensor(base_x), h=H
    )
    x = Tensor(base_x)
    err_w = finite_diff_check_params(
        lambda: readout(encoder_layer_forward(layer, x)), layer.parameters(), h=H
    )
    return max(err_x, err_w)


def check_centroid_pipeline() -> float:
    """Through positional encoding, the encoder stack and an injected predictor row."""
    rng = _rng(7)
    psi = TransformerEncoderParams(D, num_layers=1, num_heads=4, rng=rng)
    seqs = sequences_from_array(rng.standard_normal((N, K, D)))
    p = Tensor(rng.standard_normal((N, D)), requires_grad=True)
    readout = _quadratic_readout((N, D), rng)

    def loss():
        shifted = shift(seqs, p)
        return readout(centroids_from_sequences(psi, shifted).c)

    return finite_diff_check_params(loss, [p] + psi.parameters(), h=H)


def check_batchnorm() -> float:
    rng = _rng(8)
    layer = BatchNormLayer(D)
    layer.gamma.data[:] = rng.uniform(0.5, 1.5, D)
    layer.beta.data[:] = rng.standard_normal(D)
    base_x = rng.standard_normal((N, D))
    readout = _quadratic_readout((N, D), rng)
    err_x = finite_diff_check(
        lambda x: readout(batchnorm_forward(layer, x, "train")), Tensor(base_x), h=H
    )
    x = Tensor(base_x)
    err_w = finite_diff_check_params(
        lambda: readout(batchnorm_forward(layer, x, "train")),
        [layer.gamma, layer.beta],
        h=H,
    )
    return max(err_x, err_w)


def _tiny_train_config() -> TrainConfig:
    return TrainConfig(
        dataset=DatasetSpec(num_classes=2, samples=16, input_dim=6, cluster_std=1.0),
        model=ModelSpec(
            encoder_widths=[D],
            projector_widths=[D, D],
            predictor_widths=[D, D],
            transformer_layers=1,
            transformer_heads=2,
        ),
        batch_size=N,
        steps=4,
        k_neighbours=K,
        queue_capacity=32,
        warmup_steps=1,
        seed=7,
    )


def check_train_step_loss() -> dict[str, float]:
    """The full step loss differentiated against every online group and psi.

    Runs the same loss pipeline as train_step on a fixed batch with a warm
    queue, then finite-differences each parameter group separately.
    """
    from .objectives import total_loss as fuse

    cfg = _tiny_train_config()
    state = TrainerState(cfg)
    rng = _rng(9)
    state.queue.enqueue_batch(rng.standard_normal((8, D)), np.arange(8) % 2)
    x1 = Tensor(rng.standard_normal((N, cfg.dataset.input_dim)))
    x2 = Tensor(rng.standard_normal((N, cfg.dataset.input_dim)))
    b = state.branches
    obj = cfg.objective

    def loss():
        z1m = b.projector_momentum(b.encoder_momentum(x1, "train"), "train")
        z2m = b.projector_momentum(b.encoder_momentum(x2, "train"), "train")
        z1o = b.projector_online(b.encoder_online(x1, "train"), "train")
        z2o = b.projector_online(b.encoder_online(x2, "train"), "train")
        l_red = redundancy_loss(
            cross_correlation(z1m, z2o), cross_correlation(z2m, z1o), obj.lambda_red
        )
        res1 = state.queue.knn_query(z1m.data, K)
        res2 = state.queue.knn_query(z2o.data, K)
        p2 = b.predictor_nn(z2o, "train")
        p1 = b.predictor_nn(z1o, "train")
        pc2 = b.predictor_c(z2o, "train")
        pc1 = b.predictor_c(z1o, "train")
        nn1 = Tensor(res1.vectors.elements.data[:, 0, :].copy())
        nn2 = Tensor(res2.vectors.elements.data[:, 0, :].copy())
        l_nn = neighbour_loss(nn1, p2, obj.tau, nn2, p1)
        ca = centroids_from_sequences(state.psi, res1.vectors).c
        cb = centroids_from_sequences(state.psi, shift(res2.vectors, pc2)).c
        cc = centroids_from_sequences(state.psi, res2.vectors).c
        cd = centroids_from_sequences(state.psi, shift(res1.vectors, pc1)).c
        l_c = mul(
            centroid_loss(ca, cb, obj.tau) + centroid_loss(cc, cd, obj.tau), Tensor(0.5)
        )
        return fuse(l_nn, l_c, l_red, obj).total

    groups = {
        "train_step_encoder": b.encoder_online.parameters(),
        "train_step_projector": b.projector_online.parameters(),
        "train_step_predictor_nn": b.predictor_nn.parameters(),
        "train_step_predictor_c": b.predictor_c.parameters(),
        "train_step_psi": state.psi.parameters(),
    }
    return {name: finite_diff_check_params(loss, params, h=H) for name, params in groups.items()}


def run_all() -> dict[str, float]:
    results = {
        "neighbour_loss": check_neighbour_loss(),
        "centroid_loss": check_centroid_loss(),
        "redundancy_loss": check_redundancy_loss(),
        "total_loss": check_total_loss(),
        "mhsa": check_mhsa(),
        "encoder_layer": check_encoder_layer(),
        "centroid_pipeline": check_centroid_pipeline(),
        "batchnorm_train": check_batchnorm(),
    }
    results.update(check_train_step_loss())
    return results


MODULE_CHECKS = {
    "objectives": ["neighbour_loss", "centroid_loss", "redundancy_loss", "total_loss"],
    "attention": ["mhsa", "encoder_layer", "centroid_pipeline"],
    "nn": ["batchnorm_train"],
    "training": [
        "train_step_encoder",
        "train_step_projector",
        "train_step_predictor_nn",
        "train_step_predictor_c",
        "train_step_psi",
    ],
}
