"""Network building blocks: linear layers, batch norm, MLP heads, EMA link.

The online branch (encoder, projector, two predictors) owns every trainable
tensor; the momentum branch is a structural copy whose tensors never require
gradients and are advanced only by ``ema_update``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, add, matmul, mul, relu, sqrt, sub, tmean, transpose

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def init_weight(out_dim: int, in_dim: int, rng: np.random.Generator) -> Tensor:
    bound = 1.0 / math.sqrt(in_dim)
    return Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True)


class LinearLayer:
    """Affine map x -> x @ W.T + b with W of shape (out, in).

    `use_bias=False` drops the bias entirely (used for the attention key
    projection, where a bias is cancelled exactly by the softmax).
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, use_bias: bool = True):
        self.weight = init_weight(out_dim, in_dim, rng)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if use_bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def named_parameters(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        named = [(f"{prefix}.weight", self.weight.data)]
        if self.bias is not None:
            named.append((f"{prefix}.bias", self.bias.data))
        return named


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.weight.shape[1]:
        raise ShapeError(
            f"linear expects (N,{layer.weight.shape[1]}) input, got {x.shape}"
        )
    out = matmul(x, transpose(layer.weight))
    return out if layer.bias is None else add(out, layer.bias)


class BatchNormLayer:
    """Per-feature standardization with learnable affine and running stats."""

    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum_bn = BN_MOMENTUM
        self.eps = BN_EPS

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batchnorm_forward(self, x, mode)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def named_parameters(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        return [
            (f"{prefix}.gamma", self.gamma.data),
            (f"{prefix}.beta", self.beta.data),
            (f"{prefix}.running_mean", self.running_mean),
            (f"{prefix}.running_var", self.running_var),
        ]


def batchnorm_forward(layer: BatchNormLayer, x: Tensor, mode: str) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.gamma.shape[0]:
        raise ShapeError(f"batchnorm expects (N,{layer.gamma.shape[0]}), got {x.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ContractError("batch norm in train mode needs a batch of at least 2")
        mean = tmean(x, axis=0, keepdims=True)
        centered = sub(x, mean)
        var = tmean(mul(centered, centered), axis=0, keepdims=True)
        xhat = centered / sqrt(add(var, Tensor(np.full((1, x.shape[1]), layer.eps))))
        m = layer.momentum_bn
        layer.running_mean = (1.0 - m) * layer.running_mean + m * mean.data.reshape(-1)
        layer.running_var = (1.0 - m) * layer.running_var + m * var.data.reshape(-1)
    elif mode == "eval":
        xhat = (x - Tensor(layer.running_mean)) / Tensor(
            np.sqrt(layer.running_var + layer.eps)
        )
    else:
        raise ContractError(f"unknown batchnorm mode {mode!r}")
    return add(mul(xhat, layer.gamma), layer.beta)


@dataclass
class MlpSpec:
    """Layer output widths; hidden layers get BN + ReLU, the last stays bare."""

    layer_widths: list[int]
    batchnorm_after_hidden: bool = True

    def __post_init__(self):
        if not self.layer_widths or any(w <= 0 for w in self.layer_widths):
            raise ContractError(f"layer widths must be positive, got {self.layer_widths}")


class Mlp:
    def __init__(self, in_dim: int, spec: MlpSpec, rng: np.random.Generator):
        self.spec = spec
        self.in_dim = in_dim
        self.layers: list[LinearLayer] = []
        self.norms: list[BatchNormLayer | None] = []
        prev = in_dim
        for i, width in enumerate(spec.layer_widths):
            self.layers.append(LinearLayer(prev, width, rng))
            is_last = i == len(spec.layer_widths) - 1
            self.norms.append(
                BatchNormLayer(width) if (not is_last and spec.batchnorm_after_hidden) else None
            )
            prev = width
        self.out_dim = prev

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return mlp_forward(self, x, mode)

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer, norm in zip(self.layers, self.norms):
            params.extend(layer.parameters())
            if norm is not None:
                params.extend(norm.parameters())
        return params

    def named_parameters(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        named: list[tuple[str, np.ndarray]] = []
        for i, (layer, norm) in enumerate(zip(self.layers, self.norms)):
            named.extend(layer.named_parameters(f"{prefix}.linear{i}"))
            if norm is not None:
                named.extend(norm.named_parameters(f"{prefix}.bn{i}"))
        return named


def mlp_forward(mlp: Mlp, x: Tensor, mode: str = "train") -> Tensor:
    if x.ndim != 2 or x.shape[1] != mlp.in_dim:
        raise ShapeError(f"mlp expects (N,{mlp.in_dim}) input, got {x.shape}")
    h = x
    last = len(mlp.layers) - 1
    for i, (layer, norm) in enumerate(zip(mlp.layers, mlp.norms)):
        h = linear_forward(layer, h)
        if i != last:
            if norm is not None:
                h = batchnorm_forward(norm, h, mode)
            h = relu(h)
    return h


def backbone_forward(encoder: Mlp, x: Tensor, mode: str = "train") -> Tensor:
    """The MLP encoder standing in for a convolutional backbone."""
    return mlp_forward(encoder, x, mode)


@dataclass
class BranchParams:
    """Online + momentum encoder/projector pairs and the two online predictors."""

    encoder_online: Mlp
    projector_online: Mlp
    predictor_nn: Mlp
    predictor_c: Mlp
    encoder_momentum: Mlp
    projector_momentum: Mlp

    def online_parameters(self) -> list[Tensor]:
        return (
            self.encoder_online.parameters()
            + self.projector_online.parameters()
            + self.predictor_nn.parameters()
            + self.predictor_c.parameters()
        )

    def momentum_parameters(self) -> list[Tensor]:
        return self.encoder_momentum.parameters() + self.projector_momentum.parameters()

    def ema_pairs(self) -> list[tuple[Tensor, Tensor]]:
        online = self.encoder_online.parameters() + self.projector_online.parameters()
        momentum = self.momentum_parameters()
        return list(zip(online, momentum))


@dataclass
class EmaParams:
    m: float = 0.996
    schedule: str = "fixed"  # fixed | cosine-to-one

    def coefficient(self, step: int, total_steps: int) -> float:
        if self.schedule == "fixed":
            return self.m
        if self.schedule == "cosine-to-one":
            if total_steps <= 0:
                return self.m
            t = min(max(step / total_steps, 0.0), 1.0)
            return 1.0 - (1.0 - self.m) * (math.cos(math.pi * t) + 1.0) / 2.0
        raise ContractError(f"unknown EMA schedule {self.schedule!r}")


def clone_as_momentum(mlp: Mlp) -> Mlp:
    """Structural copy with identical values and requires_grad=False everywhere."""
    twin = object.__new__(Mlp)
    twin.spec = mlp.spec
    twin.in_dim = mlp.in_dim
    twin.out_dim = mlp.out_dim
    twin.layers = []
    twin.norms = []
    for layer, norm in zip(mlp.layers, mlp.norms):
        lcopy = object.__new__(LinearLayer)
        lcopy.weight = Tensor(layer.weight.data.copy())
        lcopy.bias = Tensor(layer.bias.data.copy()) if layer.bias is not None else None
        twin.layers.append(lcopy)
        if norm is None:
            twin.norms.append(None)
        else:
            ncopy = object.__new__(BatchNormLayer)
            ncopy.gamma = Tensor(norm.gamma.data.copy())
            ncopy.beta = Tensor(norm.beta.data.copy())
            ncopy.running_mean = norm.running_mean.copy()
            ncopy.running_var = norm.running_var.copy()
            ncopy.momentum_bn = norm.momentum_bn
            ncopy.eps = norm.eps
            twin.norms.append(ncopy)
    return twin


def ema_update(online: list[Tensor], momentum: list[Tensor], m: float) -> None:
    """In-place xi <- m*xi + (1-m)*theta; never recorded on a tape."""
    if len(online) != len(momentum):
        raise ShapeError("EMA parameter lists differ in length")
    for theta, xi in zip(online, momentum):
        if theta.data.shape != xi.data.shape:
            raise ShapeError(
                f"EMA shape mismatch: {theta.data.shape} vs {xi.data.shape}"
            )
        if m == 1.0:
            continue
        if m == 0.0:
            xi.data[...] = theta.data
            continue
        xi.data *= m
        xi.data += (1.0 - m) * theta.data
