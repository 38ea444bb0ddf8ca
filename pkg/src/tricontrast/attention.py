"""Transformer encoder over neighbour sequences.

A batch of K-long neighbour sequences is summarized into one centroid per
sequence: sinusoidal positions are added, the sequences run through a stack
of post-norm encoder layers, and the position-0 output is the centroid.
The Shift operation swaps a predictor output into position 0 beforehand so
the contrasted element takes part in back-propagation; queue-sourced
elements stay detached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .nn import LinearLayer
from .tensor import (
    Tensor,
    add,
    bmm,
    concat,
    mul,
    permute,
    relu,
    reshape,
    slice_axis,
    softmax_rows,
    sqrt,
    sub,
    take_index,
    tmean,
)

LN_EPS = 1e-5

QUEUE_ORIGIN = "queue"
PREDICTOR_ORIGIN = "pred"


def sinusoidal_pe(seq_len: int, dim: int) -> Tensor:
    """PE(pos,2i)=sin(pos/10000^(2i/dim)), PE(pos,2i+1)=cos(same argument)."""
    if dim % 2 != 0:
        raise ContractError(f"positional encoding needs an even dim, got {dim}")
    pos = np.arange(seq_len)[:, None]
    i2 = np.arange(0, dim, 2)
    angle = pos / np.power(10000.0, i2 / dim)
    pe = np.zeros((seq_len, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return Tensor(pe)


class MhsaParams:
    """Query/key/value/output projections for one attention block."""

    def __init__(self, model_dim: int, num_heads: int, rng: np.random.Generator):
        if model_dim % num_heads != 0:
            raise ContractError(
                f"model dim {model_dim} not divisible by {num_heads} heads"
            )
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.wq = LinearLayer(model_dim, model_dim, rng)
        self.wk = LinearLayer(model_dim, model_dim, rng, use_bias=False)
        self.wv = LinearLayer(model_dim, model_dim, rng)
        self.wo = LinearLayer(model_dim, model_dim, rng)

    def parameters(self):
        return (
            self.wq.parameters()
            + self.wk.parameters()
            + self.wv.parameters()
            + self.wo.parameters()
        )

    def named_parameters(self, prefix):
        named = []
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            named.extend(lin.named_parameters(f"{prefix}.{name}"))
        return named


def _split_heads(x_flat: Tensor, batch: int, seq: int, heads: int, head_dim: int) -> Tensor:
    # (B*K, D) -> (B*H, K, dh)
    x = reshape(x_flat, (batch, seq, heads, head_dim))
    x = permute(x, (0, 2, 1, 3))
    return reshape(x, (batch * heads, seq, head_dim))


def _merge_heads(x: Tensor, batch: int, seq: int, heads: int, head_dim: int) -> Tensor:
    # (B*H, K, dh) -> (B*K, D)
    x = reshape(x, (batch, heads, seq, head_dim))
    x = permute(x, (0, 2, 1, 3))
    return reshape(x, (batch * seq, heads * head_dim))


def mhsa_forward(params: MhsaParams, x: Tensor, return_weights: bool = False):
    """Scaled dot-product self-attention over (K,D) or batched (B,K,D) input."""
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[2] != params.model_dim:
        raise ShapeError(f"attention expects (B,K,{params.model_dim}), got {x.shape}")
    batch, seq, dim = x.shape
    heads, head_dim = params.num_heads, params.head_dim

    flat = reshape(x, (batch * seq, dim))
    q = _split_heads(params.wq(flat), batch, seq, heads, head_dim)
    k = _split_heads(params.wk(flat), batch, seq, heads, head_dim)
    v = _split_heads(params.wv(flat), batch, seq, heads, head_dim)

    scores = mul(bmm(q, permute(k, (0, 2, 1))), Tensor(1.0 / math.sqrt(head_dim)))
    weights = softmax_rows(scores)  # (B*H, K, K), rows sum to 1
    context = _merge_heads(bmm(weights, v), batch, seq, heads, head_dim)
    out = reshape(params.wo(context), (batch, seq, dim))
    if squeeze:
        out = reshape(out, (seq, dim))
    if return_weights:
        return out, weights.data.reshape(batch, heads, seq, seq).copy()
    return out


class EncoderLayerParams:
    """Post-norm encoder layer: attention + add&norm, feed-forward + add&norm."""

    def __init__(self, model_dim: int, num_heads: int, ff_dim: int, rng: np.random.Generator):
        self.attn = MhsaParams(model_dim, num_heads, rng)
        self.ff1 = LinearLayer(model_dim, ff_dim, rng)
        self.ff2 = LinearLayer(ff_dim, model_dim, rng)
        self.ln1_gamma = Tensor(np.ones(model_dim), requires_grad=True)
        self.ln1_beta = Tensor(np.zeros(model_dim), requires_grad=True)
        self.ln2_gamma = Tensor(np.ones(model_dim), requires_grad=True)
        self.ln2_beta = Tensor(np.zeros(model_dim), requires_grad=True)

    def parameters(self):
        return (
            self.attn.parameters()
            + self.ff1.parameters()
            + self.ff2.parameters()
            + [self.ln1_gamma, self.ln1_beta, self.ln2_gamma, self.ln2_beta]
        )

    def named_parameters(self, prefix):
        named = self.attn.named_parameters(f"{prefix}.attn")
        named.extend(self.ff1.named_parameters(f"{prefix}.ff1"))
        named.extend(self.ff2.named_parameters(f"{prefix}.ff2"))
        named.extend(
            [
                (f"{prefix}.ln1_gamma", self.ln1_gamma.data),
                (f"{prefix}.ln1_beta", self.ln1_beta.data),
                (f"{prefix}.ln2_gamma", self.ln2_gamma.data),
                (f"{prefix}.ln2_beta", self.ln2_beta.data),
            ]
        )
        return named


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mean = tmean(x, axis=x.ndim - 1, keepdims=True)
    centered = sub(x, mean)
    var = tmean(mul(centered, centered), axis=x.ndim - 1, keepdims=True)
    xhat = centered / sqrt(add(var, Tensor(np.array(LN_EPS))))
    return add(mul(xhat, gamma), beta)


def encoder_layer_forward(params: EncoderLayerParams, x: Tensor) -> Tensor:
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    batch, seq, dim = x.shape
    h = layer_norm(add(x, mhsa_forward(params.attn, x)), params.ln1_gamma, params.ln1_beta)
    flat = reshape(h, (batch * seq, dim))
    ff = params.ff2(relu(params.ff1(flat)))
    out = layer_norm(add(h, reshape(ff, (batch, seq, dim))), params.ln2_gamma, params.ln2_beta)
    if squeeze:
        out = reshape(out, (seq, dim))
    return out


class TransformerEncoderParams:
    """The sequence encoder psi shared by both branches."""

    def __init__(
        self,
        model_dim: int,
        num_layers: int = 3,
        num_heads: int = 8,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.model_dim = model_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.layers = [
            EncoderLayerParams(model_dim, num_heads, 4 * model_dim, rng)
            for _ in range(num_layers)
        ]

    def parameters(self):
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def named_parameters(self, prefix="psi"):
        named = []
        for i, layer in enumerate(self.layers):
            named.extend(layer.named_parameters(f"{prefix}.layer{i}"))
        return named


@dataclass
class NeighbourSequences:
    """A batch of ordered neighbour sequences: elements (N,K,D) + origin tags.

    Queue-origin elements must be gradient-detached; a shifted sequence has
    exactly one predictor-injection element and it sits at position 0.
    """

    elements: Tensor
    origins: np.ndarray  # (N, K) array of origin strings

    def __post_init__(self):
        if self.elements.ndim != 3:
            raise ShapeError(f"sequences need (N,K,D) elements, got {self.elements.shape}")
        if self.origins.shape != self.elements.shape[:2]:
            raise ShapeError("origin tags must be one per sequence element")

    @property
    def batch(self) -> int:
        return self.elements.shape[0]

    @property
    def length(self) -> int:
        return self.elements.shape[1]

    @property
    def dim(self) -> int:
        return self.elements.shape[2]


def sequences_from_array(vectors: np.ndarray) -> NeighbourSequences:
    """Wrap detached queue vectors (N,K,D) as sequences tagged queue-origin."""
    origins = np.full(vectors.shape[:2], QUEUE_ORIGIN, dtype="<U5")
    return NeighbourSequences(Tensor(np.ascontiguousarray(vectors)), origins)


@dataclass
class CentroidBatch:
    c: Tensor  # (N, D); row i is the position-0 encoder output of sequence i


def shift(seqs: NeighbourSequences, p: Tensor) -> NeighbourSequences:
    """Drop the last neighbour and put `p` first, keeping the rest in order.

    The injected row is tagged predictor-origin so it participates in
    back-propagation; sequence length is preserved.
    """
    if seqs.length < 1:
        raise ContractError("shift needs sequences of length >= 1")
    n, k, d = seqs.elements.shape
    if p.ndim != 2 or p.shape != (n, d):
        raise ShapeError(f"shift expects p of shape ({n},{d}), got {p.shape}")
    injected = reshape(p, (n, 1, d))
    if k == 1:
        elements = injected
    else:
        kept = slice_axis(seqs.elements, 1, 0, k - 1)
        elements = concat([injected, kept], axis=1)
    origins = np.empty((n, k), dtype="<U5")
    origins[:, 0] = PREDICTOR_ORIGIN
    if k > 1:
        origins[:, 1:] = seqs.origins[:, : k - 1]
    return NeighbourSequences(elements, origins)


def centroids_from_sequences(
    psi: TransformerEncoderParams, seqs: NeighbourSequences
) -> CentroidBatch:
    """Positional encoding + encoder stack + first-position selection."""
    if seqs.dim != psi.model_dim:
        raise ShapeError(
            f"sequence dim {seqs.dim} does not match encoder dim {psi.model_dim}"
        )
    pe = sinusoidal_pe(seqs.length, seqs.dim)
    x = add(seqs.elements, pe)
    for layer in psi.layers:
        x = encoder_layer_forward(layer, x)
    return CentroidBatch(take_index(x, 0, axis=1))
