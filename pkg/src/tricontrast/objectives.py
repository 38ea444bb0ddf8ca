"""The three contrastive losses and their weighted fusion.

Neighbour and centroid terms are temperature-scaled InfoNCE over in-batch
negatives; the feature term drives two cross-correlation matrices toward
identity. The fused objective is sigma*L_nn + kappa*L_centroid + eta*L_red.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (
    Tensor,
    add,
    l2_normalize,
    log,
    matmul,
    mul,
    sqrt,
    sub,
    exp,
    tsum,
    transpose,
)


@dataclass
class ObjectiveParams:
    tau: float = 0.2
    lambda_red: float = 0.5
    sigma: float = 0.5
    kappa: float = 0.5
    eta: float = 5.0
    symmetrize: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("temperature must be strictly positive")
        if min(self.lambda_red, self.sigma, self.kappa, self.eta) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_nn: float
    l_centroid: float
    l_red: float
    l_total: float
    total: Tensor  # tape-bearing scalar; backward() runs from here


def info_nce(anchors: Tensor, candidates: Tensor, tau: float) -> Tensor:
    """Mean over rows of -log softmax similarity, positives on the diagonal.

    Rows are unit-normalized internally (idempotent for already-normalized
    input), so similarities are cosines.
    """
    if anchors.ndim != 2 or anchors.shape != candidates.shape:
        raise ShapeError(
            f"paired (N,D) batches required, got {anchors.shape} and {candidates.shape}"
        )
    n = anchors.shape[0]
    if n < 2:
        raise ContractError("contrastive loss needs a batch of at least 2 (no negatives)")
    a = l2_normalize(anchors, axis=1)
    c = l2_normalize(candidates, axis=1)
    logits = mul(matmul(a, transpose(c)), Tensor(1.0 / tau))
    row_max = Tensor(np.max(logits.data, axis=1, keepdims=True))
    z = sub(logits, row_max)
    lse = add(log(tsum(exp(z), axis=1, keepdims=True)), row_max)  # (N,1)
    diag = tsum(mul(logits, Tensor(np.eye(n))), axis=1, keepdims=True)
    return mul(tsum(sub(lse, diag)), Tensor(1.0 / n))


def neighbour_loss(
    nn1: Tensor,
    p2: Tensor,
    tau: float,
    nn2: Optional[Tensor] = None,
    p1: Optional[Tensor] = None,
) -> Tensor:
    """Contrast retrieved neighbours against predicted views.

    The neighbour side is detached (it came from the queue). Passing the
    swapped pair (nn2, p1) averages both view assignments.
    """
    loss = info_nce(nn1.detach(), p2, tau)
    if (nn2 is None) != (p1 is None):
        raise ContractError("symmetrized neighbour loss needs both nn2 and p1")
    if nn2 is not None:
        swapped = info_nce(nn2.detach(), p1, tau)
        loss = mul(add(loss, swapped), Tensor(0.5))
    return loss


def centroid_loss(c1: Tensor, c2: Tensor, tau: float, symmetrize: bool = False) -> Tensor:
    """InfoNCE over centroid pairs with in-batch negatives.

    No detaching happens here: queue elements were detached before entering
    the sequence encoder, and gradient is allowed to reach the encoder
    through both centroid batches.
    """
    loss = info_nce(c1, c2, tau)
    if symmetrize:
        loss = mul(add(loss, info_nce(c2, c1, tau)), Tensor(0.5))
    return loss


def cross_correlation(z1: Tensor, z2: Tensor, return_flags: bool = False):
    """Feature-by-feature cosine similarity between two projection batches.

    Columns are L2-normalized along the batch axis; all-zero columns pass the
    normalization guard untouched (and are reported via the flags).
    """
    if z1.ndim != 2 or z1.shape != z2.shape:
        raise ShapeError(f"paired (N,D) batches required, got {z1.shape} and {z2.shape}")
    if z1.shape[0] < 2:
        raise ContractError("cross-correlation needs a batch of at least 2")
    z1n, flags1 = l2_normalize(z1, axis=0, return_flags=True)
    z2n, flags2 = l2_normalize(z2, axis=0, return_flags=True)
    cc = matmul(transpose(z1n), z2n)
    if return_flags:
        return cc, flags1 | flags2
    return cc


def redundancy_loss(cc1: Tensor, cc2: Tensor, lambda_red: float) -> Tensor:
    """Pull diagonals to one and off-diagonals to zero, both terms RMS-style."""
    d = cc1.shape[0]
    if cc1.ndim != 2 or cc1.shape != (d, d) or cc2.shape != (d, d):
        raise ShapeError(f"square matrices of equal size required, got {cc1.shape} and {cc2.shape}")
    if d < 2:
        raise ContractError("redundancy loss needs D >= 2 (off-diagonal term)")
    eye = Tensor(np.eye(d))
    off_mask = Tensor(1.0 - np.eye(d))

    diag_dev1 = sub(eye, mul(cc1, eye))
    diag_dev2 = sub(eye, mul(cc2, eye))
    # (1 - cc_ii)^2 summed via masked squares; masked entries contribute 0
    on_sum = add(
        tsum(mul(mul(diag_dev1, diag_dev1), eye)),
        tsum(mul(mul(diag_dev2, diag_dev2), eye)),
    )
    on_term = sqrt(mul(on_sum, Tensor(1.0 / (2.0 * d))))

    off_sum = add(
        tsum(mul(mul(cc1, cc1), off_mask)),
        tsum(mul(mul(cc2, cc2), off_mask)),
    )
    off_term = sqrt(mul(off_sum, Tensor(1.0 / (2.0 * d * (d - 1)))))
    return add(on_term, mul(off_term, Tensor(lambda_red)))


def total_loss(
    l_nn: Optional[Tensor],
    l_centroid: Optional[Tensor],
    l_red: Tensor,
    params: ObjectiveParams,
) -> LossBreakdown:
    """Fuse the component losses; absent terms (queue warm-up) are skipped."""
    total = mul(l_red, Tensor(params.eta))
    if l_nn is not None:
        total = add(total, mul(l_nn, Tensor(params.sigma)))
    if l_centroid is not None:
        total = add(total, mul(l_centroid, Tensor(params.kappa)))
    return LossBreakdown(
        l_nn=l_nn.item() if l_nn is not None else math.nan,
        l_centroid=l_centroid.item() if l_centroid is not None else math.nan,
        l_red=l_red.item(),
        l_total=total.item(),
        total=total,
    )
