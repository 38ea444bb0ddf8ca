"""Optimizer, schedules and the full training step and loop.

Each step: augment twice, run both views through both branches, retrieve
neighbour sequences once the queue is warm, build the three losses, update
the online parameters and the sequence encoder by SGD with momentum (the
encoder at its own constant learning rate), advance the momentum branch by
EMA and enqueue the fresh momentum projections.

Until the queue holds at least K entries only the redundancy term is
optimized; the neighbour and centroid terms need retrievable neighbours.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .attention import (
    NeighbourSequences,
    TransformerEncoderParams,
    centroids_from_sequences,
    shift,
)
from .checkpoint import save_arrays
from .config import TrainConfig, config_to_dict
from .data import augment, synthesize_dataset
from .errors import ContractError, NumericError
from .nn import BranchParams, EmaParams, Mlp, MlpSpec, clone_as_momentum, ema_update
from .objectives import (
    centroid_loss,
    cross_correlation,
    neighbour_loss,
    redundancy_loss,
    total_loss,
)
from .support_set import SupportSet, nn_retrieval_accuracy
from .tensor import Tape, Tensor, add, concat, mul, slice_rows

METRICS_HEADER = "step,l_total,l_nn,l_centroid,l_red,nn_retrieval_top1,lr,queue_fill,embedding_std"


@dataclass
class StepMetrics:
    step: int
    l_total: float
    l_nn: float
    l_centroid: float
    l_red: float
    nn_retrieval_top1: float
    lr: float
    queue_fill: int
    embedding_std: float

    def csv_row(self) -> str:
        return ",".join(
            [
                str(self.step),
                repr(self.l_total),
                repr(self.l_nn),
                repr(self.l_centroid),
                repr(self.l_red),
                repr(self.nn_retrieval_top1),
                repr(self.lr),
                str(self.queue_fill),
                repr(self.embedding_std),
            ]
        )


def lr_schedule(step: int, cfg: TrainConfig, group: str = "online") -> float:
    """Linear warmup then cosine decay to zero; the sequence encoder bypasses
    the schedule entirely and always gets the constant transformer rate."""
    if step < 0 or step > cfg.steps:
        raise ContractError(f"step {step} outside [0, {cfg.steps}]")
    if group == "transformer":
        return cfg.transformer_lr
    if group != "online":
        raise ContractError(f"unknown lr group {group!r}")
    scaled = cfg.base_lr * cfg.batch_size / 256.0
    if step < cfg.warmup_steps:
        return scaled * step / cfg.warmup_steps
    span = cfg.steps - cfg.warmup_steps
    if span <= 0:
        return 0.0
    t = (step - cfg.warmup_steps) / span
    return scaled * 0.5 * (1.0 + math.cos(math.pi * t))


class SgdMomentum:
    """Classic momentum SGD: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, groups: dict[str, list[Tensor]], momentum: float):
        self.groups = groups
        self.momentum = momentum
        self.velocities = {
            name: [np.zeros_like(p.data) for p in params]
            for name, params in groups.items()
        }

    def zero_grads(self) -> None:
        for params in self.groups.values():
            for p in params:
                p.grad = None

    def step(self, lrs: dict[str, float]) -> None:
        for name, params in self.groups.items():
            lr = lrs[name]
            for p, v in zip(params, self.velocities[name]):
                v *= self.momentum
                if p.grad is not None:
                    v += p.grad
                if lr != 0.0:
                    p.data -= lr * v


class TrainerState:
    """Everything the loop owns: parameters, queue, optimizer, RNG streams."""

    def __init__(self, cfg: TrainConfig):
        cfg.validate()
        self.cfg = cfg
        init_rng = np.random.default_rng([cfg.seed, 0x1417])
        model = cfg.model

        encoder = Mlp(cfg.dataset.input_dim, MlpSpec(list(model.encoder_widths)), init_rng)
        projector = Mlp(encoder.out_dim, MlpSpec(list(model.projector_widths)), init_rng)
        d = projector.out_dim
        predictor_nn = Mlp(d, MlpSpec(list(model.predictor_widths)), init_rng)
        predictor_c = Mlp(d, MlpSpec(list(model.predictor_widths)), init_rng)
        self.branches = BranchParams(
            encoder_online=encoder,
            projector_online=projector,
            predictor_nn=predictor_nn,
            predictor_c=predictor_c,
            encoder_momentum=clone_as_momentum(encoder),
            projector_momentum=clone_as_momentum(projector),
        )
        self.psi = TransformerEncoderParams(
            d, model.transformer_layers, model.transformer_heads, init_rng
        )
        self.queue = SupportSet(cfg.queue_capacity, d)
        self.optimizer = SgdMomentum(
            {"online": self.branches.online_parameters(), "transformer": self.psi.parameters()},
            cfg.sgd_momentum,
        )
        self.ema = EmaParams(cfg.ema_momentum, cfg.ema_schedule)
        self.rng = np.random.default_rng([cfg.seed, 0x5EED])
        self.step_idx = 0
        self.grid_side = (
            int(round(cfg.dataset.input_dim**0.5)) if cfg.dataset.mode == "tiny-grid" else None
        )

    def named_arrays(self) -> dict[str, np.ndarray]:
        named: list[tuple[str, np.ndarray]] = []
        b = self.branches
        named.extend(b.encoder_online.named_parameters("online.encoder"))
        named.extend(b.projector_online.named_parameters("online.projector"))
        named.extend(b.predictor_nn.named_parameters("online.predictor_nn"))
        named.extend(b.predictor_c.named_parameters("online.predictor_c"))
        named.extend(b.encoder_momentum.named_parameters("momentum.encoder"))
        named.extend(b.projector_momentum.named_parameters("momentum.projector"))
        named.extend(self.psi.named_parameters("psi"))
        arrays = dict(named)
        arrays.update(self.queue.snapshot())
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, target in self.named_arrays().items():
            if name.startswith("queue."):
                continue
            if name not in arrays:
                raise ContractError(f"checkpoint is missing array {name!r}")
            if tuple(arrays[name].shape) != tuple(target.shape):
                raise ContractError(
                    f"checkpoint array {name!r} has shape {arrays[name].shape}, "
                    f"expected {target.shape}"
                )
            target[...] = arrays[name]
        self.queue = SupportSet.restore(arrays)


def train_step(
    state: TrainerState, batch: Tensor, labels: Optional[np.ndarray], cfg: TrainConfig
) -> tuple[TrainerState, StepMetrics]:
    obj = cfg.objective
    b = state.branches
    k = cfg.k_neighbours
    step_idx = state.step_idx
    n = batch.shape[0]
    if n < 2:
        raise ContractError("training batch must hold at least 2 samples")

    with Tape() as tape:
        x1 = augment(batch, cfg.augmentation, state.rng, state.grid_side)
        x2 = augment(batch, cfg.augmentation, state.rng, state.grid_side)

        # momentum branch: plain values, no gradients anywhere
        z1m = b.projector_momentum(b.encoder_momentum(x1, "train"), "train")
        z2m = b.projector_momentum(b.encoder_momentum(x2, "train"), "train")
        # online branch
        z1o = b.projector_online(b.encoder_online(x1, "train"), "train")
        z2o = b.projector_online(b.encoder_online(x2, "train"), "train")

        cc1 = cross_correlation(z1m, z2o)
        cc2 = cross_correlation(z2m, z1o)
        l_red = redundancy_loss(cc1, cc2, obj.lambda_red)

        l_nn = None
        l_c = None
        retrieval_top1 = math.nan
        if state.queue.count >= k:
            res1 = state.queue.knn_query(z1m.data, k)
            res2 = state.queue.knn_query(z2o.data, k)
            if res1.labels is not None and labels is not None:
                retrieval_top1 = nn_retrieval_accuracy(res1, labels, "top1")

            p2 = b.predictor_nn(z2o, "train")
            pc2 = b.predictor_c(z2o, "train")
            nn1_first = Tensor(res1.vectors.elements.data[:, 0, :].copy())
            if obj.symmetrize:
                p1 = b.predictor_nn(z1o, "train")
                pc1 = b.predictor_c(z1o, "train")
                nn2_first = Tensor(res2.vectors.elements.data[:, 0, :].copy())
                l_nn = neighbour_loss(nn1_first, p2, obj.tau, nn2_first, p1)
            else:
                l_nn = neighbour_loss(nn1_first, p2, obj.tau)

            # one encoder pass over every sequence batch, then split
            seq_batches = [res1.vectors, shift(res2.vectors, pc2)]
            if obj.symmetrize:
                seq_batches += [res2.vectors, shift(res1.vectors, pc1)]
            stacked = NeighbourSequences(
                concat([s.elements for s in seq_batches], axis=0),
                np.concatenate([s.origins for s in seq_batches], axis=0),
            )
            cents = centroids_from_sequences(state.psi, stacked).c
            c1 = slice_rows(cents, 0, n)
            c2 = slice_rows(cents, n, 2 * n)
            l_c = centroid_loss(c1, c2, obj.tau)
            if obj.symmetrize:
                c1b = slice_rows(cents, 2 * n, 3 * n)
                c2b = slice_rows(cents, 3 * n, 4 * n)
                l_c = mul(add(l_c, centroid_loss(c1b, c2b, obj.tau)), Tensor(0.5))

        breakdown = total_loss(l_nn, l_c, l_red, obj)
        if not math.isfinite(breakdown.l_total):
            raise NumericError(
                "non-finite loss: "
                f"l_nn={breakdown.l_nn} l_centroid={breakdown.l_centroid} "
                f"l_red={breakdown.l_red} l_total={breakdown.l_total}"
            )

        state.optimizer.zero_grads()
        tape.backward(breakdown.total)
        for p in b.momentum_parameters():
            # momentums must never appear on a tape; an id hit here is a bug
            assert id(p) not in tape.leaf_set, "momentum parameter leaked onto the tape"

    lr_online = lr_schedule(step_idx, cfg, "online")
    lr_psi = lr_schedule(step_idx, cfg, "transformer")
    state.optimizer.step({"online": lr_online, "transformer": lr_psi})

    m = state.ema.coefficient(step_idx, cfg.steps)
    pairs = b.ema_pairs()
    ema_update([theta for theta, _ in pairs], [xi for _, xi in pairs], m)

    state.queue.enqueue_batch(z1m, labels)
    state.step_idx += 1

    metrics = StepMetrics(
        step=step_idx + 1,
        l_total=breakdown.l_total,
        l_nn=breakdown.l_nn,
        l_centroid=breakdown.l_centroid,
        l_red=breakdown.l_red,
        nn_retrieval_top1=retrieval_top1,
        lr=lr_online,
        queue_fill=state.queue.count,
        embedding_std=float(z2o.data.std(axis=0).mean()),
    )
    return state, metrics


def _batch_indices(rng: np.random.Generator, total: int, batch: int) -> Iterator[np.ndarray]:
    while True:
        order = rng.permutation(total)
        for start in range(0, total - batch + 1, batch):
            yield order[start : start + batch]


def run_training(cfg: TrainConfig) -> tuple[str, str]:
    """Seeded end-to-end loop; returns (metrics CSV path, checkpoint path).

    Outputs are byte-identical across runs with the same config and seed.
    """
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.bin")

    inputs, labels = synthesize_dataset(cfg.dataset, cfg.seed)
    state = TrainerState(cfg)
    batches = _batch_indices(state.rng, inputs.shape[0], cfg.batch_size)

    try:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write(METRICS_HEADER + "\n")
            for _ in range(cfg.steps):
                idx = next(batches)
                batch = Tensor(inputs.data[idx])
                state, metrics = train_step(state, batch, labels[idx], cfg)
                fh.write(metrics.csv_row() + "\n")
    except OSError as exc:
        raise OSError(f"failed writing metrics to {metrics_path}: {exc}") from exc

    meta = {"config": config_to_dict(cfg), "steps_completed": state.step_idx}
    try:
        save_arrays(ckpt_path, state.named_arrays(), meta)
    except OSError as exc:
        raise OSError(f"failed writing checkpoint to {ckpt_path}: {exc}") from exc
    return metrics_path, ckpt_path
