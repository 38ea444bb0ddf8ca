"""Frozen-encoder evaluation: kNN probe, linear probe, embedding export.

Probes run on embeddings from the trained online branch (projector output by
default, raw encoder output on request) and never mutate checkpoint state.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import load_arrays
from .config import DatasetSpec, TrainConfig, config_from_dict
from .data import synthesize_dataset
from .errors import ContractError, MetricUnavailableError, ShapeError
from .support_set import nn_retrieval_accuracy
from .tensor import Tensor
from .training import TrainerState


@dataclass
class ProbeReport:
    knn_top1: float
    linear_top1: float
    nn_retrieval_top1: float
    encoder_knn_top1: float
    encoder_linear_top1: float
    train_size: int
    test_size: int
    seed: int
    embedding_source: str = "projector"


def _cosine_matrix(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    def unit(x):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.where(norms < 1e-12, 1.0, norms)

    return unit(queries) @ unit(keys).T


def knn_probe(
    embeddings_train: np.ndarray,
    labels_train: np.ndarray,
    embeddings_test: np.ndarray,
    labels_test: np.ndarray,
    k: int = 5,
) -> float:
    """Cosine k-nearest majority vote; vote ties go to the nearer neighbour."""
    if k > embeddings_train.shape[0]:
        raise ContractError(f"k={k} exceeds the {embeddings_train.shape[0]} train points")
    sims = _cosine_matrix(embeddings_test, embeddings_train)
    correct = 0
    for row, true_label in zip(sims, labels_test):
        top = np.argpartition(-row, k - 1)[:k] if k < row.size else np.arange(row.size)
        top = top[np.argsort(-row[top], kind="stable")][:k]
        votes: dict[int, int] = {}
        for idx in top:
            votes[int(labels_train[idx])] = votes.get(int(labels_train[idx]), 0) + 1
        best = max(votes.values())
        tied = {label for label, count in votes.items() if count == best}
        if len(tied) == 1:
            winner = tied.pop()
        else:
            winner = next(int(labels_train[idx]) for idx in top if int(labels_train[idx]) in tied)
        correct += int(winner == int(true_label))
    return correct / len(labels_test)


def linear_probe(
    embeddings_train: np.ndarray,
    labels_train: np.ndarray,
    embeddings_test: np.ndarray,
    labels_test: np.ndarray,
    epochs: int = 300,
    lr: float = 0.5,
) -> float:
    """Single affine layer + softmax cross-entropy, full-batch gradient descent.

    Weights start at zero, so the classifier (and its accuracy) is covariant
    under any orthogonal rotation applied to all embeddings.
    """
    classes = np.unique(labels_train)
    if classes.size < 2:
        raise ContractError("linear probe needs at least 2 classes")
    n, d = embeddings_train.shape
    c = int(classes.max()) + 1
    w = np.zeros((d, c))
    bias = np.zeros(c)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels_train] = 1.0

    x = embeddings_train
    for _ in range(epochs):
        logits = x @ w + bias
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x.T @ g)
        bias -= lr * g.sum(axis=0)

    pred = (embeddings_test @ w + bias).argmax(axis=1)
    return float((pred == labels_test).mean())


def compute_embeddings(
    state: TrainerState, inputs: Tensor, source: str = "projector"
) -> np.ndarray:
    """Eval-mode online-branch embeddings; parameters are left untouched."""
    feats = state.branches.encoder_online(inputs, "eval")
    if source == "encoder":
        return feats.data.copy()
    if source == "projector":
        return state.branches.projector_online(feats, "eval").data.copy()
    raise ContractError(f"unknown embedding source {source!r}")


def state_from_checkpoint(path: str) -> tuple[TrainerState, TrainConfig]:
    arrays, meta = load_arrays(path)
    cfg = config_from_dict(meta["config"])
    state = TrainerState(cfg)
    state.load_arrays(arrays)
    state.step_idx = int(meta.get("steps_completed", 0))
    return state, cfg


def evaluate_checkpoint(
    checkpoint_path: str,
    dataset: DatasetSpec | None = None,
    k: int = 5,
    train_fraction: float = 0.8,
    probe_seed: int = 0,
) -> ProbeReport:
    """Split a labelled dataset, probe the frozen encoder, report accuracies."""
    state, cfg = state_from_checkpoint(checkpoint_path)
    spec = dataset if dataset is not None else cfg.dataset
    inputs, labels = synthesize_dataset(spec, cfg.seed)

    m = inputs.shape[0]
    split_rng = np.random.default_rng([probe_seed, 0x5117])
    order = split_rng.permutation(m)
    cut = int(round(m * train_fraction))
    train_idx, test_idx = order[:cut], order[cut:]
    if len(train_idx) < k or len(test_idx) == 0:
        raise ContractError("probe split leaves too few points")

    proj = compute_embeddings(state, inputs, "projector")
    enc = compute_embeddings(state, inputs, "encoder")

    knn_top1 = knn_probe(proj[train_idx], labels[train_idx], proj[test_idx], labels[test_idx], k)
    lin_top1 = linear_probe(proj[train_idx], labels[train_idx], proj[test_idx], labels[test_idx])
    enc_knn = knn_probe(enc[train_idx], labels[train_idx], enc[test_idx], labels[test_idx], k)
    enc_lin = linear_probe(enc[train_idx], labels[train_idx], enc[test_idx], labels[test_idx])

    retrieval = math.nan
    if state.queue.count >= k:
        momentum_proj = state.branches.projector_momentum(
            state.branches.encoder_momentum(Tensor(inputs.data[test_idx]), "eval"), "eval"
        )
        result = state.queue.knn_query(momentum_proj.data, k)
        if result.labels is not None:
            retrieval = nn_retrieval_accuracy(result, labels[test_idx], "top1")

    return ProbeReport(
        knn_top1=knn_top1,
        linear_top1=lin_top1,
        nn_retrieval_top1=retrieval,
        encoder_knn_top1=enc_knn,
        encoder_linear_top1=enc_lin,
        train_size=len(train_idx),
        test_size=len(test_idx),
        seed=cfg.seed,
    )


def write_probe_report(report: ProbeReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_embeddings(
    checkpoint_path: str,
    out_path: str,
    dataset: DatasetSpec | None = None,
    source: str = "projector",
) -> int:
    """CSV rows (id, label, embedding floats), one per sample, fixed order."""
    state, cfg = state_from_checkpoint(checkpoint_path)
    spec = dataset if dataset is not None else cfg.dataset
    if spec.input_dim != cfg.dataset.input_dim:
        raise ShapeError(
            f"dataset width {spec.input_dim} does not match checkpoint "
            f"input width {cfg.dataset.input_dim}"
        )
    inputs, labels = synthesize_dataset(spec, cfg.seed)
    emb = compute_embeddings(state, inputs, source)
    with open(out_path, "w", encoding="utf-8") as fh:
        cols = ",".join(f"e{i}" for i in range(emb.shape[1]))
        fh.write(f"id,label,{cols}\n")
        for i in range(emb.shape[0]):
            row = ",".join(repr(v) for v in emb[i])
            fh.write(f"{i},{labels[i]},{row}\n")
    return emb.shape[0]
