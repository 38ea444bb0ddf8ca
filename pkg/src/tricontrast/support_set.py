"""Fixed-capacity FIFO queue of past projections with exact top-K retrieval.

Vectors are unit-normalized on insert and detached from any tape, so cosine
similarity is a plain dot product and queue contents never receive
gradients. Class labels ride along for metrics only; the training path
never reads them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import NeighbourSequences, sequences_from_array
from .errors import (
    InsufficientQueueError,
    MetricUnavailableError,
    NumericError,
    ShapeError,
)
from .tensor import NORM_EPS, Tensor


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norms < NORM_EPS, x, x / np.where(norms < NORM_EPS, 1.0, norms))


@dataclass
class RetrievalResult:
    indices: np.ndarray  # (N, k) buffer slots, similarity-descending per row
    similarities: np.ndarray  # (N, k) non-increasing along k
    vectors: NeighbourSequences  # detached queue vectors, origin-tagged
    labels: Optional[np.ndarray]  # (N, k) or None when the queue is unlabelled
    steps: np.ndarray  # (N, k) insertion steps of the retrieved entries


class SupportSet:
    """Ring buffer over (vector, optional label, insertion step) triples."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ShapeError("support set needs positive capacity and dim")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim))
        self.labels = np.full(capacity, -1, dtype=np.int64)
        self.steps = np.full(capacity, -1, dtype=np.int64)
        self.count = 0
        self._next = 0
        self._insert_counter = 0
        self._has_labels = True  # falsified by any unlabelled insert

    def enqueue_batch(self, z, labels: Optional[np.ndarray] = None) -> "SupportSet":
        """Normalize, detach and append a batch, evicting the oldest entries."""
        data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != self.dim:
            raise ShapeError(f"expected (N,{self.dim}) batch, got {data.shape}")
        if not np.isfinite(data).all():
            raise NumericError("refusing to enqueue non-finite vectors")
        vecs = _normalize_rows(data.copy())
        n = vecs.shape[0]
        if labels is None:
            self._has_labels = False
            batch_labels = np.full(n, -1, dtype=np.int64)
        else:
            batch_labels = np.asarray(labels, dtype=np.int64)
            if batch_labels.shape != (n,):
                raise ShapeError("labels must be one per enqueued vector")
        for i in range(n):
            slot = self._next
            self.buffer[slot] = vecs[i]
            self.labels[slot] = batch_labels[i]
            self.steps[slot] = self._insert_counter
            self._insert_counter += 1
            self._next = (self._next + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)
        return self

    def live_slots(self) -> np.ndarray:
        """Slots of surviving entries in chronological (oldest-first) order."""
        if self.count < self.capacity:
            return np.arange(self.count)
        return np.concatenate([np.arange(self._next, self.capacity), np.arange(self._next)])

    def knn_query(self, queries, k: int) -> RetrievalResult:
        """Exact top-k by cosine similarity; ties go to the older entry."""
        if self.count < k:
            raise InsufficientQueueError(
                f"queue holds {self.count} entries, need at least {k}"
            )
        qdata = queries.data if isinstance(queries, Tensor) else np.asarray(queries, dtype=np.float64)
        if qdata.ndim != 2 or qdata.shape[1] != self.dim:
            raise ShapeError(f"expected (N,{self.dim}) queries, got {qdata.shape}")
        if not np.isfinite(qdata).all():
            raise NumericError("knn query received non-finite vectors")

        chron = self.live_slots()
        qn = _normalize_rows(qdata.copy())
        sims = qn @ self.buffer[chron].T  # columns already oldest-first
        n, count = sims.shape

        indices = np.empty((n, k), dtype=np.int64)  # positions into chron
        for row in range(n):
            srow = sims[row]
            if count == k:
                cand = np.arange(count)
            else:
                cand = np.argpartition(-srow, k - 1)[:k]
                # an excluded candidate tied with the included minimum may
                # out-rank it by age; fall back to an exact full sort
                kth = srow[cand].min()
                if np.count_nonzero(srow >= kth) > k:
                    cand = np.arange(count)
            order = np.lexsort((cand, -srow[cand]))[:k]
            indices[row] = cand[order]

        row_sims = np.take_along_axis(sims, indices, axis=1)
        slots = chron[indices]
        vectors = self.buffer[slots]
        labels = self.labels[slots] if self._has_labels else None
        return RetrievalResult(
            indices=slots,
            similarities=row_sims,
            vectors=sequences_from_array(vectors),
            labels=labels,
            steps=self.steps[slots],
        )

    def snapshot(self) -> dict[str, np.ndarray]:
        return {
            "queue.buffer": self.buffer,
            "queue.labels": self.labels,
            "queue.steps": self.steps,
            "queue.state": np.array(
                [self.count, self._next, self._insert_counter, int(self._has_labels)],
                dtype=np.int64,
            ),
        }

    @classmethod
    def restore(cls, arrays: dict[str, np.ndarray]) -> "SupportSet":
        buffer = arrays["queue.buffer"]
        qs = cls(buffer.shape[0], buffer.shape[1])
        qs.buffer = buffer.astype(np.float64).copy()
        qs.labels = arrays["queue.labels"].astype(np.int64).copy()
        qs.steps = arrays["queue.steps"].astype(np.int64).copy()
        count, nxt, counter, has_labels = arrays["queue.state"].astype(np.int64)
        qs.count = int(count)
        qs._next = int(nxt)
        qs._insert_counter = int(counter)
        qs._has_labels = bool(has_labels)
        return qs

    def dump_csv(self, path: str) -> None:
        """Offline-inspection dump: one row per live entry, oldest first."""
        with open(path, "w", encoding="utf-8") as fh:
            dims = ",".join(f"v{i}" for i in range(self.dim))
            fh.write(f"{dims},label,step\n")
            for slot in self.live_slots():
                vec = ",".join(repr(v) for v in self.buffer[slot])
                fh.write(f"{vec},{self.labels[slot]},{self.steps[slot]}\n")


def nn_retrieval_accuracy(
    result: RetrievalResult, query_labels: np.ndarray, mode: str = "top1"
) -> float:
    """Fraction of retrievals hitting the query's class (rank 1 or any-of-k)."""
    if result.labels is None:
        raise MetricUnavailableError("queue entries carry no labels")
    query_labels = np.asarray(query_labels, dtype=np.int64)
    if query_labels.shape != (result.labels.shape[0],):
        raise ShapeError("need one query label per retrieval row")
    if mode == "top1":
        hits = result.labels[:, 0] == query_labels
    elif mode == "anyk":
        hits = (result.labels == query_labels[:, None]).any(axis=1)
    else:
        raise ShapeError(f"unknown retrieval-accuracy mode {mode!r}")
    return float(hits.mean())
