"""Checkpoint-ensemble running average and deep-ensemble aggregation."""

from __future__ import annotations

import csv
import threading
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import EmptyEnsembleError, ShapeError


def top_two(probs: np.ndarray):
    """Argmax (lowest index on ties), max value and margin to the runner-up."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = probs.argmax(axis=1)
    rows = np.arange(probs.shape[0])
    top = probs[rows, labels]
    if probs.shape[1] == 1:
        return labels, top, top.copy()
    rest = probs.copy()
    rest[rows, labels] = -np.inf
    return labels, top, top - rest.max(axis=1)


class CheckpointEnsemble:
    """Running mean ``P`` of checkpoint softmax outputs on a fixed pool.

    Only outputs are stored, never weights.  ``update`` is serialized with a
    lock so parallel members may push checkpoints in any interleaving.

    Parameters
    ----------
    n_samples, n_classes : int
        Shape of ``P``.
    """

    def __init__(self, n_samples: int, n_classes: int):
        self.P = np.zeros((int(n_samples), int(n_classes)), dtype=np.float64)
        self.n_checkpoints = 0
        self._lock = threading.Lock()

    @property
    def shape(self):
        return self.P.shape

    def reset(self) -> "CheckpointEnsemble":
        with self._lock:
            self.P[...] = 0.0
            self.n_checkpoints = 0
        return self

    def update(self, Q) -> "CheckpointEnsemble":
        Q = np.asarray(Q, dtype=np.float64)
        if Q.shape != self.P.shape:
            raise ShapeError(f"checkpoint outputs {Q.shape} do not match state {self.P.shape}")
        with self._lock:
            n = self.n_checkpoints
            self.P = (self.P * n + Q) / (n + 1)
            self.n_checkpoints = n + 1
        return self

    def predict(self):
        """Return ``(labels, confidence, margin)`` of the current ensemble."""
        if self.n_checkpoints == 0:
            raise EmptyEnsembleError("checkpoint ensemble has no checkpoints")
        return top_two(self.P)

    def to_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_checkpoints", self.n_checkpoints])
            w.writerow([f"p{k}" for k in range(self.P.shape[1])])
            for row in self.P:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "CheckpointEnsemble":
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        n_ckpt = int(rows[0][1])
        P = np.array([[float(v) for v in r] for r in rows[2:]], dtype=np.float64)
        state = cls(*P.shape)
        state.P = P
        state.n_checkpoints = n_ckpt
        return state


def ckpt_reset(state: CheckpointEnsemble) -> CheckpointEnsemble:
    return state.reset()


def ckpt_update(state: CheckpointEnsemble, Q) -> CheckpointEnsemble:
    return state.update(Q)


def ckpt_predict(state: CheckpointEnsemble):
    return state.predict()


def deep_ensemble_probs(member_probs: Sequence) -> np.ndarray:
    """Elementwise mean of the members' probability matrices."""
    if len(member_probs) == 0:
        raise EmptyEnsembleError("deep ensemble needs at least one member")
    try:
        stack = np.stack([np.asarray(p, dtype=np.float64) for p in member_probs])
    except ValueError as exc:
        raise ShapeError(f"inconsistent member shapes: {exc}") from None
    return stack.mean(axis=0)
