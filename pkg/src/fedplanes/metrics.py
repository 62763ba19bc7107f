"""Counterfactual quality metrics, accuracy, and run statistics."""

from __future__ import annotations

import numpy as np

from .cfgen import CounterfactualSet, JointModel
from .datasets import Dataset

__all__ = [
    "accuracy",
    "validity",
    "proximity",
    "sparsity",
    "relative_proximity_change",
    "select_best_round",
    "mean_stderr",
]


def accuracy(model: JointModel, test: Dataset) -> float:
    """Fraction of argmax predictions matching the labels."""
    if test.n_rows == 0:
        raise ValueError("empty test set")
    _, pred = model.predict(test.features)
    return float(np.mean(pred == test.class_indices))


def validity(cf_set: CounterfactualSet) -> float:
    """Fraction of counterfactuals classified as their target label."""
    if cf_set.origin.shape[0] == 0:
        raise ValueError("empty counterfactual set")
    return float(np.mean(cf_set.predicted_labels == cf_set.target_labels))


def proximity(cf_set: CounterfactualSet, train: Dataset) -> float:
    """Mean distance from each counterfactual to the nearest training
    sample carrying its target label."""
    if cf_set.origin.shape[0] == 0:
        raise ValueError("empty counterfactual set")
    labels = train.class_indices
    dists = np.empty(cf_set.origin.shape[0])
    for i, (xc, tgt) in enumerate(zip(cf_set.counterfactual, cf_set.target_labels)):
        pool = train.features[labels == tgt]
        if pool.shape[0] == 0:
            raise ValueError(f"no training samples with label {tgt}")
        dists[i] = np.min(np.linalg.norm(pool - xc, axis=1))
    return float(dists.mean())


def sparsity(cf_set: CounterfactualSet) -> float:
    """Mean Euclidean distance between each input and its counterfactual."""
    if cf_set.origin.shape[0] == 0:
        raise ValueError("empty counterfactual set")
    return float(np.mean(np.linalg.norm(cf_set.origin - cf_set.counterfactual, axis=1)))


def relative_proximity_change(p_global: float, p_local: float) -> float:
    """(P_global - P_local) / P_global; positive when adaptation helps."""
    if p_global <= 0:
        raise ValueError("P_global must be positive")
    return (p_global - p_local) / p_global


def select_best_round(records) -> int:
    """Round with the lowest sample-count-weighted client validation loss.

    Ties resolve to the earliest round.
    """
    records = list(records)
    if not records:
        raise ValueError("no records")
    best_round = records[0].round
    best_loss = float("inf")
    for rec in records:
        sizes = np.array([c.shard_size for c in rec.clients], dtype=np.float64)
        losses = np.array([c.val_loss for c in rec.clients])
        loss = float(np.average(losses, weights=sizes))
        if loss < best_loss:
            best_loss = loss
            best_round = rec.round
    return best_round


def mean_stderr(values) -> tuple:
    """Sample mean and standard error (n-1 denominator)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no values")
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / np.sqrt(arr.size))
