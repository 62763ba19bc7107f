"""Poisoning attacks applied by designated malicious clients.

Data poisoning (label_flip, inverted_loss) changes what a malicious client
trains on or toward; model poisoning (crafted_noise, inverted_gradient)
replaces the submitted parameters outright. Honest clients are never
touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset
from .nn import ParamVector
from .rng import RngStream

__all__ = [
    "AttackSpec",
    "ATTACK_KINDS",
    "attack_label_flip",
    "attack_crafted_noise",
    "attack_inverted_gradient",
]

ATTACK_KINDS = ("none", "label_flip", "inverted_loss", "crafted_noise", "inverted_gradient")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    malicious_ids: frozenset = field(default_factory=frozenset)
    beta: float = 1.2  # crafted-noise scale factor

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    def is_malicious(self, client_id: int) -> bool:
        return self.kind != "none" and client_id in self.malicious_ids


def attack_label_flip(shard: Dataset) -> Dataset:
    """Invert every binary label (y -> 1 - y); features untouched."""
    if shard.n_classes != 2:
        raise ValueError("label flipping is defined for binary labels")
    return Dataset(
        shard.features, shard.labels[:, ::-1].copy(), shard.feature_names, shard.row_ids
    )


def attack_crafted_noise(global_params: ParamVector, beta: float, stream: RngStream) -> ParamVector:
    """Resubmit the received model plus N(0, beta * sigma) noise.

    sigma is the standard deviation over the whole flat parameter vector;
    beta = 0 returns the model unchanged.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    out = global_params.copy()
    if beta == 0.0:
        return out
    sigma = float(np.std(global_params.data))
    noise = stream.generator().normal(0.0, beta * sigma, size=out.size)
    out.data += noise
    return out


def attack_inverted_gradient(
    global_params: ParamVector, previous_global: ParamVector | None
) -> ParamVector:
    """Submit w_t minus the server's last improvement (w_t - w_{t-1}).

    With no previous round the attacker can only replay w_t.
    """
    if previous_global is None:
        return global_params.copy()
    out = global_params.copy()
    delta = global_params.data - previous_global.data
    out.data -= delta
    return out
