"""Per-round behavioural descriptors and their 2-D planes.

Each round the server evaluates every submitted client model (plus its own
previous global model, entity "S") on the server validation set:

  * error plane: per-sample prediction residuals, flattened and scaled,
    projected with zero-anchored PCA so a perfect model sits at the origin;
  * counterfactual plane: pairwise sliced-Wasserstein distances between the
    models' counterfactual sets, embedded with classical MDS.

The scalar scores feeding the aggregation weights come straight from these
descriptors: closeness to the error-plane origin, and the reciprocal mean
counterfactual distance to the other clients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregationError
from .cfgen import JointModel
from .datasets import Dataset
from .linalg import classical_mds, pca_zero_anchored, sliced_wasserstein
from .rng import RngStream

__all__ = [
    "ClientRoundStats",
    "RoundRecord",
    "error_semantic",
    "compute_ebp",
    "compute_cbp",
    "score_error",
    "score_cf",
    "combine_scores",
    "export_trajectories",
]

SCORE_CF_CAP = 1e6
SCHEMA_VERSION = 1


def error_semantic(model: JointModel, server_val: Dataset) -> np.ndarray:
    """Scaled residual vector of a model on the server validation set.

    Per-sample (probability - one-hot) residuals are flattened to one
    (n*u,)-vector and scaled by 1/sqrt(n*u), which bounds the worst-case
    norm near 1 so the error score's unit cap is meaningful.
    """
    if server_val.n_rows == 0:
        raise ValueError("server validation set is empty")
    probs, _ = model.predict(server_val.features)
    if probs.shape != server_val.labels.shape:
        raise ValueError("prediction/label shape mismatch")
    resid = (probs - server_val.labels).ravel()
    # a poisoned model can emit non-finite probabilities; that counts as a
    # maximal per-entry error, keeping every exported value finite
    resid = np.where(np.isfinite(resid), resid, 1.0)
    return resid / np.sqrt(resid.size)


def compute_ebp(residual_rows, out_dims: int = 2) -> np.ndarray:
    """Zero-anchored PCA projection of the round's residual rows."""
    rows = np.asarray(residual_rows, dtype=np.float64)
    dims = min(out_dims, *rows.shape)
    points = pca_zero_anchored(rows, dims).projected
    if points.shape[1] < out_dims:
        points = np.pad(points, ((0, 0), (0, out_dims - points.shape[1])))
    return points


def compute_cbp(cf_feature_sets, n_projections: int, stream: RngStream):
    """Pairwise sliced-Wasserstein matrix and its 2-D MDS embedding.

    Accepts one raw counterfactual feature matrix per entity. Returns
    (l, points); l is symmetric with a zero diagonal.
    """
    sets = [np.asarray(s, dtype=np.float64) for s in cf_feature_sets]
    m = len(sets)
    l = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            d = sliced_wasserstein(sets[i], sets[j], n_projections, stream.derive("pair", i, j))
            l[i, j] = l[j, i] = d
    points = classical_mds(l, 2) if m >= 2 else np.zeros((m, 2))
    return l, points


def score_error(e_point) -> float:
    """1 - min(||e||, 1): distance from the error-plane origin, clamped."""
    norm = float(np.linalg.norm(np.asarray(e_point, dtype=np.float64)))
    return 1.0 - min(norm, 1.0)


def score_cf(l_row, n_clients: int) -> float:
    """Reciprocal mean counterfactual distance (self-distance included)."""
    row = np.asarray(l_row, dtype=np.float64)
    if np.any(row < 0):
        raise ValueError("distances must be nonnegative")
    mean = row.sum() / n_clients
    if mean <= 0.0:
        return SCORE_CF_CAP
    return min(1.0 / mean, SCORE_CF_CAP)


def combine_scores(s_error, s_cf, mode: str = "combined") -> np.ndarray:
    """Per-client score products, normalized to sum 1.

    mode selects which behavioural spaces participate: both (product), only
    the error plane, or only the counterfactual plane.
    """
    se = np.asarray(s_error, dtype=np.float64)
    sc = np.asarray(s_cf, dtype=np.float64)
    if mode == "combined":
        prod = se * sc
    elif mode == "error":
        prod = se.copy()
    elif mode == "cf":
        prod = sc.copy()
    else:
        raise ValueError(f"unknown mode {mode!r}")
    total = prod.sum()
    if total <= 0.0:
        raise AggregationError("all per-client score products are zero")
    return prod / total


# ---------------------------------------------------------------------------
# Round records
# ---------------------------------------------------------------------------


@dataclass
class ClientRoundStats:
    client_id: int
    malicious: bool
    shard_size: int
    residual_norm: float
    ebp: tuple  # (x, y)
    l_row: list  # distances to the other clients, self included
    cbp: tuple | None
    s_error: float
    s_cf: float
    s_combined: float  # this round's normalized score
    smoothed: float  # moving-average score after exclusion, renormalized
    weight: float  # aggregation weight actually applied
    val_loss: float


@dataclass
class RoundRecord:
    round: int
    clients: list
    server_ebp: tuple
    server_cbp: tuple | None
    test_accuracy: float | None
    aggregated: bool = True
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "round": self.round,
            "aggregated": self.aggregated,
            "test_accuracy": self.test_accuracy,
            "server_ebp": list(self.server_ebp),
            "server_cbp": list(self.server_cbp) if self.server_cbp is not None else None,
            "clients": [
                {
                    "client_id": c.client_id,
                    "malicious": c.malicious,
                    "shard_size": c.shard_size,
                    "residual_norm": c.residual_norm,
                    "ebp": list(c.ebp),
                    "l_row": list(c.l_row),
                    "cbp": list(c.cbp) if c.cbp is not None else None,
                    "s_error": c.s_error,
                    "s_cf": c.s_cf,
                    "s_combined": c.s_combined,
                    "smoothed": c.smoothed,
                    "weight": c.weight,
                    "val_loss": c.val_loss,
                }
                for c in self.clients
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        clients = [
            ClientRoundStats(
                client_id=c["client_id"],
                malicious=c["malicious"],
                shard_size=c["shard_size"],
                residual_norm=c["residual_norm"],
                ebp=tuple(c["ebp"]),
                l_row=list(c["l_row"]),
                cbp=tuple(c["cbp"]) if c["cbp"] is not None else None,
                s_error=c["s_error"],
                s_cf=c["s_cf"],
                s_combined=c["s_combined"],
                smoothed=c["smoothed"],
                weight=c["weight"],
                val_loss=c["val_loss"],
            )
            for c in d["clients"]
        ]
        return cls(
            round=d["round"],
            clients=clients,
            server_ebp=tuple(d["server_ebp"]),
            server_cbp=tuple(d["server_cbp"]) if d["server_cbp"] is not None else None,
            test_accuracy=d["test_accuracy"],
            aggregated=d["aggregated"],
            schema_version=d.get("schema_version", 1),
        )


# ---------------------------------------------------------------------------
# Trajectory export
# ---------------------------------------------------------------------------


def export_trajectories(records, out_dir, last_r: int = 15, make_plots: bool = True):
    """Write plane trajectories for the last rounds as CSV plus one vector
    figure per plane. Returns the list of written paths.

    Raises ValueError on an empty record list before creating any file.
    """
    from pathlib import Path

    records = list(records)
    if not records:
        raise ValueError("no round records to export")
    tail = records[-last_r:] if last_r > 0 else records
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    has_cbp = any(r.server_cbp is not None for r in tail)
    csv_path = out_dir / "trajectories.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["round", "entity_id", "plane", "x", "y", "score_error", "score_cf", "score_combined"]
        )
        for rec in tail:
            planes = ["ebp"] + (["cbp"] if rec.server_cbp is not None else [])
            for plane in planes:
                for c in rec.clients:
                    pt = c.ebp if plane == "ebp" else c.cbp
                    writer.writerow(
                        [
                            rec.round,
                            c.client_id,
                            plane,
                            repr(float(pt[0])),
                            repr(float(pt[1])),
                            repr(float(c.s_error)),
                            repr(float(c.s_cf)),
                            repr(float(c.s_combined)),
                        ]
                    )
                spt = rec.server_ebp if plane == "ebp" else rec.server_cbp
                writer.writerow(
                    [rec.round, "S", plane, repr(float(spt[0])), repr(float(spt[1])), "", "", ""]
                )
    written = [csv_path]
    if make_plots:
        from .plotting import plot_plane_trajectories

        written.extend(plot_plane_trajectories(tail, out_dir, include_cbp=has_cbp))
    return written
