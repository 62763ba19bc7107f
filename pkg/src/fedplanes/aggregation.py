"""Server-side aggregation: plain averaging, robust baselines, and
behavioural-score weighting with moving-average smoothing and exclusion.

All aggregators take a list of shape-compatible ParamVectors and return a
fresh ParamVector. They are permutation-invariant over (client, weight)
pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import geometric_median
from .nn import ParamVector

__all__ = [
    "AggregationError",
    "DefenseSpec",
    "ScoreWindow",
    "aggregate_fedavg",
    "aggregate_median",
    "aggregate_trimmed_mean",
    "aggregate_krum",
    "aggregate_rfa",
    "fbs_scores",
]

EXCLUSION_THRESHOLD = 1e-7


class AggregationError(RuntimeError):
    """Raised when no aggregate can be produced (e.g. every client excluded)."""


@dataclass(frozen=True)
class DefenseSpec:
    """Which aggregation rule the server applies.

    kind: fedavg | median | trimmed_mean | krum | rfa | fbs
    mode (fbs): combined | error | cf
    window (fbs): moving-average length; 1 disables smoothing
    """

    kind: str = "fedavg"
    mode: str = "combined"
    window: int = 30
    trim_fraction: float = 0.2  # trimmed_mean: fraction of clients cut per side
    krum_malicious: int = 1  # krum: assumed number of malicious clients
    rfa_tol: float = 1e-6
    rfa_max_iter: int = 100

    def __post_init__(self):
        if self.kind not in ("fedavg", "median", "trimmed_mean", "krum", "rfa", "fbs"):
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.mode not in ("combined", "error", "cf"):
            raise ValueError(f"unknown fbs mode {self.mode!r}")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def needs_planes(self) -> bool:
        return self.kind == "fbs"


def _stack(params_list) -> np.ndarray:
    if not params_list:
        raise ValueError("empty parameter list")
    first = params_list[0]
    for p in params_list[1:]:
        if not first.shape_compatible(p):
            raise ValueError("parameter vectors are not shape-compatible")
    return np.stack([p.data for p in params_list])


def _like(template: ParamVector, data: np.ndarray) -> ParamVector:
    return ParamVector(data, template.segments)


def aggregate_fedavg(params_list, weights) -> ParamVector:
    """Coordinatewise weighted mean; weights normalize to 1."""
    mat = _stack(params_list)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (mat.shape[0],):
        raise ValueError("one weight per parameter vector required")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive sum")
    w = w / w.sum()
    return _like(params_list[0], w @ mat)


def aggregate_median(params_list) -> ParamVector:
    """Coordinatewise median (mean of the middle two for even counts)."""
    mat = _stack(params_list)
    return _like(params_list[0], np.median(mat, axis=0))


def aggregate_trimmed_mean(params_list, n_trim: int) -> ParamVector:
    """Per coordinate, drop the n_trim largest and smallest, mean the rest."""
    mat = _stack(params_list)
    k = mat.shape[0]
    if n_trim < 0 or 2 * n_trim >= k:
        raise ValueError(f"cannot trim {n_trim} from each side of {k} clients")
    if n_trim == 0:
        return _like(params_list[0], mat.mean(axis=0))
    part = np.sort(mat, axis=0)[n_trim : k - n_trim]
    return _like(params_list[0], part.mean(axis=0))


def aggregate_krum(params_list, n_malicious: int) -> ParamVector:
    """Classic single-Krum: the vector closest to its K-m-2 nearest neighbors.

    Ties break toward the lowest client index; the winner is returned as a
    copy of that client's vector.
    """
    mat = _stack(params_list)
    k = mat.shape[0]
    n_neighbors = k - n_malicious - 2
    if n_neighbors < 1:
        raise ValueError(f"krum needs K - m - 2 >= 1 (K={k}, m={n_malicious})")
    sq = np.sum((mat[:, None, :] - mat[None, :, :]) ** 2, axis=2)
    scores = np.empty(k)
    for i in range(k):
        dists = np.delete(sq[i], i)
        scores[i] = np.sort(dists)[:n_neighbors].sum()
    winner = int(np.argmin(scores))
    return params_list[winner].copy()


def aggregate_rfa(params_list, weights, tol: float = 1e-6, max_iter: int = 100) -> ParamVector:
    """Weighted geometric median over the flat parameter vectors."""
    mat = _stack(params_list)
    w = np.asarray(weights, dtype=np.float64)
    return _like(params_list[0], geometric_median(mat, w, tol=tol, max_iter=max_iter))


# ---------------------------------------------------------------------------
# Behavioural-score defense
# ---------------------------------------------------------------------------


@dataclass
class ScoreWindow:
    """Bounded FIFO of a client's normalized behavioural scores."""

    capacity: int
    history: list = field(default_factory=list)

    def push(self, score: float) -> None:
        if not (0.0 <= score <= 1.0 + 1e-12):
            raise ValueError(f"score {score} outside [0, 1]")
        self.history.append(float(score))
        if len(self.history) > self.capacity:
            del self.history[0]

    def mean(self) -> float:
        if not self.history:
            raise ValueError("empty window")
        return float(np.mean(self.history))

    def any_below(self, threshold: float) -> bool:
        return any(s < threshold for s in self.history)


def fbs_scores(raw_scores, windows) -> np.ndarray:
    """Smooth per-client scores, apply hard exclusion, renormalize.

    raw_scores are this round's normalized scores in [0, 1]; each is pushed
    into its client's window. The smoothed score is the mean over the
    entries present (shorter during warm-up). A client whose window holds
    any entry below 1e-7 is zeroed out. Survivors renormalize to sum 1.
    """
    raw = np.asarray(raw_scores, dtype=np.float64)
    if len(windows) != raw.size:
        raise ValueError("one window per client required")
    if np.any(raw < 0) or np.any(raw > 1.0 + 1e-12):
        raise ValueError("raw scores must lie in [0, 1]")
    smoothed = np.empty(raw.size)
    for k, window in enumerate(windows):
        window.push(raw[k])
        smoothed[k] = 0.0 if window.any_below(EXCLUSION_THRESHOLD) else window.mean()
    total = smoothed.sum()
    if total <= 0.0:
        raise AggregationError("all clients excluded by behavioural scores")
    return smoothed / total
