"""Self-contained numerical kernels.

Dense float64 matrices only. Everything here is a pure function of its
inputs plus an explicit RngStream where randomness is involved, so results
are reproducible and safe to call from parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream

__all__ = [
    "kmeans",
    "PcaResult",
    "pca_zero_anchored",
    "classical_mds",
    "sliced_wasserstein",
    "geometric_median",
]


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# KMeans
# ---------------------------------------------------------------------------


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with an existing centroid
            centroids[j] = points[int(rng.integers(n))]
            continue
        probs = d2 / total
        idx = int(rng.choice(n, p=probs))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans(points, k: int, stream: RngStream, max_iter: int = 100):
    """Lloyd's algorithm with seeded k-means++ initialization.

    Returns (assignments, centroids). Deterministic for a fixed stream;
    iterates until assignments stop changing or max_iter.
    """
    pts = _as_matrix(points, "points")
    n = pts.shape[0]
    if n == 0:
        raise ValueError("kmeans requires at least one point")
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")

    rng = stream.generator()
    centroids = _kmeanspp_init(pts, k, rng)
    assignments = np.full(n, -1, dtype=np.int64)
    prev_sse = np.inf
    for _ in range(max_iter):
        d2 = (
            np.sum(pts**2, axis=1)[:, None]
            - 2.0 * pts @ centroids.T
            + np.sum(centroids**2, axis=1)[None, :]
        )
        new_assign = np.argmin(d2, axis=1)
        sse = float(np.take_along_axis(d2, new_assign[:, None], axis=1).sum())
        # Lloyd iterations never increase the within-cluster SSE
        assert sse <= prev_sse + 1e-9 * max(1.0, abs(prev_sse)), "SSE increased"
        prev_sse = sse
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(k):
            mask = assignments == j
            if mask.any():
                centroids[j] = pts[mask].mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centroid
                far = int(np.argmax(np.min(d2, axis=1)))
                centroids[j] = pts[far]
    return assignments, centroids


# ---------------------------------------------------------------------------
# Zero-anchored PCA
# ---------------------------------------------------------------------------


@dataclass
class PcaResult:
    projected: np.ndarray  # (n, out_dims)
    components: np.ndarray  # (out_dims, d), orthonormal rows
    rank_deficient: bool  # True when zero-padded components were needed


def pca_zero_anchored(rows, out_dims: int) -> PcaResult:
    """Principal directions of the uncentered row matrix.

    No mean subtraction, so the all-zero vector always maps to the origin.
    Component signs are fixed by making each component's largest-magnitude
    entry positive.
    """
    x = _as_matrix(rows, "rows")
    n, d = x.shape
    if n < 1:
        raise ValueError("need at least one row")
    if out_dims < 1 or out_dims > min(n, d):
        raise ValueError(f"out_dims must be in [1, {min(n, d)}], got {out_dims}")

    _, s, vt = np.linalg.svd(x, full_matrices=False)
    tol = max(n, d) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    components = np.zeros((out_dims, d))
    take = min(out_dims, rank)
    components[:take] = vt[:take]
    for row in components[:take]:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return PcaResult(
        projected=x @ components.T,
        components=components,
        rank_deficient=take < out_dims,
    )


# ---------------------------------------------------------------------------
# Classical MDS (Torgerson)
# ---------------------------------------------------------------------------


def classical_mds(dist, out_dims: int) -> np.ndarray:
    """Embed a symmetric zero-diagonal distance matrix into out_dims coords.

    Double-centers the squared distances and takes the top eigenpairs.
    Exact when the input is Euclidean-embeddable in out_dims dimensions.
    """
    d = _as_matrix(dist, "dist")
    n = d.shape[0]
    if d.shape[1] != n:
        raise ValueError("distance matrix must be square")
    if not np.allclose(d, d.T, rtol=0.0, atol=1e-9):
        raise ValueError("distance matrix must be symmetric")
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    if not np.allclose(np.diag(d), 0.0, atol=1e-9):
        raise ValueError("distance matrix must have a zero diagonal")
    if out_dims < 1:
        raise ValueError("out_dims must be >= 1")

    d2 = d**2
    j = np.eye(n) - np.full((n, n), 1.0 / n)
    b = -0.5 * j @ d2 @ j
    evals, evecs = np.linalg.eigh(b)
    order = np.argsort(evals)[::-1][:out_dims]
    lam = np.clip(evals[order], 0.0, None)
    coords = evecs[:, order] * np.sqrt(lam)[None, :]
    if coords.shape[1] < out_dims:
        coords = np.pad(coords, ((0, 0), (0, out_dims - coords.shape[1])))
    for c in range(coords.shape[1]):
        col = coords[:, c]
        if col.any():
            jmax = int(np.argmax(np.abs(col)))
            if col[jmax] < 0:
                coords[:, c] = -col
    return coords


# ---------------------------------------------------------------------------
# Sliced Wasserstein distance
# ---------------------------------------------------------------------------


def sliced_wasserstein(a, b, n_projections: int, stream: RngStream) -> float:
    """Average 1-D W1 distance over random unit projection directions.

    Equal sample counts use the exact sort-and-difference form; unequal
    counts are matched by linear quantile interpolation on a midpoint grid.
    """
    xa = _as_matrix(a, "a")
    xb = _as_matrix(b, "b")
    if xa.shape[1] != xb.shape[1]:
        raise ValueError(f"column mismatch: {xa.shape[1]} vs {xb.shape[1]}")
    if xa.shape[0] < 1 or xb.shape[0] < 1:
        raise ValueError("each input needs at least one row")
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")

    rng = stream.generator()
    dirs = rng.standard_normal((n_projections, xa.shape[1]))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    dirs /= norms

    pa = np.sort(xa @ dirs.T, axis=0)  # (na, P)
    pb = np.sort(xb @ dirs.T, axis=0)  # (nb, P)
    na, nb = pa.shape[0], pb.shape[0]
    if na == nb:
        w1 = np.abs(pa - pb).mean(axis=0)
    else:
        m = max(na, nb)
        q = (np.arange(m) + 0.5) / m
        qa = _quantiles(pa, q)
        qb = _quantiles(pb, q)
        w1 = np.abs(qa - qb).mean(axis=0)
    return float(w1.mean())


def _quantiles(sorted_cols: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Linear-interpolated quantiles of pre-sorted columns at levels q."""
    n = sorted_cols.shape[0]
    pos = (np.arange(n) + 0.5) / n
    out = np.empty((q.size, sorted_cols.shape[1]))
    for c in range(sorted_cols.shape[1]):
        out[:, c] = np.interp(q, pos, sorted_cols[:, c])
    return out


# ---------------------------------------------------------------------------
# Geometric median (Weiszfeld)
# ---------------------------------------------------------------------------


def geometric_median(points, weights=None, tol: float = 1e-6, max_iter: int = 100) -> np.ndarray:
    """Weighted geometric median via Weiszfeld iterations.

    An iterate colliding with an input point is perturbed by tol before
    continuing. Stops when the step norm drops below tol.
    """
    pts = _as_matrix(points, "points")
    n = pts.shape[0]
    if n == 0:
        raise ValueError("need at least one point")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError("weights must have one entry per point")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative and not all zero")
    if n == 1:
        return pts[0].copy()

    y = np.average(pts, axis=0, weights=w)
    for _ in range(max_iter):
        dists = np.linalg.norm(pts - y, axis=1)
        if np.any(dists < tol):
            y = y + tol  # standard collision safeguard
            dists = np.linalg.norm(pts - y, axis=1)
            dists[dists < tol] = tol
        inv = w / dists
        y_new = (inv[:, None] * pts).sum(axis=0) / inv.sum()
        if np.linalg.norm(y_new - y) < tol:
            return y_new
        y = y_new
    return y
