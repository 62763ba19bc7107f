"""Dense feed-forward networks with explicit forward/backward passes.

All model parameters live in one flat float64 vector (ParamVector) with a
named-segment map, which is also the unit of aggregation and attack. Each
sub-network reads its weights through named views, so backprop can
accumulate gradients from several passes into a single flat gradient.

Backward convention: for a softmax head the upstream gradient is taken
with respect to the pre-softmax logits (the fused softmax/cross-entropy
form); for every other head it is with respect to the layer output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

__all__ = [
    "Segment",
    "ParamVector",
    "LayerSpec",
    "mlp_param_shapes",
    "mlp_init",
    "mlp_forward",
    "mlp_backward",
    "cross_entropy",
    "gaussian_recon",
    "kl_diag_gaussians",
    "kl_diag_gaussians_backward",
    "OptimizerState",
    "sgd_momentum_step",
    "grad_check",
]

ACTIVATIONS = ("relu", "linear", "sigmoid", "softmax")

LOGVAR_CLIP = 15.0  # encoders clamp log-variances to +-this before exp


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamVector:
    """Flat float64 parameter vector with named, contiguous segments."""

    __slots__ = ("data", "segments", "_by_name")

    def __init__(self, data: np.ndarray, segments: list):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 1:
            raise ValueError("data must be 1-D")
        expected = 0
        for seg in segments:
            if seg.offset != expected:
                raise ValueError(f"segment {seg.name} does not tile contiguously")
            expected += seg.size
        if expected != data.size:
            raise ValueError(f"segments cover {expected} values, data has {data.size}")
        self.data = data
        self.segments = list(segments)
        self._by_name = {s.name: s for s in self.segments}

    @classmethod
    def build(cls, named_shapes) -> "ParamVector":
        segs = []
        offset = 0
        for name, shape in named_shapes:
            seg = Segment(name, offset, tuple(shape))
            segs.append(seg)
            offset += seg.size
        return cls(np.zeros(offset), segs)

    def view(self, name: str) -> np.ndarray:
        seg = self._by_name[name]
        return self.data[seg.offset : seg.offset + seg.size].reshape(seg.shape)

    def has(self, name: str) -> bool:
        return name in self._by_name

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.segments)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.data), self.segments)

    def shape_compatible(self, other: "ParamVector") -> bool:
        return self.segments == other.segments

    @property
    def size(self) -> int:
        return self.data.size

    def segment_names(self):
        return [s.name for s in self.segments]


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def mlp_param_shapes(prefix: str, specs) -> list:
    """(name, shape) pairs for the weight/bias segments of an MLP."""
    shapes = []
    for i, spec in enumerate(specs):
        shapes.append((f"{prefix}/L{i}/W", (spec.in_dim, spec.out_dim)))
        shapes.append((f"{prefix}/L{i}/b", (spec.out_dim,)))
    return shapes


def mlp_init(params: ParamVector, prefix: str, specs, stream: RngStream,
             gain: float = 1.0) -> None:
    """Uniform fan-in init, bound gain * sqrt(6 / fan_in); zero biases.

    gain 1.0 suits the ReLU stacks; the variational nets use a smaller
    gain so initial log-variances stay near zero (a full-scale init lets
    the learnable-prior KL blow up on the first steps, while an exactly
    zero head is a posterior-collapse trap under federated averaging).
    """
    rng = stream.generator()
    for i, spec in enumerate(specs):
        bound = gain * np.sqrt(6.0 / spec.in_dim)
        w = params.view(f"{prefix}/L{i}/W")
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        params.view(f"{prefix}/L{i}/b")[...] = 0.0


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mlp_forward(params: ParamVector, prefix: str, specs, batch: np.ndarray):
    """Run the network; returns (output, cache) for the matching backward."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != specs[0].in_dim:
        raise ValueError(
            f"batch has shape {x.shape}, expected (n, {specs[0].in_dim})"
        )
    for i, spec in enumerate(specs[:-1]):
        if spec.activation == "softmax":
            raise ValueError("softmax is only supported as the output activation")
        if spec.out_dim != specs[i + 1].in_dim:
            raise ValueError(f"layer {i} out_dim != layer {i + 1} in_dim")

    inputs = []
    preacts = []
    h = x
    for i, spec in enumerate(specs):
        w = params.view(f"{prefix}/L{i}/W")
        b = params.view(f"{prefix}/L{i}/b")
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        if spec.activation == "relu":
            h = np.maximum(z, 0.0)
        elif spec.activation == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-z))
        elif spec.activation == "softmax":
            h = _softmax(z)
        else:
            h = z
    cache = {"inputs": inputs, "preacts": preacts, "output": h, "n": x.shape[0]}
    return h, cache


def mlp_backward(params: ParamVector, prefix: str, specs, cache, upstream, grad: ParamVector):
    """Backprop through the cached forward pass.

    Accumulates parameter gradients into `grad` (+=) and returns the
    gradient with respect to the network input, which lets callers chain
    several networks together.
    """
    if cache is None or "inputs" not in cache:
        raise RuntimeError("stale or missing forward cache")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (cache["n"], specs[-1].out_dim):
        raise ValueError(f"upstream gradient has shape {g.shape}")

    for i in range(len(specs) - 1, -1, -1):
        spec = specs[i]
        z = cache["preacts"][i]
        if spec.activation == "relu":
            g = g * (z > 0.0)
        elif spec.activation == "sigmoid":
            s = 1.0 / (1.0 + np.exp(-z))
            g = g * s * (1.0 - s)
        # softmax head: upstream already wrt logits; linear: pass through
        w = params.view(f"{prefix}/L{i}/W")
        grad.view(f"{prefix}/L{i}/W")[...] += cache["inputs"][i].T @ g
        grad.view(f"{prefix}/L{i}/b")[...] += g.sum(axis=0)
        g = g @ w.T
    return g


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(probs: np.ndarray, onehot: np.ndarray):
    """Mean negative log-likelihood of the true class.

    Returns (loss, gradient with respect to the pre-softmax logits), the
    fused form (probs - onehot)/n.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    n = p.shape[0]
    p_true = np.clip((p * y).sum(axis=1), 1e-12, None)
    loss = float(-np.log(p_true).mean())
    return loss, (p - y) / n


def gaussian_recon(x: np.ndarray, xhat: np.ndarray):
    """Unit-variance Gaussian reconstruction NLL (up to an additive const).

    0.5 * sum over features of (x - xhat)^2, averaged over the batch.
    Returns (loss, gradient wrt xhat).
    """
    if x.shape != xhat.shape:
        raise ValueError("shape mismatch")
    n = x.shape[0]
    diff = xhat - x
    return float(0.5 * np.sum(diff**2) / n), diff / n


def kl_diag_gaussians(mu_q, logvar_q, mu_p, logvar_p) -> float:
    """KL(q || p) for diagonal Gaussians, summed over dims, batch-averaged."""
    mq, lq, mp, lp = (np.asarray(a, dtype=np.float64) for a in (mu_q, logvar_q, mu_p, logvar_p))
    if not (mq.shape == lq.shape == mp.shape == lp.shape):
        raise ValueError("all four inputs must share one shape")
    n = mq.shape[0] if mq.ndim == 2 else 1
    kl = 0.5 * (lp - lq + (np.exp(lq) + (mq - mp) ** 2) / np.exp(lp) - 1.0)
    return float(kl.sum() / n)


def kl_diag_gaussians_backward(mu_q, logvar_q, mu_p, logvar_p, coef: float = 1.0):
    """Gradients of coef * batch-averaged KL wrt all four inputs."""
    mq, lq, mp, lp = (np.asarray(a, dtype=np.float64) for a in (mu_q, logvar_q, mu_p, logvar_p))
    n = mq.shape[0] if mq.ndim == 2 else 1
    c = coef / n
    inv_vp = np.exp(-lp)
    diff = mq - mp
    g_mq = c * diff * inv_vp
    g_mp = -g_mq
    g_lq = c * 0.5 * (np.exp(lq - lp) - 1.0)
    g_lp = c * 0.5 * (1.0 - (np.exp(lq) + diff**2) * inv_vp)
    return g_mq, g_lq, g_mp, g_lp


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    velocity: np.ndarray
    learning_rate: float = 0.01
    momentum: float = 0.9

    @classmethod
    def for_params(cls, params: ParamVector, learning_rate: float = 0.01, momentum: float = 0.9):
        return cls(np.zeros(params.size), learning_rate, momentum)


def sgd_momentum_step(params: ParamVector, grad: np.ndarray, state: OptimizerState):
    """v' = momentum * v + grad; params' = params - lr * v'."""
    g = grad.data if isinstance(grad, ParamVector) else np.asarray(grad)
    if g.shape != params.data.shape or state.velocity.shape != params.data.shape:
        raise ValueError("grad/velocity must be shape-compatible with params")
    state.velocity *= state.momentum
    state.velocity += g
    params.data -= state.learning_rate * state.velocity
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(loss_fn, params: ParamVector, eps: float = 1e-5,
               max_coords: int = 200, stream: RngStream | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn(params) must return (loss, flat gradient). Checks every
    coordinate, or a seeded random subset of max_coords for large models.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, grad = loss_fn(params)
    g = grad.data if isinstance(grad, ParamVector) else np.asarray(grad)
    n = params.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        rng = (stream or RngStream(0, "gradcheck")).generator()
        coords = rng.choice(n, size=max_coords, replace=False)

    worst = 0.0
    work = params.copy()
    for idx in coords:
        orig = work.data[idx]
        work.data[idx] = orig + eps
        lp, _ = loss_fn(work)
        work.data[idx] = orig - eps
        lm, _ = loss_fn(work)
        work.data[idx] = orig
        fd = (lp - lm) / (2.0 * eps)
        denom = max(abs(fd) + abs(g[idx]), 1e-8)
        worst = max(worst, abs(fd - g[idx]) / denom)
    return worst
