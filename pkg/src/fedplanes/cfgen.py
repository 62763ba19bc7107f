"""Joint model: task predictor plus counterfactual generator.

The generator is a latent-variable model with two variational posteriors
and a shared decoder. For an input x with label y and a requested
counterfactual label y':

    q(z | x)                 input posterior        (enc_z)
    x_rec = dec(z)           reconstruction         (dec, shared)
    q(z' | z, x, y, y')      counterfactual posterior (enc_zp)
    x_cf = dec(z')           counterfactual         (dec, shared)
    p(z) = N(0, I)           fixed prior
    p(z' | z, x, y)          learnable conditional prior (prior)

The training loss is the negative evidence lower bound of the likelihood
of (x, y, y') plus a latent-distance term that keeps counterfactuals close
to their origin, every term carrying its own weight. The predictor scores
both the reconstruction and the counterfactual, so its gradients flow from
three places during joint training.

Checkpoint file layout (little-endian):
    bytes 0..5   magic b"FPCK1\\n"
    bytes 6..9   uint32 header length H
    bytes 10..   UTF-8 JSON header {"version": 1, "segments": [[name, offset,
                 shape], ...]} of length H, then float64 payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import (
    LOGVAR_CLIP,
    LayerSpec,
    ParamVector,
    cross_entropy,
    gaussian_recon,
    kl_diag_gaussians,
    kl_diag_gaussians_backward,
    mlp_backward,
    mlp_forward,
    mlp_init,
    mlp_param_shapes,
)
from .rng import RngStream

__all__ = [
    "LossWeights",
    "JointModelSpec",
    "CounterfactualSet",
    "JointModel",
    "save_checkpoint",
    "load_checkpoint",
]

GENERATOR_NETS = ("enc_z", "enc_zp", "dec", "prior")


@dataclass(frozen=True)
class LossWeights:
    recon_x: float = 1.0
    task: float = 1.0
    task_cf: float = 2.0  # < 2 leaves counterfactual validity near chance
    kl_z: float = 1.0
    kl_zprime: float = 1.0
    dz: float = 0.5


def _stack_layers(dims, head_activation):
    specs = []
    for i in range(len(dims) - 1):
        act = head_activation if i == len(dims) - 2 else "relu"
        specs.append(LayerSpec(dims[i], dims[i + 1], act))
    return specs


@dataclass(frozen=True)
class JointModelSpec:
    input_dim: int
    n_classes: int
    predictor: tuple
    enc_z: tuple
    enc_zp: tuple
    dec: tuple
    prior: tuple
    latent_dim: int
    weights: LossWeights = field(default_factory=LossWeights)

    @classmethod
    def default(
        cls,
        input_dim: int,
        n_classes: int,
        hidden=(512, 256, 256, 64),
        gen_hidden=(64, 64),
        latent_dim: int = 8,
        weights: LossWeights | None = None,
    ) -> "JointModelSpec":
        z, u, L = input_dim, n_classes, latent_dim
        return cls(
            input_dim=z,
            n_classes=u,
            predictor=tuple(_stack_layers([z, *hidden, u], "softmax")),
            enc_z=tuple(_stack_layers([z, *gen_hidden, 2 * L], "linear")),
            enc_zp=tuple(_stack_layers([L + z + 2 * u, *gen_hidden, 2 * L], "linear")),
            dec=tuple(_stack_layers([L, *gen_hidden, z], "linear")),
            prior=tuple(_stack_layers([L + z + u, *gen_hidden, 2 * L], "linear")),
            latent_dim=L,
            weights=weights or LossWeights(),
        )

    def param_shapes(self):
        shapes = []
        for prefix in ("pred", *GENERATOR_NETS):
            shapes.extend(mlp_param_shapes(prefix, getattr(self, self._attr(prefix))))
        return shapes

    @staticmethod
    def _attr(prefix: str) -> str:
        return {"pred": "predictor"}.get(prefix, prefix)

    def net(self, prefix: str):
        return getattr(self, self._attr(prefix))


@dataclass
class CounterfactualSet:
    origin: np.ndarray  # (n, z)
    counterfactual: np.ndarray  # (n, z)
    target_labels: np.ndarray  # (n,)
    predicted_labels: np.ndarray  # (n,) labels of the counterfactuals

    def __post_init__(self):
        n = self.origin.shape[0]
        if not (
            self.counterfactual.shape[0]
            == self.target_labels.shape[0]
            == self.predicted_labels.shape[0]
            == n
        ):
            raise ValueError("all fields must share one row count")


def _clip_logvar(raw: np.ndarray):
    clipped = np.clip(raw, -LOGVAR_CLIP, LOGVAR_CLIP)
    mask = (np.abs(raw) < LOGVAR_CLIP).astype(np.float64)
    return clipped, mask


class JointModel:
    """A JointModelSpec bound to one ParamVector."""

    def __init__(self, spec: JointModelSpec, params: ParamVector):
        self.spec = spec
        self.params = params

    # the generator nets start at ~torch-Linear scale (1/sqrt(fan_in)),
    # i.e. gain 1/sqrt(6) of the ReLU init used for the predictor
    GENERATOR_INIT_GAIN = 1.0 / np.sqrt(6.0)

    @classmethod
    def init(cls, spec: JointModelSpec, stream: RngStream) -> "JointModel":
        params = ParamVector.build(spec.param_shapes())
        for prefix in ("pred", *GENERATOR_NETS):
            mlp_init(
                params, prefix, spec.net(prefix), stream.derive("init", prefix),
                gain=cls.GENERATOR_INIT_GAIN if prefix in GENERATOR_NETS else 1.0,
            )
        return cls(spec, params)

    def replace_params(self, params: ParamVector) -> "JointModel":
        return JointModel(self.spec, params)

    # -- prediction --------------------------------------------------------

    def predict(self, x: np.ndarray):
        """Class probabilities and argmax labels (ties go to the lower index)."""
        probs, _ = mlp_forward(self.params, "pred", self.spec.predictor, x)
        return probs, np.argmax(probs, axis=1)

    def task_loss(self, x, y_onehot, grad: ParamVector | None = None, coef: float = 1.0):
        """Cross-entropy of the predictor on raw inputs; optional accumulation."""
        probs, cache = mlp_forward(self.params, "pred", self.spec.predictor, x)
        loss, g_logits = cross_entropy(probs, y_onehot)
        if grad is not None:
            mlp_backward(self.params, "pred", self.spec.predictor, cache, coef * g_logits, grad)
        return coef * loss

    # -- generator objective -----------------------------------------------

    def sample_noise(self, n: int, stream: RngStream):
        rng = stream.generator()
        L = self.spec.latent_dim
        return rng.standard_normal((n, L)), rng.standard_normal((n, L))

    def cfgen_loss(self, x, y_onehot, yp_onehot, noise, grad: ParamVector | None = None):
        """Weighted generator loss and (optionally) its gradient.

        noise is an (eps1, eps2) pair for the two reparameterized samples;
        pass arrays drawn from sample_noise, or fixed arrays to freeze the
        stochasticity (gradient checking, tests).
        """
        spec, params, w = self.spec, self.params, self.spec.weights
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y_onehot, dtype=np.float64)
        yp = np.asarray(yp_onehot, dtype=np.float64)
        if x.shape[0] == 0:
            raise ValueError("batch must be nonempty")
        if np.any(np.argmax(y, axis=1) == np.argmax(yp, axis=1)):
            raise ValueError("counterfactual target equals the true label on some row")
        eps1, eps2 = noise
        L = spec.latent_dim

        # forward
        enc_out, c_enc = mlp_forward(params, "enc_z", spec.enc_z, x)
        mu_z, lv_z_raw = enc_out[:, :L], enc_out[:, L:]
        lv_z, mask_z = _clip_logvar(lv_z_raw)
        sigma_z = np.exp(0.5 * lv_z)
        z = mu_z + sigma_z * eps1

        x_rec, c_dec1 = mlp_forward(params, "dec", spec.dec, z)
        p_y, c_pred1 = mlp_forward(params, "pred", spec.predictor, x_rec)

        alpha = np.hstack([z, x, y, yp])
        enc2_out, c_enc2 = mlp_forward(params, "enc_zp", spec.enc_zp, alpha)
        mu_zp, lv_zp_raw = enc2_out[:, :L], enc2_out[:, L:]
        lv_zp, mask_zp = _clip_logvar(lv_zp_raw)
        sigma_zp = np.exp(0.5 * lv_zp)
        zp = mu_zp + sigma_zp * eps2

        x_cf, c_dec2 = mlp_forward(params, "dec", spec.dec, zp)
        p_yp, c_pred2 = mlp_forward(params, "pred", spec.predictor, x_cf)

        prior_in = np.hstack([z, x, y])
        prior_out, c_prior = mlp_forward(params, "prior", spec.prior, prior_in)
        mu_pr, lv_pr_raw = prior_out[:, :L], prior_out[:, L:]
        lv_pr, mask_pr = _clip_logvar(lv_pr_raw)

        zeros = np.zeros_like(mu_z)
        recon_loss, g_rec = gaussian_recon(x, x_rec)
        task_loss, g_logits1 = cross_entropy(p_y, y)
        task_cf_loss, g_logits2 = cross_entropy(p_yp, yp)
        kl_z = kl_diag_gaussians(mu_z, lv_z, zeros, zeros)
        kl_zp = kl_diag_gaussians(mu_zp, lv_zp, mu_pr, lv_pr)
        dz_post = kl_diag_gaussians(mu_z, lv_z, mu_zp, lv_zp)
        dz_prior = kl_diag_gaussians(zeros, zeros, mu_pr, lv_pr)

        loss = (
            w.recon_x * recon_loss
            + w.task * task_loss
            + w.task_cf * task_cf_loss
            + w.kl_z * kl_z
            + w.kl_zprime * kl_zp
            + w.dz * (dz_post + dz_prior)
        )
        parts = {
            "recon": recon_loss,
            "task_rec": task_loss,
            "task_cf": task_cf_loss,
            "kl_z": kl_z,
            "kl_zprime": kl_zp,
            "dz": dz_post + dz_prior,
        }
        if grad is None:
            return loss, parts

        # backward
        g_x_cf = mlp_backward(params, "pred", spec.predictor, c_pred2, w.task_cf * g_logits2, grad)
        g_zp_path = mlp_backward(params, "dec", spec.dec, c_dec2, g_x_cf, grad)

        g_x_rec = mlp_backward(params, "pred", spec.predictor, c_pred1, w.task * g_logits1, grad)
        g_x_rec = g_x_rec + w.recon_x * g_rec
        g_z_a = mlp_backward(params, "dec", spec.dec, c_dec1, g_x_rec, grad)

        a_mzp, a_lzp, a_mpr, a_lpr = kl_diag_gaussians_backward(mu_zp, lv_zp, mu_pr, lv_pr, w.kl_zprime)
        b_mz, b_lz, b_mzp, b_lzp = kl_diag_gaussians_backward(mu_z, lv_z, mu_zp, lv_zp, w.dz)
        _, _, c_mpr, c_lpr = kl_diag_gaussians_backward(zeros, zeros, mu_pr, lv_pr, w.dz)
        d_mz, d_lz, _, _ = kl_diag_gaussians_backward(mu_z, lv_z, zeros, zeros, w.kl_z)

        g_mu_zp = g_zp_path + a_mzp + b_mzp
        g_lv_zp = (g_zp_path * (0.5 * sigma_zp * eps2) + a_lzp + b_lzp) * mask_zp
        g_alpha = mlp_backward(
            params, "enc_zp", spec.enc_zp, c_enc2, np.hstack([g_mu_zp, g_lv_zp]), grad
        )
        g_z_b = g_alpha[:, :L]

        g_prior_out = np.hstack([a_mpr + c_mpr, (a_lpr + c_lpr) * mask_pr])
        g_prior_in = mlp_backward(params, "prior", spec.prior, c_prior, g_prior_out, grad)
        g_z_c = g_prior_in[:, :L]

        g_z = g_z_a + g_z_b + g_z_c
        g_mu_z = g_z + b_mz + d_mz
        g_lv_z = (g_z * (0.5 * sigma_z * eps1) + b_lz + d_lz) * mask_z
        mlp_backward(params, "enc_z", spec.enc_z, c_enc, np.hstack([g_mu_z, g_lv_z]), grad)
        return loss, parts

    # -- counterfactual generation ------------------------------------------

    def generate_counterfactuals(self, x, targets=None) -> CounterfactualSet:
        """Deterministic counterfactuals from posterior means (no sampling).

        Without explicit targets the rule is opposite-of-prediction, which
        requires binary data.
        """
        spec, params = self.spec, self.params
        x = np.asarray(x, dtype=np.float64)
        probs, pred_labels = self.predict(x)
        u = spec.n_classes
        if targets is None:
            if u != 2:
                raise ValueError("opposite-of-prediction rule needs binary data")
            targets = 1 - pred_labels
        else:
            targets = np.asarray(targets, dtype=np.int64)
        L = spec.latent_dim
        eye = np.eye(u)
        y_hat = eye[pred_labels]
        y_tgt = eye[targets]

        enc_out, _ = mlp_forward(params, "enc_z", spec.enc_z, x)
        mu_z = enc_out[:, :L]
        alpha = np.hstack([mu_z, x, y_hat, y_tgt])
        enc2_out, _ = mlp_forward(params, "enc_zp", spec.enc_zp, alpha)
        mu_zp = enc2_out[:, :L]
        x_cf, _ = mlp_forward(params, "dec", spec.dec, mu_zp)
        _, cf_labels = self.predict(x_cf)
        return CounterfactualSet(
            origin=x,
            counterfactual=x_cf,
            target_labels=targets,
            predicted_labels=cf_labels,
        )

    # -- personalization ------------------------------------------------------

    def generator_mask(self) -> np.ndarray:
        """1.0 on generator segments, 0.0 on predictor segments."""
        mask = np.zeros(self.params.size)
        for seg in self.params.segments:
            if not seg.name.startswith("pred/"):
                mask[seg.offset : seg.offset + seg.size] = 1.0
        return mask

    def personalize(self, x, y_onehot, epochs: int, stream: RngStream,
                    learning_rate: float = 0.01, momentum: float = 0.9) -> "JointModel":
        """Fine-tune only the generator on local data; predictor frozen."""
        from .nn import OptimizerState, sgd_momentum_step

        if epochs < 0:
            raise ValueError("epochs must be >= 0")
        params = self.params.copy()
        model = JointModel(self.spec, params)
        if epochs == 0:
            return model
        y = np.asarray(y_onehot, dtype=np.float64)
        yp = _opposite_onehot(y)
        mask = model.generator_mask()
        state = OptimizerState.for_params(params, learning_rate, momentum)
        for epoch in range(epochs):
            noise = model.sample_noise(x.shape[0], stream.derive("personalize", epoch))
            grad = params.zeros_like()
            model.cfgen_loss(x, y, yp, noise, grad)
            grad.data *= mask
            sgd_momentum_step(params, grad.data, state)
        return model


def _opposite_onehot(y_onehot: np.ndarray) -> np.ndarray:
    if y_onehot.shape[1] != 2:
        raise ValueError("opposite labels are only defined for binary data")
    return y_onehot[:, ::-1].copy()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"FPCK1\n"


def save_checkpoint(path, params: ParamVector) -> None:
    header = json.dumps(
        {
            "version": 1,
            "segments": [[s.name, s.offset, list(s.shape)] for s in params.segments],
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(params.data.astype("<f8").tobytes())


def load_checkpoint(path) -> ParamVector:
    from .nn import Segment

    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError("not a model checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        segments = [Segment(n, o, tuple(s)) for n, o, s in header["segments"]]
        total = sum(seg.size for seg in segments)
        data = np.frombuffer(fh.read(total * 8), dtype="<f8").astype(np.float64)
    return ParamVector(data, segments)
