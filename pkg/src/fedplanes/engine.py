"""The federated round engine.

One round: broadcast the global parameters, let every selected client train
locally (attackers substitute their poisoned submission), score the
submissions on the server validation set when the defense needs it, then
aggregate and advance. All client work draws from "client:k:round:t"
substreams, so results do not depend on scheduling order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .aggregation import (
    AggregationError,
    DefenseSpec,
    ScoreWindow,
    aggregate_fedavg,
    aggregate_krum,
    aggregate_median,
    aggregate_rfa,
    aggregate_trimmed_mean,
    fbs_scores,
)
from .attacks import (
    AttackSpec,
    attack_crafted_noise,
    attack_inverted_gradient,
    attack_label_flip,
)
from .cfgen import JointModel, JointModelSpec
from .datasets import Dataset, FederationSplit
from .nn import OptimizerState, ParamVector, sgd_momentum_step
from .planes import (
    ClientRoundStats,
    RoundRecord,
    combine_scores,
    compute_cbp,
    compute_ebp,
    error_semantic,
    score_cf,
    score_error,
)
from .rng import RngStream

__all__ = ["ServerState", "RunResult", "local_train", "run_round", "run_federated"]


@dataclass
class ServerState:
    global_params: ParamVector
    previous_global: ParamVector | None
    round: int
    score_windows: list  # one ScoreWindow per client
    records: list = field(default_factory=list)
    best_round: int = -1
    best_val_loss: float = float("inf")
    best_params: ParamVector | None = None


@dataclass
class RunResult:
    records: list
    final_params: ParamVector
    best_params: ParamVector
    best_round: int
    best_val_loss: float
    best_test_accuracy: float
    final_test_accuracy: float
    malicious_ids: tuple
    params_hash: str


def _joint_objective(model: JointModel, x, y, stream: RngStream,
                     joint_generator: bool, invert_task: bool):
    """Loss value and gradient of one full-batch training step."""
    grad = model.params.zeros_like()
    task_coef = -model.spec.weights.task if invert_task else model.spec.weights.task
    loss = model.task_loss(x, y, grad, coef=task_coef)
    if joint_generator:
        yp = y[:, ::-1].copy()  # binary opposite labels
        noise = model.sample_noise(x.shape[0], stream)
        gen_loss, _ = model.cfgen_loss(x, y, yp, noise, grad)
        loss += gen_loss
    return loss, grad


def local_train(
    spec: JointModelSpec,
    global_params: ParamVector,
    shard: Dataset,
    epochs: int,
    stream: RngStream,
    learning_rate: float = 0.01,
    momentum: float = 0.9,
    joint_generator: bool = True,
    invert_task: bool = False,
) -> ParamVector:
    """Full-batch SGD-with-momentum from the global parameters.

    One gradient step per epoch (the batch is the whole shard). Returns the
    updated copy; epochs == 0 returns the global parameters unchanged.
    """
    if shard.n_rows == 0:
        raise ValueError("empty training shard")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    params = global_params.copy()
    model = JointModel(spec, params)
    state = OptimizerState.for_params(params, learning_rate, momentum)
    x, y = shard.features, shard.labels
    for epoch in range(epochs):
        _, grad = _joint_objective(
            model, x, y, stream.derive("epoch", epoch), joint_generator, invert_task
        )
        sgd_momentum_step(params, grad.data, state)
    return params


def _validation_loss(model: JointModel, x, y, joint_generator: bool) -> float:
    """Client-reported loss of a model: the training objective, with the
    generator part evaluated at posterior means (no sampling noise)."""
    loss = model.task_loss(x, y)
    if joint_generator and x.shape[0] > 0:
        zeros = np.zeros((x.shape[0], model.spec.latent_dim))
        gen_loss, _ = model.cfgen_loss(x, y, y[:, ::-1].copy(), (zeros, zeros))
        loss += gen_loss
    return loss


def _client_submission(
    spec: JointModelSpec,
    server: ServerState,
    shard: Dataset,
    client_id: int,
    attack: AttackSpec,
    stream: RngStream,
    epochs: int,
    learning_rate: float,
    momentum: float,
    joint_generator: bool,
) -> ParamVector:
    cstream = stream.derive("client", client_id, "round", server.round)
    if attack.is_malicious(client_id):
        if attack.kind == "crafted_noise":
            return attack_crafted_noise(server.global_params, attack.beta, cstream.derive("noise"))
        if attack.kind == "inverted_gradient":
            return attack_inverted_gradient(server.global_params, server.previous_global)
        if attack.kind == "inverted_loss":
            return local_train(
                spec, server.global_params, shard, epochs, cstream,
                learning_rate, momentum, joint_generator, invert_task=True,
            )
        # label_flip: the shard arrives already flipped; train normally
    return local_train(
        spec, server.global_params, shard, epochs, cstream,
        learning_rate, momentum, joint_generator,
    )


_CF_SATURATION = 1e9


def _sanitize_features(mat: np.ndarray) -> np.ndarray:
    """Clamp hostile model outputs into a huge finite box.

    A model emitting NaN/inf counterfactuals lands maximally far from every
    honest set instead of breaking the distance computation.
    """
    return np.clip(
        np.nan_to_num(mat, nan=_CF_SATURATION, posinf=_CF_SATURATION, neginf=-_CF_SATURATION),
        -_CF_SATURATION,
        _CF_SATURATION,
    )


def _evaluate_planes(spec, submissions, server_params, server_val, stream,
                     joint_generator, n_projections):
    """Residual/counterfactual descriptors for clients plus the server."""
    models = [JointModel(spec, p) for p in submissions]
    server_model = JointModel(spec, server_params)
    residuals = np.stack(
        [error_semantic(m, server_val) for m in models]
        + [error_semantic(server_model, server_val)]
    )
    ebp_points = compute_ebp(residuals)
    resid_norms = np.linalg.norm(residuals, axis=1)

    l_full = None
    cbp_points = None
    if joint_generator:
        cf_sets = [
            _sanitize_features(m.generate_counterfactuals(server_val.features).counterfactual)
            for m in models
        ] + [
            _sanitize_features(
                server_model.generate_counterfactuals(server_val.features).counterfactual
            )
        ]
        l_full, cbp_points = compute_cbp(cf_sets, n_projections, stream)
    return resid_norms, ebp_points, l_full, cbp_points


def run_round(
    spec: JointModelSpec,
    server: ServerState,
    split: FederationSplit,
    shards,  # effective per-client train Datasets (attack-adjusted)
    attack: AttackSpec,
    defense: DefenseSpec,
    stream: RngStream,
    epochs: int = 2,
    learning_rate: float = 0.01,
    momentum: float = 0.9,
    joint_generator: bool = True,
    n_projections: int = 100,
    record_planes: bool = True,
    record_test: bool = True,
    test_set: Dataset | None = None,
):
    """Execute one communication round and append its record."""
    k = len(shards)
    t = server.round
    submissions = [
        _client_submission(
            spec, server, shards[cid], cid, attack, stream,
            epochs, learning_rate, momentum, joint_generator,
        )
        for cid in range(k)
    ]
    sizes = np.array([s.n_rows for s in shards], dtype=np.float64)

    need_planes = record_planes or defense.needs_planes
    resid_norms = ebp_points = l_full = cbp_points = None
    s_err = s_cf_arr = raw_combined = None
    if need_planes:
        resid_norms, ebp_points, l_full, cbp_points = _evaluate_planes(
            spec, submissions, server.global_params, split.server_val,
            stream.derive("planes", t), joint_generator, n_projections,
        )
        s_err = np.array([score_error(ebp_points[i]) for i in range(k)])
        if l_full is not None:
            s_cf_arr = np.array([score_cf(l_full[i, :k], k) for i in range(k)])
        else:
            s_cf_arr = np.ones(k)
        mode = defense.mode if defense.kind == "fbs" else "combined"
        if l_full is None and defense.kind == "fbs" and defense.mode != "error":
            mode = "error"  # predictor-only runs have no counterfactual plane
        try:
            raw_combined = combine_scores(s_err, s_cf_arr, mode)
        except AggregationError:
            raw_combined = None

    aggregated = True
    weights = np.zeros(k)
    smoothed = np.zeros(k)
    if defense.kind == "fbs":
        try:
            if raw_combined is None:
                raise AggregationError("all score products are zero")
            smoothed = fbs_scores(raw_combined, server.score_windows)
            weights = smoothed
            new_global = aggregate_fedavg(submissions, weights)
        except AggregationError:
            aggregated = False
            new_global = server.global_params.copy()
    else:
        if raw_combined is not None:
            # keep score trails in the logs for non-score defenses too
            try:
                smoothed = fbs_scores(raw_combined, server.score_windows)
            except AggregationError:
                smoothed = np.zeros(k)
        if defense.kind == "fedavg":
            new_global = aggregate_fedavg(submissions, sizes)
            weights = sizes / sizes.sum()
        elif defense.kind == "median":
            new_global = aggregate_median(submissions)
        elif defense.kind == "trimmed_mean":
            n_trim = int(round(defense.trim_fraction * k))
            n_trim = max(0, min(n_trim, (k - 1) // 2))
            new_global = aggregate_trimmed_mean(submissions, n_trim)
        elif defense.kind == "krum":
            new_global = aggregate_krum(submissions, defense.krum_malicious)
        elif defense.kind == "rfa":
            new_global = aggregate_rfa(
                submissions, sizes, tol=defense.rfa_tol, max_iter=defense.rfa_max_iter
            )
        else:  # pragma: no cover
            raise ValueError(defense.kind)

    # post-aggregation bookkeeping: per-client validation losses of the new
    # global model drive best-round selection
    new_model = JointModel(spec, new_global)
    val_losses = np.array(
        [
            _validation_loss(new_model, c.val.features, c.val.labels, joint_generator)
            for c in split.clients
        ]
    )
    weighted_val = float(np.average(val_losses, weights=sizes))
    if weighted_val < server.best_val_loss:
        server.best_val_loss = weighted_val
        server.best_round = t
        server.best_params = new_global.copy()

    test_accuracy = None
    if record_test and test_set is not None:
        _, pred = new_model.predict(test_set.features)
        test_accuracy = float(np.mean(pred == test_set.class_indices))

    clients_stats = []
    for cid in range(k):
        clients_stats.append(
            ClientRoundStats(
                client_id=cid,
                malicious=attack.is_malicious(cid),
                shard_size=int(sizes[cid]),
                residual_norm=float(resid_norms[cid]) if resid_norms is not None else float("nan"),
                ebp=tuple(ebp_points[cid]) if ebp_points is not None else (float("nan"),) * 2,
                l_row=l_full[cid, :k].tolist() if l_full is not None else [],
                cbp=tuple(cbp_points[cid]) if cbp_points is not None else None,
                s_error=float(s_err[cid]) if s_err is not None else float("nan"),
                s_cf=float(s_cf_arr[cid]) if s_cf_arr is not None else float("nan"),
                s_combined=float(raw_combined[cid]) if raw_combined is not None else 0.0,
                smoothed=float(smoothed[cid]),
                weight=float(weights[cid]),
                val_loss=float(val_losses[cid]),
            )
        )
    record = RoundRecord(
        round=t,
        clients=clients_stats,
        server_ebp=tuple(ebp_points[k]) if ebp_points is not None else (float("nan"),) * 2,
        server_cbp=tuple(cbp_points[k]) if cbp_points is not None else None,
        test_accuracy=test_accuracy,
        aggregated=aggregated,
    )
    server.records.append(record)
    server.previous_global = server.global_params
    server.global_params = new_global
    server.round = t + 1
    return record


def run_federated(
    spec: JointModelSpec,
    split: FederationSplit,
    attack: AttackSpec,
    defense: DefenseSpec,
    stream: RngStream,
    rounds: int = 200,
    epochs: int = 2,
    learning_rate: float = 0.01,
    momentum: float = 0.9,
    joint_generator: bool = True,
    n_projections: int = 100,
    record_planes: bool = True,
    record_test_every: int = 1,
    round_callback=None,
) -> RunResult:
    """Run a full training: init, `rounds` rounds, best-model selection."""
    model = JointModel.init(spec, stream.derive("init"))
    server = ServerState(
        global_params=model.params,
        previous_global=None,
        round=0,
        score_windows=[ScoreWindow(defense.window) for _ in split.clients],
    )
    shards = []
    for cid, client in enumerate(split.clients):
        shard = client.train
        if attack.kind == "label_flip" and attack.is_malicious(cid):
            shard = attack_label_flip(shard)
        shards.append(shard)
    # label-flip attackers self-report losses on their flipped validation data
    eval_split = split
    if attack.kind == "label_flip" and attack.malicious_ids:
        from dataclasses import replace as _replace
        from .datasets import ClientShard

        eval_clients = [
            ClientShard(c.train, attack_label_flip(c.val))
            if attack.is_malicious(cid)
            else c
            for cid, c in enumerate(split.clients)
        ]
        eval_split = _replace(split, clients=eval_clients)

    for t in range(rounds):
        record_test = record_test_every > 0 and (
            t % record_test_every == 0 or t == rounds - 1
        )
        run_round(
            spec, server, eval_split, shards, attack, defense, stream,
            epochs=epochs, learning_rate=learning_rate, momentum=momentum,
            joint_generator=joint_generator, n_projections=n_projections,
            record_planes=record_planes, record_test=record_test,
            test_set=split.test,
        )
        if round_callback is not None:
            round_callback(server.records[-1])

    final_model = JointModel(spec, server.global_params)
    _, pred = final_model.predict(split.test.features)
    final_acc = float(np.mean(pred == split.test.class_indices))
    best_params = server.best_params if server.best_params is not None else server.global_params
    best_model = JointModel(spec, best_params)
    _, pred_b = best_model.predict(split.test.features)
    best_acc = float(np.mean(pred_b == split.test.class_indices))
    return RunResult(
        records=server.records,
        final_params=server.global_params,
        best_params=best_params,
        best_round=server.best_round,
        best_val_loss=server.best_val_loss,
        best_test_accuracy=best_acc,
        final_test_accuracy=final_acc,
        malicious_ids=tuple(sorted(attack.malicious_ids)),
        params_hash=hashlib.sha256(server.global_params.data.tobytes()).hexdigest(),
    )
