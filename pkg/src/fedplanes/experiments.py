"""Experiment orchestration: single runs, attack x defense matrices, sweeps,
statistics over seeded repetitions, and report emission.

A matrix cell is one full federated run for a (attack, defense, seed)
triple. Cells with the same seed share the dataset, splits, and model
initialization (the run stream is derived from the seed alone), so defense
comparisons are paired. Cells are independent and may execute in parallel
worker processes; results do not depend on the worker count.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .aggregation import DefenseSpec
from .attacks import AttackSpec
from .cfgen import JointModel, JointModelSpec, LossWeights, save_checkpoint
from .config import ExperimentConfig
from .datasets import (
    Dataset,
    FederationSplit,
    load_csv,
    make_splits,
    partition_iid,
    partition_noniid,
    standardize,
    synth_generate,
)
from .engine import RunResult, run_federated
from .manifest import RunManifest, config_fingerprint, write_round_log
from .metrics import accuracy, mean_stderr, proximity, sparsity, validity
from .rng import RngStream

__all__ = [
    "build_model_spec",
    "prepare_split",
    "run_single",
    "run_experiment_matrix",
    "MatrixReport",
    "load_breast_dataset",
]

ATTACK_ORDER = ["none", "crafted_noise", "inverted_gradient", "label_flip", "inverted_loss"]
ATTACK_TITLES = {
    "none": "No-Attack",
    "crafted_noise": "Crafted-Noise",
    "inverted_gradient": "Inv. Grad.",
    "label_flip": "Label-Flip",
    "inverted_loss": "Inv. Loss",
}
DEFENSE_TITLES = {
    "fedavg": "FedAvg",
    "krum": "Krum",
    "median": "Median",
    "trimmed_mean": "Trim",
    "rfa": "RFA",
    "fbs(error)": "Ours (error)",
    "fbs(cf)": "Ours (cf)",
    "fbs": "Ours",
    "fbs-noma": "Ours w/o MA",
}


def load_breast_dataset() -> Dataset:
    """The bundled 569x30 breast-cancer table (via scikit-learn)."""
    from sklearn.datasets import load_breast_cancer

    raw = load_breast_cancer()
    return Dataset(
        raw.data.astype(np.float64),
        np.eye(2)[raw.target],
        list(raw.feature_names),
        np.arange(raw.target.size, dtype=np.int64),
    )


def build_model_spec(config: ExperimentConfig, input_dim: int, n_classes: int) -> JointModelSpec:
    m = config.model
    return JointModelSpec.default(
        input_dim=input_dim,
        n_classes=n_classes,
        hidden=tuple(m.hidden),
        gen_hidden=tuple(m.gen_hidden),
        latent_dim=m.latent_dim,
        weights=LossWeights(**m.loss_weights),
    )


def _load_base_dataset(config: ExperimentConfig, stream: RngStream) -> Dataset:
    d = config.dataset
    if d.kind != "csv":
        raise ValueError("only csv datasets are loaded through this path")
    if d.name == "breast" and (d.path is None or d.path == "builtin"):
        ds = load_breast_dataset()
    else:
        ds = load_csv(d.path, d.label_column)
    if d.subsample is not None and d.subsample < ds.n_rows:
        rng = stream.derive("subsample").generator()
        keep = np.sort(rng.choice(ds.n_rows, size=d.subsample, replace=False))
        ds = ds.take(keep)
    return ds


def dataset_fingerprint(config: ExperimentConfig) -> str:
    d = config.dataset
    if d.kind == "synthetic":
        blob = f"synthetic:{d.n_clients}:{d.n_per_client}:{d.alpha}".encode()
        return hashlib.sha256(blob).hexdigest()[:16]
    ds = _load_base_dataset(config, RngStream(0, "fingerprint-no-subsample"))
    return hashlib.sha256(ds.features.tobytes() + ds.labels.tobytes()).hexdigest()[:16]


def prepare_split(config: ExperimentConfig, seed: int):
    """Materialize the federation split for one seed.

    Returns (split, model_spec, n_clients_total, run_stream).
    """
    stream = RngStream(seed, "run")
    d, p = config.dataset, config.partition
    if d.kind == "synthetic":
        clients = synth_generate(
            d.n_clients,
            d.n_per_client,
            d.alpha,
            stream.derive("data"),
            iid=(p.mode == "iid"),
            n_attackers=p.n_attackers,
        )
    else:
        base = _load_base_dataset(config, stream.derive("data"))
        clusters = 0 if p.mode == "iid" else d.n_clients
        clients = partition_noniid(
            base, d.n_clients, clusters, stream.derive("part"), n_attackers=p.n_attackers
        )
    split = make_splits(
        clients,
        stream.derive("split"),
        server_val_size=config.server_val_size(),
        unfair_exclude=p.unfair_exclude,
    )
    split, _ = standardize(split)
    spec = build_model_spec(config, split.test.n_features, split.test.n_classes)
    return split, spec, len(clients), stream


def _attack_spec(config: ExperimentConfig, n_clients: int) -> AttackSpec:
    a, p = config.attack, config.partition
    if a.kind == "none" or p.n_attackers == 0:
        return AttackSpec(kind=a.kind, malicious_ids=frozenset(), beta=a.beta)
    ids = frozenset(range(n_clients - p.n_attackers, n_clients))
    return AttackSpec(kind=a.kind, malicious_ids=ids, beta=a.beta)


def _defense_spec(config: ExperimentConfig) -> DefenseSpec:
    f = config.defense
    return DefenseSpec(
        kind=f.kind,
        mode=f.mode,
        window=f.window,
        trim_fraction=f.trim_fraction,
        krum_malicious=f.krum_malicious,
    )


@dataclass
class SingleRunOutput:
    result: RunResult
    metrics: dict
    split: FederationSplit
    spec: JointModelSpec


def run_single(config: ExperimentConfig, seed: int, record_planes=None) -> SingleRunOutput:
    """One full federated run for this config and seed."""
    split, spec, n_clients, stream = prepare_split(config, seed)
    attack = _attack_spec(config, n_clients)
    defense = _defense_spec(config)
    fed = config.federation
    planes_on = fed.record_planes if record_planes is None else record_planes
    t0 = time.time()
    result = run_federated(
        spec,
        split,
        attack,
        defense,
        stream,
        rounds=fed.rounds,
        epochs=fed.local_epochs,
        learning_rate=fed.learning_rate,
        momentum=fed.momentum,
        joint_generator=fed.joint_generator,
        n_projections=fed.n_projections,
        record_planes=planes_on,
        record_test_every=fed.record_test_every,
    )
    metrics = {
        "seed": seed,
        "attack": config.attack.kind,
        "attack_beta": config.attack.beta,
        "defense": defense_label(config.defense),
        "best_round": result.best_round,
        "best_test_accuracy": result.best_test_accuracy,
        "final_test_accuracy": result.final_test_accuracy,
        "params_hash": result.params_hash,
        "malicious_ids": list(result.malicious_ids),
        "seconds": round(time.time() - t0, 2),
    }
    if fed.joint_generator:
        best_model = JointModel(spec, result.best_params)
        cf = best_model.generate_counterfactuals(split.test.features)
        metrics["validity"] = validity(cf)
        metrics["sparsity"] = sparsity(cf)
        metrics["proximity"] = proximity(cf, split.all_train())
    return SingleRunOutput(result=result, metrics=metrics, split=split, spec=spec)


def save_run(out: SingleRunOutput, run_dir, config: ExperimentConfig, seed: int,
             notes=()) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        config=config.to_dict(),
        master_seed=seed,
        dataset_fingerprint=dataset_fingerprint(config),
        notes=list(notes),
    )
    manifest.write(run_dir)
    write_round_log(run_dir / "rounds.jsonl", out.result.records)
    save_checkpoint(run_dir / "best.ckpt", out.result.best_params)
    save_checkpoint(run_dir / "final.ckpt", out.result.final_params)
    with open(run_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(out.metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(run_dir / "splits.json", "w", encoding="utf-8") as fh:
        json.dump(out.split.manifest, fh, sort_keys=True)
        fh.write("\n")
    manifest.status = "complete"
    manifest.outputs = {
        "rounds": "rounds.jsonl",
        "best_checkpoint": "best.ckpt",
        "final_checkpoint": "final.ckpt",
        "metrics": "metrics.json",
        "splits": "splits.json",
    }
    manifest.write(run_dir)


# ---------------------------------------------------------------------------
# Matrix runs
# ---------------------------------------------------------------------------


def attack_label(attack: "AttackConfig | dict | str") -> str:
    if isinstance(attack, str):
        return attack
    kind = attack["kind"] if isinstance(attack, dict) else attack.kind
    beta = attack.get("beta") if isinstance(attack, dict) else attack.beta
    if kind == "crafted_noise" and beta not in (None, 1.2):
        return f"crafted_noise(beta={beta})"
    return kind


def defense_label(defense: "DefenseConfig | dict | str") -> str:
    if isinstance(defense, str):
        return defense
    if isinstance(defense, dict):
        kind = defense["kind"]
        mode = defense.get("mode", "combined")
        window = defense.get("window", 30)
    else:
        kind, mode, window = defense.kind, defense.mode, defense.window
    if kind != "fbs":
        return kind
    label = "fbs" if mode == "combined" else f"fbs({mode})"
    if window == 1:
        label += "-noma" if mode == "combined" else "-w1"
        label = "fbs-noma" if mode == "combined" else label
    elif window != 30:
        label += f"-w{window}"
    return label


def _cell_config(config: ExperimentConfig, attack, defense) -> ExperimentConfig:
    """Specialize the base config for one matrix cell."""
    a = config.attack
    if isinstance(attack, str):
        a = replace(a, kind=attack)
    elif isinstance(attack, dict):
        a = replace(a, **attack)
    d = config.defense
    if isinstance(defense, str):
        d = replace(d, kind=defense)
    elif isinstance(defense, dict):
        d = replace(d, **defense)
    cell = replace(config, attack=a, defense=d)
    # planes are only needed where scores feed aggregation
    fed = replace(cell.federation, record_planes=(d.kind == "fbs"), record_test_every=0)
    return replace(cell, federation=fed)


def _run_cell(args):
    config, attack, defense, seed, out_dir, resume = args
    cell = _cell_config(config, attack, defense)
    name = f"{attack_label(attack)}__{defense_label(defense)}__seed{seed}"
    run_dir = Path(out_dir) / name
    fingerprint = config_fingerprint({"config": cell.to_dict(), "seed": seed})
    metrics_path = run_dir / "metrics.json"
    if resume and metrics_path.exists():
        try:
            manifest = RunManifest.read(run_dir)
            if manifest.status == "complete" and manifest.fingerprint == fingerprint:
                with open(metrics_path, "r", encoding="utf-8") as fh:
                    return name, json.load(fh), True
        except (OSError, ValueError, KeyError):
            pass
    out = run_single(cell, seed)
    save_run(out, run_dir, cell, seed)
    return name, out.metrics, False


@dataclass
class MatrixReport:
    rows: list  # defense labels, display order
    cols: list  # attack labels + "Mean"
    cells: dict  # (defense_label, attack_label) -> {"mean","stderr","values"}
    runs: dict  # run name -> metrics dict

    def accuracy_table(self, percent=True) -> list:
        scale = 100.0 if percent else 1.0
        table = []
        for r in self.rows:
            row = [DEFENSE_TITLES.get(r, r)]
            for c in self.cols:
                cell = self.cells.get((r, c))
                row.append(
                    f"{cell['mean'] * scale:.1f}±{cell['stderr'] * scale:.1f}"
                    if cell
                    else "failed"
                )
            table.append(row)
        return table


def run_experiment_matrix(
    config: ExperimentConfig,
    out_dir,
    workers: int = 1,
    resume: bool = True,
    progress=None,
) -> MatrixReport:
    """Run every (attack, defense, seed) cell and summarize accuracies.

    Failed cells are reported as failed, never silently skipped.
    """
    attacks = config.matrix.attacks or [config.attack.kind]
    defenses = config.matrix.defenses or [config.defense.kind]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = [
        (config, attack, defense, seed, out_dir, resume)
        for attack in attacks
        for defense in defenses
        for seed in config.seeds
    ]
    runs = {}
    failures = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (name, metrics, cached) in pool.map(_run_cell, jobs):
                runs[name] = metrics
                if progress:
                    progress(name, metrics, cached)
    else:
        for job in jobs:
            try:
                name, metrics, cached = _run_cell(job)
            except Exception as exc:  # surface per-cell failures in the report
                name = (
                    f"{attack_label(job[1])}__{defense_label(job[2])}__seed{job[3]}"
                )
                failures[name] = str(exc)
                if progress:
                    progress(name, {"error": str(exc)}, False)
                continue
            runs[name] = metrics
            if progress:
                progress(name, metrics, cached)

    attack_cols = [attack_label(a) for a in attacks]
    defense_rows = [defense_label(d) for d in defenses]
    cells = {}
    for d in defense_rows:
        per_attack_means = []
        for a in attack_cols:
            values = [
                runs[f"{a}__{d}__seed{s}"]["best_test_accuracy"]
                for s in config.seeds
                if f"{a}__{d}__seed{s}" in runs
            ]
            if values:
                mean, stderr = mean_stderr(values)
                cells[(d, a)] = {"mean": mean, "stderr": stderr, "values": values}
                per_attack_means.append(mean)
        if per_attack_means and len(per_attack_means) == len(attack_cols) > 1:
            # Mean column: unweighted mean over the attack-condition means;
            # its spread is the stderr of per-seed condition averages
            per_seed = []
            for s in config.seeds:
                vals = [
                    runs[f"{a}__{d}__seed{s}"]["best_test_accuracy"]
                    for a in attack_cols
                    if f"{a}__{d}__seed{s}" in runs
                ]
                if len(vals) == len(attack_cols):
                    per_seed.append(float(np.mean(vals)))
            mean = float(np.mean(per_attack_means))
            stderr = mean_stderr(per_seed)[1] if len(per_seed) > 1 else 0.0
            cells[(d, "Mean")] = {"mean": mean, "stderr": stderr, "values": per_seed}
    cols = attack_cols + (["Mean"] if len(attack_cols) > 1 else [])
    report = MatrixReport(rows=defense_rows, cols=cols, cells=cells, runs=runs)
    if failures:
        report.runs.update({k: {"error": v} for k, v in failures.items()})
    return report


def write_report(report: MatrixReport, out_dir) -> list:
    """Emit report.csv, report.txt (aligned), and report.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = report.accuracy_table()
    header = ["Defense"] + [ATTACK_TITLES.get(c, c) for c in report.cols]

    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        import csv as _csv

        writer = _csv.writer(fh)
        writer.writerow(header)
        writer.writerows(table)

    widths = [max(len(str(row[i])) for row in [header] + table) for i in range(len(header))]
    txt_path = out_dir / "report.txt"
    with open(txt_path, "w", encoding="utf-8") as fh:
        for row in [header] + table:
            fh.write("  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip())
            fh.write("\n")

    json_path = out_dir / "report.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "rows": report.rows,
                "cols": report.cols,
                "cells": {f"{d}|{a}": v for (d, a), v in report.cells.items()},
                "runs": report.runs,
            },
            fh,
            indent=1,
            sort_keys=True,
        )
        fh.write("\n")
    return [csv_path, txt_path, json_path]
