"""Command-line interface.

Subcommands: generate-data, train, planes, matrix, report. Every command
takes --seed/--out style flags, validates its config up front (listing all
problems at once), and exits nonzero if any requested work failed.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_ERROR = 1


@click.group()
def main():
    """Federated-learning simulator with behavioural-plane monitoring."""


def _load_config_or_die(config_path, seed=None):
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        for line in str(exc).split("; "):
            click.echo(f"config error: {line}", err=True)
        sys.exit(EXIT_ERROR)
    except OSError as exc:
        click.echo(f"cannot read config: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    if seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seeds=[seed])
    return cfg


def _check_out_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        click.echo(f"output directory {out} exists and is not empty (use --force)", err=True)
        sys.exit(EXIT_ERROR)


@main.command("generate-data")
@click.argument("dataset", type=click.Choice(["synthetic", "breast", "diabetes"]))
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--clients", type=int, default=10, show_default=True, help="synthetic clients")
@click.option("--samples", type=int, default=1000, show_default=True, help="samples per client")
@click.option("--alpha", type=float, default=1.0, show_default=True, help="boundary slope")
@click.option("--csv", "csv_in", type=click.Path(exists=True, path_type=Path), default=None,
              help="source CSV for the diabetes dataset")
@click.option("--label-column", default="Diabetes_binary", show_default=True)
@click.option("--force", is_flag=True)
def cmd_generate_data(dataset, out, seed, clients, samples, alpha, csv_in, label_column, force):
    """Write dataset CSVs plus a split manifest."""
    from .datasets import load_csv, save_split_manifest, make_splits, synth_generate, write_csv
    from .experiments import load_breast_dataset
    from .rng import RngStream

    _check_out_dir(out, force)
    out.mkdir(parents=True, exist_ok=True)
    stream = RngStream(seed, "generate-data")
    if dataset == "synthetic":
        client_sets = synth_generate(clients, samples, alpha, stream.derive("data"))
        for cid, ds in enumerate(client_sets):
            write_csv(out / f"client_{cid}.csv", ds, label_column="label")
        split = make_splits(client_sets, stream.derive("split"), server_val_size=250)
        save_split_manifest(out / "splits.json", split)
        click.echo(f"wrote {clients} client CSVs and splits.json to {out}")
    elif dataset == "breast":
        ds = load_breast_dataset()
        write_csv(out / "breast.csv", ds, label_column="label")
        click.echo(f"wrote breast.csv ({ds.n_rows} rows, {ds.n_features} features) to {out}")
    else:  # diabetes: normalize a user-downloaded CSV into our layout
        if csv_in is None:
            click.echo(
                "diabetes requires --csv pointing at the downloaded health-indicators "
                "file (70,692 rows, 21 features); it is not bundled",
                err=True,
            )
            sys.exit(EXIT_ERROR)
        ds = load_csv(csv_in, label_column)
        write_csv(out / "diabetes.csv", ds, label_column="label")
        click.echo(f"wrote diabetes.csv ({ds.n_rows} rows, {ds.n_features} features) to {out}")
    sys.exit(EXIT_OK)


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=None, help="override: run only this seed")
@click.option("--force", is_flag=True)
def cmd_train(config_path, out, seed, force):
    """Execute one federated run per configured seed."""
    from .experiments import run_single, save_run

    cfg = _load_config_or_die(config_path, seed)
    _check_out_dir(out, force)
    out.mkdir(parents=True, exist_ok=True)
    for s in cfg.seeds:
        run_dir = out / f"seed_{s}"
        click.echo(f"running seed {s} -> {run_dir}")
        result = run_single(cfg, s)
        notes = []
        if cfg.dataset.subsample is not None:
            notes.append(f"dataset subsampled to {cfg.dataset.subsample} rows (seeded)")
        save_run(result, run_dir, cfg, s, notes=notes)
        click.echo(
            f"  best round {result.metrics['best_round']}: "
            f"test accuracy {result.metrics['best_test_accuracy']:.4f}"
        )
    sys.exit(EXIT_OK)


@main.command("planes")
@click.option("--run", "run_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--last-rounds", type=int, default=15, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="defaults to RUN/planes")
def cmd_planes(run_dir, last_rounds, out):
    """Export plane trajectories (CSV + SVG) from a run's round log."""
    from .manifest import read_round_log
    from .planes import export_trajectories

    log_path = run_dir / "rounds.jsonl"
    if not log_path.exists():
        click.echo(f"no round log at {log_path}", err=True)
        sys.exit(EXIT_ERROR)
    records = read_round_log(log_path)
    if not records:
        click.echo("round log is empty", err=True)
        sys.exit(EXIT_ERROR)
    import math

    if not any(math.isfinite(r.server_ebp[0]) for r in records):
        click.echo("run recorded no plane data (planes disabled?)", err=True)
        sys.exit(EXIT_ERROR)
    if all(r.server_cbp is None for r in records):
        click.echo("warning: no counterfactual plane data (predictor-only run); "
                   "exporting the error plane only")
    out = out or (run_dir / "planes")
    written = export_trajectories(records, out, last_r=last_rounds)
    for path in written:
        click.echo(f"wrote {path}")
    sys.exit(EXIT_OK)


@main.command("matrix")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--workers", type=int, default=None, help="parallel runs (default: cores)")
@click.option("--resume", is_flag=True, help="skip completed cells (manifest hash match)")
@click.option("--force", is_flag=True)
def cmd_matrix(config_path, out, workers, resume, force):
    """Run the attack x defense x seed grid and emit the report."""
    import os

    from .experiments import run_experiment_matrix, write_report

    cfg = _load_config_or_die(config_path)
    if not resume:
        _check_out_dir(out, force)
    out.mkdir(parents=True, exist_ok=True)
    workers = workers or os.cpu_count() or 1
    n_cells = (
        len(cfg.matrix.attacks or [cfg.attack.kind])
        * len(cfg.matrix.defenses or [cfg.defense.kind])
        * len(cfg.seeds)
    )
    click.echo(f"{n_cells} runs scheduled (workers={workers}, resume={resume})")

    def progress(name, metrics, cached):
        if "error" in metrics:
            click.echo(f"  FAILED {name}: {metrics['error']}")
        else:
            tag = "cached" if cached else f"{metrics.get('seconds', 0.0):.0f}s"
            click.echo(f"  {name}: acc={metrics['best_test_accuracy']:.4f} ({tag})")

    report = run_experiment_matrix(cfg, out, workers=workers, resume=resume, progress=progress)
    paths = write_report(report, out)
    for path in paths:
        click.echo(f"wrote {path}")
    failed = [n for n, m in report.runs.items() if "error" in m]
    if failed:
        click.echo(f"{len(failed)} run(s) failed", err=True)
        sys.exit(EXIT_ERROR)
    sys.exit(EXIT_OK)


@main.command("report")
@click.option("--runs", "runs_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="defaults to RUNS")
def cmd_report(runs_dir, out):
    """Regenerate report files from stored run metrics (pure function of logs)."""
    from .experiments import MatrixReport, write_report
    from .metrics import mean_stderr

    runs = {}
    for metrics_path in sorted(Path(runs_dir).glob("*/metrics.json")):
        with open(metrics_path, "r", encoding="utf-8") as fh:
            runs[metrics_path.parent.name] = json.load(fh)
    if not runs:
        click.echo(f"no run metrics under {runs_dir}", err=True)
        sys.exit(EXIT_ERROR)

    by_cell = {}
    for name, metrics in runs.items():
        try:
            attack_part, defense_part, _ = name.rsplit("__", 2)
        except ValueError:
            continue
        by_cell.setdefault((defense_part, attack_part), []).append(
            metrics["best_test_accuracy"]
        )
    rows = sorted({d for d, _ in by_cell})
    cols = sorted({a for _, a in by_cell})
    cells = {}
    for (d, a), values in by_cell.items():
        mean, stderr = mean_stderr(values)
        cells[(d, a)] = {"mean": mean, "stderr": stderr, "values": values}
    for d in rows:
        means = [cells[(d, a)]["mean"] for a in cols if (d, a) in cells]
        if len(means) == len(cols) > 1:
            cells[(d, "Mean")] = {"mean": float(sum(means) / len(means)), "stderr": 0.0,
                                  "values": means}
    report = MatrixReport(
        rows=rows, cols=cols + (["Mean"] if len(cols) > 1 else []), cells=cells, runs=runs
    )
    paths = write_report(report, out or runs_dir)
    for path in paths:
        click.echo(f"wrote {path}")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
