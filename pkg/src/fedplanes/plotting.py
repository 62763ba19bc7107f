"""Static vector figures for plane trajectories and report tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

# deterministic SVG output (stable element ids, no timestamps)
matplotlib.rcParams["svg.hashsalt"] = "fedplanes"

_HONEST_CMAP = plt.get_cmap("tab10")


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_plane_trajectories(records, out_dir, include_cbp: bool = True):
    """One SVG per plane: per-client polylines over the recorded rounds.

    Honest clients are colored by id, malicious clients drawn in red, and
    the server trajectory is black with an "S" marker at the latest round.
    """
    out_dir = Path(out_dir)
    paths = []
    planes = ["ebp"] + (["cbp"] if include_cbp else [])
    for plane in planes:
        fig, ax = plt.subplots(figsize=(6.0, 5.0))
        clients = records[-1].clients
        for idx, c in enumerate(clients):
            xs, ys = [], []
            for rec in records:
                pt = rec.clients[idx].ebp if plane == "ebp" else rec.clients[idx].cbp
                if pt is None:
                    continue
                xs.append(pt[0])
                ys.append(pt[1])
            color = "red" if c.malicious else _HONEST_CMAP(idx % 10)
            label = f"client {c.client_id}" + (" (attacker)" if c.malicious else "")
            ax.plot(xs, ys, "-o", color=color, markersize=2.5, linewidth=1.0, label=label)
            if xs:
                ax.annotate(str(c.client_id), (xs[-1], ys[-1]), fontsize=8, color=color)
        sx, sy = [], []
        for rec in records:
            pt = rec.server_ebp if plane == "ebp" else rec.server_cbp
            if pt is None:
                continue
            sx.append(pt[0])
            sy.append(pt[1])
        ax.plot(sx, sy, "-s", color="black", markersize=3, linewidth=1.2, label="server")
        if sx:
            ax.annotate("S", (sx[-1], sy[-1]), fontsize=10, fontweight="bold")
        first, last = records[0].round, records[-1].round
        title = "Error behavioural plane" if plane == "ebp" else "Counterfactual behavioural plane"
        ax.set_title(f"{title} (rounds {first}-{last})")
        ax.set_xlabel("component 1")
        ax.set_ylabel("component 2")
        ax.legend(fontsize=7, loc="best")
        ax.grid(alpha=0.3)
        path = out_dir / f"{plane}.svg"
        _save(fig, path)
        paths.append(path)
    return paths


def plot_accuracy_curves(curves, out_path, title="Test accuracy per round"):
    """curves: mapping label -> (rounds, accuracies)."""
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    for label, (xs, ys) in curves.items():
        ax.plot(xs, ys, linewidth=1.2, label=label)
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, Path(out_path))
    return Path(out_path)
