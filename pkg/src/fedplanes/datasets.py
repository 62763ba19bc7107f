"""Dataset synthesis, CSV ingestion, partitioning, and split management.

A Dataset carries a float64 feature matrix, one-hot labels, and the
original row indices, which every split operation preserves so that
disjointness and exact reruns can be checked from the outside.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import kmeans
from .rng import RngStream

__all__ = [
    "Dataset",
    "ClientShard",
    "FederationSplit",
    "ParseError",
    "synth_generate",
    "load_csv",
    "write_csv",
    "standardize",
    "partition_noniid",
    "partition_iid",
    "make_splits",
]


class ParseError(ValueError):
    """CSV cell or label that cannot be interpreted."""


@dataclass
class Dataset:
    features: np.ndarray  # (n, z)
    labels: np.ndarray  # (n, u) one-hot
    feature_names: list
    row_ids: np.ndarray  # (n,) original indices, unique federation-wide

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on row count")
        if self.row_ids.shape[0] != self.features.shape[0]:
            raise ValueError("row_ids must match row count")
        rowsum = self.labels.sum(axis=1)
        if self.labels.size and not (
            np.all(rowsum == 1.0) and np.all((self.labels == 0) | (self.labels == 1))
        ):
            raise ValueError("labels must be one-hot")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def class_indices(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.features[idx], self.labels[idx], self.feature_names, self.row_ids[idx]
        )

    @staticmethod
    def concat(parts) -> "Dataset":
        parts = list(parts)
        return Dataset(
            np.vstack([p.features for p in parts]),
            np.vstack([p.labels for p in parts]),
            parts[0].feature_names,
            np.concatenate([p.row_ids for p in parts]),
        )


@dataclass
class ClientShard:
    train: Dataset
    val: Dataset


@dataclass
class FederationSplit:
    clients: list  # list[ClientShard]
    test: Dataset
    server_val: Dataset
    transformed: bool = False
    manifest: dict = field(default_factory=dict)  # shard -> row-id lists

    def all_train(self) -> Dataset:
        return Dataset.concat([c.train for c in self.clients])


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def synth_generate(
    n_clients: int,
    n_per_client: int = 1000,
    alpha: float = 1.0,
    stream: RngStream | None = None,
    iid: bool = False,
    n_attackers: int = 0,
) -> list:
    """Per-client 2-feature datasets on [-5, 5]^2 with a linear boundary.

    Non-IID mode gives client i the i-th of n_clients equal angular sectors
    about the origin; IID mode draws every client uniformly from the whole
    square. Attacker clients (appended last) always draw from the whole
    square, matching the average-client distribution. Label is 1 iff
    x1 > alpha * x2.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    stream = stream or RngStream(0, "synth")

    datasets = []
    total = n_clients + n_attackers
    for cid in range(total):
        rng = stream.derive("client", cid).generator()
        whole_square = iid or cid >= n_clients
        if whole_square:
            pts = rng.uniform(-5.0, 5.0, size=(n_per_client, 2))
        else:
            lo = -np.pi + cid * 2.0 * np.pi / n_clients
            hi = lo + 2.0 * np.pi / n_clients
            rows = []
            needed = n_per_client
            while needed > 0:
                cand = rng.uniform(-5.0, 5.0, size=(max(4 * needed, 64), 2))
                ang = np.arctan2(cand[:, 1], cand[:, 0])
                keep = cand[(ang >= lo) & (ang < hi)]
                rows.append(keep[:needed])
                needed -= min(needed, keep.shape[0])
            pts = np.vstack(rows)
        y = (pts[:, 0] > alpha * pts[:, 1]).astype(np.int64)
        labels = np.eye(2)[y]
        row_ids = np.arange(n_per_client, dtype=np.int64) + cid * n_per_client
        datasets.append(Dataset(pts, labels, ["x1", "x2"], row_ids))
    return datasets


def synth_slice_of(point, n_clients: int) -> int:
    """Index of the angular sector containing a 2-D point."""
    ang = np.arctan2(point[1], point[0])
    return min(int((ang + np.pi) / (2.0 * np.pi / n_clients)), n_clients - 1)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def load_csv(path, label_column: str, label_values=None) -> Dataset:
    """Read a header+comma CSV into a Dataset.

    All non-label columns must be numeric. Label values are mapped to class
    indices in sorted order unless an explicit ordering is given; a label
    outside that ordering is a ParseError.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file")
        if label_column not in header:
            raise ParseError(f"{path}: label column {label_column!r} not in header")
        label_idx = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != label_idx]

        rows = []
        raw_labels = []
        for rownum, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise ParseError(f"{path}:{rownum}: expected {len(header)} cells")
            vals = []
            for colnum, cell in enumerate(rec):
                if colnum == label_idx:
                    raw_labels.append(cell.strip())
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}:{rownum}: column {header[colnum]!r}: "
                        f"non-numeric value {cell!r}"
                    ) from None
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")

    if label_values is None:
        classes = sorted(set(raw_labels))
    else:
        classes = [str(v) for v in label_values]
    class_of = {c: i for i, c in enumerate(classes)}
    try:
        y = np.array([class_of[v] for v in raw_labels], dtype=np.int64)
    except KeyError as exc:
        raise ParseError(f"{path}: unknown label value {exc.args[0]!r}") from None

    features = np.asarray(rows, dtype=np.float64)
    labels = np.eye(len(classes))[y]
    return Dataset(features, labels, feature_names, np.arange(len(rows), dtype=np.int64))


def write_csv(path, dataset: Dataset, label_column: str = "label") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*dataset.feature_names, label_column])
        classes = dataset.class_indices
        for i in range(dataset.n_rows):
            writer.writerow([repr(float(v)) for v in dataset.features[i]] + [int(classes[i])])


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


def standardize(split: FederationSplit):
    """Z-score all shards using pooled client-train statistics.

    Zero-variance features are left unscaled. Refuses to run twice on the
    same split.
    """
    if split.transformed:
        raise ValueError("split is already standardized")
    pooled = split.all_train().features
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    # float accumulation leaves ~1e-15 residue on constant columns
    zero_var = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(zero_var, 1.0, std)

    def tx(ds: Dataset) -> Dataset:
        return replace(ds, features=(ds.features - mean) / std)

    out = FederationSplit(
        clients=[ClientShard(tx(c.train), tx(c.val)) for c in split.clients],
        test=tx(split.test),
        server_val=tx(split.server_val),
        transformed=True,
        manifest=split.manifest,
    )
    return out, (mean, std)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def partition_iid(dataset: Dataset, n_clients: int, stream: RngStream) -> list:
    """Uniform random split into n_clients near-equal shards."""
    if n_clients < 1 or n_clients > dataset.n_rows:
        raise ValueError("n_clients out of range")
    perm = stream.derive("iid").generator().permutation(dataset.n_rows)
    return [dataset.take(np.sort(chunk)) for chunk in np.array_split(perm, n_clients)]


def partition_noniid(
    dataset: Dataset,
    n_clients: int,
    clusters_per_class: int,
    stream: RngStream,
    n_attackers: int = 0,
) -> list:
    """Cluster-paired non-IID partition of a binary dataset.

    KMeans forms clusters_per_class clusters inside each class; each client
    is the union of one class-0 cluster and its nearest unused class-1
    cluster, paired greedily in ascending centroid-distance order. Attacker
    clients (appended last) receive an average-size uniform sample drawn
    before clustering, so their data follows the overall distribution.

    clusters_per_class == 0 selects the IID mode.
    """
    if dataset.n_classes != 2:
        raise ValueError("non-IID partitioning requires binary labels")
    total = n_clients + n_attackers
    if clusters_per_class == 0:
        return partition_iid(dataset, total, stream)
    if clusters_per_class < n_clients:
        raise ValueError("n_clients exceeds available clusters")

    work = dataset
    attackers = []
    if n_attackers:
        avg = dataset.n_rows // total
        rng = stream.derive("attacker-draw").generator()
        perm = rng.permutation(dataset.n_rows)
        for a in range(n_attackers):
            attackers.append(dataset.take(np.sort(perm[a * avg : (a + 1) * avg])))
        work = dataset.take(np.sort(perm[n_attackers * avg :]))

    classes = work.class_indices
    idx0 = np.flatnonzero(classes == 0)
    idx1 = np.flatnonzero(classes == 1)
    if idx0.size < clusters_per_class or idx1.size < clusters_per_class:
        raise ValueError("a class has fewer rows than clusters_per_class")
    a0, c0 = kmeans(work.features[idx0], clusters_per_class, stream.derive("km", 0))
    a1, c1 = kmeans(work.features[idx1], clusters_per_class, stream.derive("km", 1))

    # greedy nearest pairing over centroid distances, ascending
    pairs = []
    d = np.linalg.norm(c0[:, None, :] - c1[None, :, :], axis=2)
    order = sorted(
        ((d[i, j], i, j) for i in range(clusters_per_class) for j in range(clusters_per_class))
    )
    used0, used1 = set(), set()
    for _, i, j in order:
        if i in used0 or j in used1:
            continue
        pairs.append((i, j))
        used0.add(i)
        used1.add(j)
        if len(pairs) == clusters_per_class:
            break
    pairs.sort()  # stable client ids: ascending class-0 cluster index

    shards = []
    for i, j in pairs[:n_clients]:
        rows = np.sort(np.concatenate([idx0[a0 == i], idx1[a1 == j]]))
        shards.append(work.take(rows))
    leftover_pairs = pairs[n_clients:]
    if leftover_pairs:
        # unmatched clusters (clusters_per_class > n_clients) fold into the
        # last client so coverage stays total
        extra = [
            np.concatenate([idx0[a0 == i], idx1[a1 == j]]) for i, j in leftover_pairs
        ]
        rows = np.sort(np.concatenate([shards[-1].row_ids, *[work.row_ids[e] for e in extra]]))
        keep = np.isin(work.row_ids, rows)
        shards[-1] = work.take(np.flatnonzero(keep))
    return shards + attackers


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def _proportional_quotas(sizes, total):
    """Largest-remainder apportionment of `total` across `sizes`."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.sum() == 0:
        return np.zeros(len(sizes), dtype=np.int64)
    exact = total * sizes / sizes.sum()
    quotas = np.floor(exact).astype(np.int64)
    remainder = total - quotas.sum()
    order = np.argsort(-(exact - quotas), kind="stable")
    quotas[order[:remainder]] += 1
    return quotas


def make_splits(
    client_datasets,
    stream: RngStream,
    server_val_size: int = 250,
    test_fraction: float = 0.15,
    train_fraction: float = 0.8,
    unfair_exclude: int | None = None,
) -> FederationSplit:
    """Per-client test extraction, server validation draw, and train/val split.

    15% of each client pools into the test set; the server validation set
    draws proportionally from every client's remainder (skipping the
    unfair_exclude client when set); what is left splits 80/20 into local
    train/val. All draws are seeded and index-disjoint.
    """
    client_datasets = list(client_datasets)
    for k, ds in enumerate(client_datasets):
        if ds.n_rows < 10:
            raise ValueError(f"client {k} has fewer than 10 samples")

    test_parts = []
    remainders = []
    for k, ds in enumerate(client_datasets):
        rng = stream.derive("split", k).generator()
        perm = rng.permutation(ds.n_rows)
        n_test = int(round(test_fraction * ds.n_rows))
        test_parts.append(ds.take(np.sort(perm[:n_test])))
        remainders.append(ds.take(np.sort(perm[n_test:])))

    rem_sizes = [r.n_rows for r in remainders]
    eligible = [
        0 if unfair_exclude is not None and k == unfair_exclude else rem_sizes[k]
        for k in range(len(remainders))
    ]
    quotas = _proportional_quotas(eligible, min(server_val_size, sum(eligible)))

    server_parts = []
    shards = []
    for k, rem in enumerate(remainders):
        rng = stream.derive("server-draw", k).generator()
        perm = rng.permutation(rem.n_rows)
        q = int(quotas[k])
        if q:
            server_parts.append(rem.take(np.sort(perm[:q])))
        local = rem.take(np.sort(perm[q:]))
        n_train = int(round(train_fraction * local.n_rows))
        rng2 = stream.derive("trainval", k).generator()
        perm2 = rng2.permutation(local.n_rows)
        shards.append(
            ClientShard(
                train=local.take(np.sort(perm2[:n_train])),
                val=local.take(np.sort(perm2[n_train:])),
            )
        )

    test = Dataset.concat(test_parts)
    server_val = Dataset.concat(server_parts) if server_parts else test_parts[0].take([])
    manifest = {
        "clients": [
            {
                "train": shard.train.row_ids.tolist(),
                "val": shard.val.row_ids.tolist(),
            }
            for shard in shards
        ],
        "test": test.row_ids.tolist(),
        "server_val": server_val.row_ids.tolist(),
    }
    return FederationSplit(clients=shards, test=test, server_val=server_val, manifest=manifest)


def save_split_manifest(path, split: FederationSplit) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(split.manifest, fh, indent=1, sort_keys=True)
