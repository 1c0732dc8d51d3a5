"""Long-tailed federated dataset synthesis and tabular ingestion.

Synthetic federations follow a two-axis geometric decay: client m holds
round(base_examples * rho^m) examples, and within a client the classes are
randomly permuted and assigned shares proportional to tau^rank. Features are
Gaussian clusters (one fixed center per class, shared by all clients), so
clients differ in mixture weights, not in what the classes look like.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .seeds import TAG_DATA, rng_for

MANIFEST_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FederationSpec:
    """Shape of a synthetic federation."""

    clients: int
    classes: int
    feature_dim: int
    base_examples: int
    rho: float  # client-size decay in (0, 1]
    tau: float  # class-frequency decay in (0, 1]
    test_fraction: float = 0.2
    seed: int = 0
    cluster_spread: float = 1.0
    center_scale: float = 1.0

    def validate(self) -> None:
        if self.clients < 2:
            raise ConfigError("need at least 2 clients")
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.feature_dim < 1 or self.base_examples < 1:
            raise ConfigError("feature_dim and base_examples must be positive")
        if not (0.0 < self.rho <= 1.0 and 0.0 < self.tau <= 1.0):
            raise ConfigError("rho and tau must lie in (0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.cluster_spread <= 0.0:
            raise ConfigError("cluster_spread must be positive")
        smallest = round(self.base_examples * self.rho ** (self.clients - 1))
        if smallest < self.classes:
            raise ConfigError(
                f"smallest client would hold {smallest} examples, fewer than "
                f"{self.classes} classes; raise base_examples or rho"
            )


@dataclass
class ClientDataset:
    """One client's examples, split into train and test."""

    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_counts: np.ndarray  # train-set histogram over all federation classes

    def __post_init__(self) -> None:
        if len(self.train_y) == 0:
            raise DataError(f"client {self.client_id}: empty train set")

    @property
    def size(self) -> int:
        return len(self.train_y) + len(self.test_y)


@dataclass
class GlobalTestSet:
    """Pooled test examples from every client, in client order."""

    x: np.ndarray
    y: np.ndarray


@dataclass
class ImbalanceReport:
    client_sizes: list[int]
    client_class_counts: list[list[int]]  # train+test histogram per client
    global_class_counts: list[int]
    size_std: float
    class_count_std: float


def geometric_shares(tau: float, classes: int) -> np.ndarray:
    """Normalized geometric sequence tau^0, tau^1, ... over class ranks."""
    raw = tau ** np.arange(classes, dtype=float)
    return raw / raw.sum()


def apportion(total: int, shares: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of `total * shares` to ints summing to total."""
    raw = shares * total
    counts = np.floor(raw).astype(int)
    remainder = total - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")  # ties favor lower rank
    counts[order[:remainder]] += 1
    return counts


def _split_counts(class_counts: np.ndarray, test_fraction: float) -> np.ndarray:
    """Per-class test counts: singletons stay in train, else at least one row."""
    test = np.zeros_like(class_counts)
    for c, n in enumerate(class_counts):
        if n >= 2:
            test[c] = min(n - 1, max(1, int(round(test_fraction * n))))
    return test


@dataclass
class SynthesisResult:
    clients: list[ClientDataset]
    global_test: GlobalTestSet
    permutations: list[list[int]]  # per-client class permutation, for the manifest


def synthesize(spec: FederationSpec) -> tuple[list[ClientDataset], GlobalTestSet]:
    """Generate a federation; deterministic for a given spec (incl. seed)."""
    result = synthesize_detailed(spec)
    return result.clients, result.global_test


def synthesize_detailed(spec: FederationSpec) -> SynthesisResult:
    spec.validate()
    rng = rng_for(spec.seed, TAG_DATA)
    centers = spec.center_scale * rng.standard_normal((spec.classes, spec.feature_dim))

    clients = []
    permutations = []
    for m in range(spec.clients):
        size = round(spec.base_examples * spec.rho**m)
        perm = rng.permutation(spec.classes)
        permutations.append(perm)
        shares = geometric_shares(spec.tau, spec.classes)
        counts = np.zeros(spec.classes, dtype=int)
        counts[perm] = apportion(size, shares)

        test_counts = _split_counts(counts, spec.test_fraction)
        train_parts, test_parts = [], []
        for c in range(spec.classes):
            if counts[c] == 0:
                continue
            feats = centers[c] + spec.cluster_spread * rng.standard_normal(
                (counts[c], spec.feature_dim)
            )
            labels = np.full(counts[c], c, dtype=np.int64)
            cut = counts[c] - test_counts[c]
            train_parts.append((feats[:cut], labels[:cut]))
            if test_counts[c]:
                test_parts.append((feats[cut:], labels[cut:]))

        train_x = np.concatenate([p[0] for p in train_parts])
        train_y = np.concatenate([p[1] for p in train_parts])
        if test_parts:
            test_x = np.concatenate([p[0] for p in test_parts])
            test_y = np.concatenate([p[1] for p in test_parts])
        else:
            test_x = np.empty((0, spec.feature_dim))
            test_y = np.empty(0, dtype=np.int64)
        counts_train = np.bincount(train_y, minlength=spec.classes)
        clients.append(
            ClientDataset(m, train_x, train_y, test_x, test_y, counts_train)
        )

    global_test = GlobalTestSet(
        x=np.concatenate([c.test_x for c in clients]),
        y=np.concatenate([c.test_y for c in clients]),
    )
    present = set()
    for c in clients:
        present.update(np.unique(c.train_y).tolist())
        present.update(np.unique(c.test_y).tolist())
    missing = present - set(np.unique(global_test.y).tolist())
    if missing:
        raise DataError(
            f"classes {sorted(missing)} never reach the pooled test set; "
            "raise base_examples or test_fraction"
        )
    return SynthesisResult(clients, global_test, [p.tolist() for p in permutations])


@dataclass
class IngestMeta:
    """Label/client encodings recorded while ingesting a tabular file."""

    label_names: list[str]
    client_keys: list[str]
    feature_names: list[str]


def ingest_tabular(
    path: str | Path,
    label_column: str,
    client_column: str,
    feature_columns: list[str] | None = None,
    delimiter: str = ",",
    test_fraction: float = 0.2,
) -> tuple[list[ClientDataset], GlobalTestSet, IngestMeta]:
    """Parse a delimited text file into per-client datasets.

    The header row is required. Labels and client keys are encoded to ints in
    first-appearance order. Bad rows fail the whole ingest with the 1-based
    data row index (and column name for unparseable cells).
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        for col in (label_column, client_column):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        if feature_columns is None:
            feature_columns = [c for c in header if c not in (label_column, client_column)]
        if not feature_columns:
            raise DataError(f"{path}: no feature columns")
        for col in feature_columns:
            if col not in header:
                raise DataError(f"{path}: missing feature column {col!r}")
        col_idx = {c: header.index(c) for c in header}

        label_names: list[str] = []
        client_keys: list[str] = []
        rows_by_client: dict[int, list[tuple[list[float], int]]] = {}
        for i, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataError(f"{path}: row {i}: expected {len(header)} fields, got {len(row)}")
            feats = []
            for col in feature_columns:
                cell = row[col_idx[col]]
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: row {i}, column {col!r}: non-numeric value {cell!r}"
                    ) from None
            label = row[col_idx[label_column]]
            if label not in label_names:
                label_names.append(label)
            key = row[col_idx[client_column]]
            if key not in client_keys:
                client_keys.append(key)
                rows_by_client[client_keys.index(key)] = []
            rows_by_client[client_keys.index(key)].append((feats, label_names.index(label)))

    if not rows_by_client:
        raise DataError(f"{path}: no data rows")
    num_classes = len(label_names)

    clients = []
    for cid in range(len(client_keys)):
        rows = rows_by_client[cid]
        x = np.array([r[0] for r in rows], dtype=float)
        y = np.array([r[1] for r in rows], dtype=np.int64)
        counts = np.bincount(y, minlength=num_classes)
        test_counts = _split_counts(counts, test_fraction)
        train_idx, test_idx = [], []
        taken = np.zeros(num_classes, dtype=int)
        # Walk rows in reverse so the file's trailing rows per class land in test.
        for j in range(len(rows) - 1, -1, -1):
            c = y[j]
            if taken[c] < test_counts[c]:
                test_idx.append(j)
                taken[c] += 1
            else:
                train_idx.append(j)
        train_idx.reverse()
        test_idx.reverse()
        clients.append(
            ClientDataset(
                cid,
                x[train_idx],
                y[train_idx],
                x[test_idx],
                y[test_idx],
                np.bincount(y[train_idx], minlength=num_classes),
            )
        )

    global_test = GlobalTestSet(
        x=np.concatenate([c.test_x for c in clients]),
        y=np.concatenate([c.test_y for c in clients]),
    )
    return clients, global_test, IngestMeta(label_names, client_keys, list(feature_columns))


def stats(clients: list[ClientDataset]) -> ImbalanceReport:
    """Size and class-histogram dispersion summary of a federation."""
    if not clients:
        raise DataError("empty federation")
    num_classes = len(clients[0].class_counts)
    sizes = [c.size for c in clients]
    per_client = []
    for c in clients:
        hist = np.bincount(
            np.concatenate([c.train_y, c.test_y]).astype(np.int64), minlength=num_classes
        )
        per_client.append(hist.tolist())
    global_counts = np.sum(per_client, axis=0)
    return ImbalanceReport(
        client_sizes=sizes,
        client_class_counts=per_client,
        global_class_counts=global_counts.tolist(),
        size_std=float(np.std(sizes)),
        class_count_std=float(np.std(global_counts)),
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def write_federation(
    out_dir: str | Path,
    clients: list[ClientDataset],
    global_test: GlobalTestSet,
    spec: FederationSpec | None = None,
    meta: IngestMeta | None = None,
    permutations: list[list[int]] | None = None,
) -> Path:
    """Write manifest.json plus one CSV per client; returns the manifest path.

    Output is byte-deterministic: floats are rendered with repr precision and
    the manifest keys are sorted.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    num_classes = len(clients[0].class_counts)
    manifest: dict = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "kind": "synthetic" if spec is not None else "ingested",
        "num_classes": num_classes,
        "global_test_size": int(len(global_test.y)),
        "clients": [],
    }
    if spec is not None:
        manifest["spec"] = asdict(spec)
        manifest["seed"] = spec.seed
    if meta is not None:
        manifest["label_names"] = meta.label_names
        manifest["client_keys"] = meta.client_keys
        manifest["feature_names"] = meta.feature_names
    for i, c in enumerate(clients):
        entry = {
            "id": c.client_id,
            "train_size": int(len(c.train_y)),
            "test_size": int(len(c.test_y)),
            "class_counts_train": np.bincount(c.train_y, minlength=num_classes).tolist(),
            "class_counts_test": np.bincount(c.test_y, minlength=num_classes).tolist(),
        }
        if permutations is not None:
            entry["class_permutation"] = permutations[i]
        manifest["clients"].append(entry)
        _write_client_csv(out / f"client_{c.client_id:03d}.csv", c)
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def _write_client_csv(path: Path, c: ClientDataset) -> None:
    dim = c.train_x.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "label"] + [f"f{j}" for j in range(dim)])
        for split, xs, ys in (("train", c.train_x, c.train_y), ("test", c.test_x, c.test_y)):
            for row, label in zip(xs, ys):
                writer.writerow([split, int(label)] + [repr(float(v)) for v in row])
