"""Datasets, the public/private split, non-IID partitioners, k-shot sampling.

A Dataset is an in-memory feature matrix with dense integer labels.
Shards are index views into it; every partitioner returns shards with
ascending, pairwise disjoint indices that cover their input rows. The
C+1 split gives the server a stratified public shard and hands the rest
to one of three client partitioners: iid, label-shard (classic
sort-by-label chunks), or Dirichlet label skew.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import Batch
from .seeding import derive_seed


class DataError(ValueError):
    """Raised for malformed files, invalid shards, or infeasible splits."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise DataError(f"features must be a non-empty matrix, got {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise DataError(
                f"labels shape {labels.shape} does not match {feats.shape[0]} rows"
            )
        if not np.all(np.isfinite(feats)):
            raise DataError("features must be finite")
        if labels.min() < 0 or labels.max() >= self.classes:
            raise DataError(
                f"labels must lie in [0, {self.classes}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def full_shard(self) -> "Shard":
        return Shard(self, np.arange(self.n_rows, dtype=np.int64))


@dataclass(frozen=True)
class Shard:
    """An ordered view of dataset rows; len(shard) is the client's n_k."""

    dataset: Dataset
    indices: np.ndarray

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise DataError(f"shard indices must be 1-D, got {idx.shape}")
        if idx.size:
            if idx.min() < 0 or idx.max() >= self.dataset.n_rows:
                raise DataError("shard index out of dataset range")
            if np.unique(idx).size != idx.size:
                raise DataError("shard indices must be unique")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return self.indices.size

    @property
    def features(self) -> np.ndarray:
        return self.dataset.features[self.indices]

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels[self.indices]

    def batch(self) -> Batch:
        if len(self) == 0:
            raise DataError("cannot build a batch from an empty shard")
        return Batch(self.features, self.labels)


@dataclass(frozen=True)
class PartitionPlan:
    public: Shard
    private: tuple[Shard, ...]
    scheme: str
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.private)


def _as_shard(source: Dataset | Shard) -> Shard:
    return source.full_shard() if isinstance(source, Dataset) else source


def load_csv(path: str, label_column: str) -> Dataset:
    """Load a header-ed CSV with one label column and numeric features.

    Labels map to dense indices by sorted distinct value (numeric sort
    when every label parses as a number, else lexicographic), which
    keeps the mapping stable across runs and platforms.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open dataset file {path!r}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path!r} is empty; expected a header row") from None
        if label_column not in header:
            raise DataError(
                f"label column {label_column!r} not in header {header} of {path!r}"
            )
        label_pos = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != label_pos]
        rows: list[list[float]] = []
        raw_labels: list[str] = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"{path!r} row {line_no}: expected {len(header)} cells, "
                    f"got {len(row)}"
                )
            values = []
            for pos, cell in enumerate(row):
                if pos == label_pos:
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path!r} row {line_no}, column {header[pos]!r}: "
                        f"non-numeric value {cell!r}"
                    ) from None
            rows.append(values)
            raw_labels.append(row[label_pos])
    if not rows:
        raise DataError(f"{path!r} has a header but no data rows")
    distinct = sorted(set(raw_labels), key=_label_sort_key(raw_labels))
    mapping = {value: i for i, value in enumerate(distinct)}
    labels = np.array([mapping[v] for v in raw_labels], dtype=np.int64)
    features = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        r, c = np.argwhere(~np.isfinite(features))[0]
        raise DataError(
            f"{path!r} row {int(r) + 2}, column {feature_names[int(c)]!r}: "
            f"non-finite value"
        )
    return Dataset(features, labels, classes=len(distinct))


def _label_sort_key(raw_labels: list[str]):
    try:
        for v in set(raw_labels):
            float(v)
    except ValueError:
        return str
    return float


def save_csv(ds: Dataset, path: str, label_column: str = "label") -> None:
    """Write a Dataset back out in the load_csv format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(ds.n_features)] + [label_column])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def _class_direction(c: int, d: int) -> np.ndarray:
    """Fixed unit direction for class c in d dimensions (seed-independent)."""
    rng = np.random.default_rng(derive_seed(0, "blob-direction", c, d))
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def gen_blobs(classes: int, per_class: int, d: int, separation: float,
              noise_sd: float, seed: int) -> Dataset:
    """Gaussian blobs: class c centered at separation * u_c."""
    if classes < 2 or per_class < 1 or d < 1:
        raise DataError(
            f"need classes >= 2, per_class >= 1, d >= 1; "
            f"got {classes}, {per_class}, {d}"
        )
    if noise_sd < 0:
        raise DataError(f"noise_sd must be >= 0, got {noise_sd}")
    rng = np.random.default_rng(seed)
    feats = np.empty((classes * per_class, d))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        center = separation * _class_direction(c, d)
        block = slice(c * per_class, (c + 1) * per_class)
        feats[block] = center + noise_sd * rng.standard_normal((per_class, d))
        labels[block] = c
    return Dataset(feats, labels, classes)


def label_histogram(shard: Shard) -> np.ndarray:
    """Exact per-class row counts; sums to len(shard)."""
    return np.bincount(shard.labels, minlength=shard.dataset.classes)


def _stratified_take(shard: Shard, size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split shard indices into (taken, rest); taken mirrors the label mix.

    Per-class quotas follow largest-remainder apportionment so the taken
    set has exactly `size` rows.
    """
    labels = shard.labels
    classes = shard.dataset.classes
    counts = np.bincount(labels, minlength=classes)
    exact = counts * (size / len(shard))
    quotas = np.floor(exact).astype(np.int64)
    remainder = size - quotas.sum()
    if remainder > 0:
        order = np.argsort(-(exact - quotas), kind="stable")
        for c in order[:remainder]:
            quotas[c] += 1
    rng = np.random.default_rng(seed)
    taken = []
    rest = []
    for c in range(classes):
        rows = shard.indices[labels == c]
        k = min(int(quotas[c]), rows.size)
        chosen = rng.choice(rows.size, size=k, replace=False) if k else []
        mask = np.zeros(rows.size, dtype=bool)
        mask[chosen] = True
        taken.append(rows[mask])
        rest.append(rows[~mask])
    taken_idx = np.sort(np.concatenate(taken)) if taken else np.array([], np.int64)
    rest_idx = np.sort(np.concatenate(rest)) if rest else np.array([], np.int64)
    return taken_idx, rest_idx


def stratified_split(source: Dataset | Shard, fraction: float,
                     seed: int) -> tuple[Shard, Shard]:
    """Split rows into (taken, rest) with the taken share stratified by label."""
    shard = _as_shard(source)
    if not 0 < fraction < 1:
        raise DataError(f"fraction must be in (0, 1), got {fraction}")
    size = int(round(fraction * len(shard)))
    size = max(1, min(size, len(shard) - 1))
    taken, rest = _stratified_take(shard, size, seed)
    return Shard(shard.dataset, taken), Shard(shard.dataset, rest)


def partition_iid(source: Dataset | Shard, parts: int, seed: int) -> list[Shard]:
    """Seeded shuffle then contiguous near-equal slices (sizes differ <= 1)."""
    shard = _as_shard(source)
    if parts < 1:
        raise DataError(f"parts must be >= 1, got {parts}")
    if len(shard) < parts:
        raise DataError(f"cannot split {len(shard)} rows into {parts} parts")
    rng = np.random.default_rng(seed)
    shuffled = shard.indices[rng.permutation(len(shard))]
    return [
        Shard(shard.dataset, np.sort(chunk))
        for chunk in np.array_split(shuffled, parts)
    ]


def partition_label_shards(source: Dataset | Shard, parts: int,
                           shards_per_part: int, seed: int) -> list[Shard]:
    """Classic label-skew split: sort by label, chunk, deal chunks out."""
    shard = _as_shard(source)
    if parts < 1 or shards_per_part < 1:
        raise DataError("parts and shards_per_part must be >= 1")
    total_chunks = parts * shards_per_part
    if total_chunks > len(shard):
        raise DataError(
            f"{parts} x {shards_per_part} chunks exceed {len(shard)} rows"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(shard))
    by_label = order[np.argsort(shard.labels[order], kind="stable")]
    sorted_idx = shard.indices[by_label]
    chunks = np.array_split(sorted_idx, total_chunks)
    assignment = rng.permutation(total_chunks)
    out = []
    for p in range(parts):
        mine = assignment[p * shards_per_part:(p + 1) * shards_per_part]
        out.append(Shard(shard.dataset, np.sort(np.concatenate([chunks[i] for i in mine]))))
    return out


def partition_dirichlet(source: Dataset | Shard, parts: int, alpha: float,
                        seed: int) -> list[Shard]:
    """Label-skew split with per-label Dirichlet(alpha) proportions.

    Rows of each label are dealt to parts by a seeded multinomial draw
    over the label's Dirichlet proportions. Any empty part is topped up
    with one row moved from the currently largest part, so every client
    stays trainable while disjointness and coverage hold.
    """
    shard = _as_shard(source)
    if parts < 1:
        raise DataError(f"parts must be >= 1, got {parts}")
    if alpha <= 0:
        raise DataError(f"alpha must be > 0, got {alpha}")
    if len(shard) < parts:
        raise DataError(f"cannot split {len(shard)} rows into {parts} parts")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(parts)]
    for c in range(shard.dataset.classes):
        rows = shard.indices[shard.labels == c]
        if rows.size == 0:
            continue
        rows = rows[rng.permutation(rows.size)]
        proportions = rng.dirichlet(np.full(parts, alpha))
        counts = rng.multinomial(rows.size, proportions)
        start = 0
        for p in range(parts):
            if counts[p]:
                buckets[p].append(rows[start:start + counts[p]])
            start += counts[p]
    sizes = [sum(a.size for a in b) for b in buckets]
    while min(sizes) == 0:
        empty = sizes.index(0)
        donor = int(np.argmax(sizes))
        moved = buckets[donor][-1][-1:]
        buckets[donor][-1] = buckets[donor][-1][:-1]
        if buckets[donor][-1].size == 0:
            buckets[donor].pop()
        buckets[empty].append(moved)
        sizes[empty] += 1
        sizes[donor] -= 1
    return [
        Shard(shard.dataset, np.sort(np.concatenate(b)))
        for b in buckets
    ]


_SCHEMES = ("iid", "label_shard", "dirichlet")


def split_public_private(source: Dataset | Shard, n_clients: int, scheme: str,
                         seed: int, *, alpha: float = 0.5,
                         shards_per_part: int = 2) -> PartitionPlan:
    """The C+1 split: stratified public shard plus C private shards."""
    shard = _as_shard(source)
    if n_clients < 1:
        raise DataError(f"need at least one client, got {n_clients}")
    if len(shard) < n_clients + 1:
        raise DataError(
            f"{len(shard)} rows cannot fill {n_clients + 1} non-empty shards"
        )
    if scheme not in _SCHEMES:
        raise DataError(f"unknown partition scheme {scheme!r}; choose {_SCHEMES}")
    public_size = len(shard) // (n_clients + 1)
    public_idx, rest_idx = _stratified_take(
        shard, public_size, derive_seed(seed, "public")
    )
    rest = Shard(shard.dataset, rest_idx)
    part_seed = derive_seed(seed, "private")
    if scheme == "iid":
        private = partition_iid(rest, n_clients, part_seed)
        tag = "iid"
    elif scheme == "label_shard":
        private = partition_label_shards(rest, n_clients, shards_per_part, part_seed)
        tag = f"label_shard({shards_per_part})"
    else:
        private = partition_dirichlet(rest, n_clients, alpha, part_seed)
        tag = f"dirichlet({alpha})"
    return PartitionPlan(
        public=Shard(shard.dataset, public_idx),
        private=tuple(private),
        scheme=tag,
        seed=seed,
    )


def sample_kshot(shard: Shard, k: int, seed: int) -> Shard:
    """At most k rows per class, sampled without replacement.

    Classes with fewer than k rows contribute everything they have.
    Output indices are ascending, so re-sampling a k-shot shard with the
    same k is the identity.
    """
    if len(shard) == 0:
        raise DataError("cannot k-shot sample an empty shard")
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    labels = shard.labels
    kept = []
    for c in np.unique(labels):
        rows = shard.indices[labels == c]
        if rows.size <= k:
            kept.append(rows)
        else:
            kept.append(rows[rng.choice(rows.size, size=k, replace=False)])
    return Shard(shard.dataset, np.sort(np.concatenate(kept)))
