"""Data loading, client splitting and synthetic data.

The client split produces ``M / 2`` small shards whose majority-class share
is pushed towards a target and ``M / 2`` large shards that take the remaining
rows at random:

    n_small = floor((n / M) (1 - rho))
    n_large = floor((n / M) (1 + rho))
    target  = lam + (1 - lam) kappa

where ``lam`` is the majority-class share of the whole training set.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DomainError, InfeasibleSplit, IoError, SchemaMismatch
from .models import Dataset


# --------------------------------------------------------------------------
# client split


@dataclass(frozen=True)
class SplitSpec:
    M: int
    rho: float = 0.0
    kappa: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise DomainError("M must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise DomainError("rho must lie in [0, 1]")
        if self.kappa > 1.0:
            raise DomainError("kappa must be <= 1")

    def sizes(self, n: int) -> tuple[int, int]:
        return split_sizes(n, self.M, self.rho)


def split_sizes(n: float, M: int, rho: float) -> tuple[int, int]:
    """``(n_small, n_large)``; ``n`` may be fractional to reproduce tabulated ``n / M``."""
    per = n / M
    return math.floor(per * (1.0 - rho)), math.floor(per * (1.0 + rho))


def small_target(lam: float, kappa: float) -> float:
    """Majority-class share targeted in the small shards."""
    lower = -lam / (1.0 - lam) if lam < 1.0 else -math.inf
    if not lower <= kappa <= 1.0:
        raise DomainError(f"kappa={kappa} outside [{lower:.4g}, 1] for majority share {lam:.4g}")
    return lam + (1.0 - lam) * kappa


def majority_label(labels) -> float:
    labels = np.asarray(labels)
    return 1.0 if np.sum(labels == 1) >= np.sum(labels == 0) else 0.0


def split_indices(labels, spec: SplitSpec) -> list[np.ndarray]:
    """Disjoint index sets, one per client, covering every row.

    Small shards come first.  Rows left over after the small shards are
    shuffled and dealt to the large shards, whose sizes therefore differ by
    at most one and equal ``n_large`` up to the floor rounding.
    """
    labels = np.asarray(labels)
    n = labels.size
    M = spec.M
    if M > n:
        raise InfeasibleSplit(f"{M} clients for {n} rows")
    rng = np.random.default_rng(spec.seed)
    if M == 1:
        return [np.sort(rng.permutation(n))]
    if M % 2:
        if spec.rho != 0.0 or spec.kappa != 0.0:
            raise InfeasibleSplit("unbalanced splits need an even number of clients")
        return [np.sort(p) for p in np.array_split(rng.permutation(n), M)]

    maj = majority_label(labels)
    maj_idx = rng.permutation(np.flatnonzero(labels == maj))
    min_idx = rng.permutation(np.flatnonzero(labels != maj))
    lam = maj_idx.size / n
    target = small_target(lam, spec.kappa)
    n_small, _ = spec.sizes(n)
    n_maj_small = int(round(n_small * target))
    n_min_small = n_small - n_maj_small
    half = M // 2
    if half * n_maj_small > maj_idx.size or half * n_min_small > min_idx.size:
        raise InfeasibleSplit(
            f"small shards need {half * n_maj_small} majority / {half * n_min_small} minority rows, "
            f"have {maj_idx.size} / {min_idx.size}"
        )
    shards = []
    for k in range(half):
        take_maj = maj_idx[k * n_maj_small : (k + 1) * n_maj_small]
        take_min = min_idx[k * n_min_small : (k + 1) * n_min_small]
        shards.append(np.sort(np.concatenate([take_maj, take_min])))
    rest = np.concatenate([maj_idx[half * n_maj_small :], min_idx[half * n_min_small :]])
    rest = rng.permutation(rest)
    for part in np.array_split(rest, M - half):
        shards.append(np.sort(part))
    return shards


def split_clients(dataset: Dataset, spec: SplitSpec) -> list[Dataset]:
    return [dataset.subset(idx) for idx in split_indices(dataset.labels, spec)]


def partition_local(shard, n_parts: int, seed=0) -> list:
    """Uniformly random disjoint cover of ``shard`` by ``n_parts`` pieces.

    Accepts a :class:`Dataset` (returns datasets) or an index array (returns
    index arrays).  Piece sizes differ by at most one.
    """
    n = len(shard)
    if n_parts < 1:
        raise DomainError("need at least one partition")
    if n_parts > n:
        raise DomainError(f"{n_parts} partitions for {n} rows")
    if n_parts == 1:
        return [shard]
    perm = np.random.default_rng(seed).permutation(n)
    pieces = [np.sort(p) for p in np.array_split(perm, n_parts)]
    if isinstance(shard, Dataset):
        return [shard.subset(p) for p in pieces]
    arr = np.asarray(shard)
    return [arr[p] for p in pieces]


def write_shard_manifest(path, shards: list[np.ndarray], spec: SplitSpec | None = None, **extra) -> None:
    """JSON record of which rows every client received."""
    doc = {"shards": [np.asarray(s).tolist() for s in shards], **extra}
    if spec is not None:
        doc["split"] = {"M": spec.M, "rho": spec.rho, "kappa": spec.kappa, "seed": spec.seed}
    Path(path).write_text(json.dumps(doc))


def read_shard_manifest(path) -> list[np.ndarray]:
    doc = json.loads(Path(path).read_text())
    return [np.asarray(s, dtype=np.intp) for s in doc["shards"]]


# --------------------------------------------------------------------------
# tabular input


@dataclass
class TabularData:
    train: Dataset
    validation: Dataset
    feature_names: list[str]
    means: np.ndarray
    stds: np.ndarray
    metadata: dict = field(default_factory=dict)


_MISSING = {"", "?", "na", "nan"}


def load_schema(schema) -> dict:
    if isinstance(schema, (str, Path)):
        try:
            schema = json.loads(Path(schema).read_text())
        except FileNotFoundError as exc:
            raise IoError(str(exc)) from exc
    for key in ("columns", "label", "positive"):
        if key not in schema:
            raise SchemaMismatch(f"schema lacks {key!r}")
    for name, kind in schema["columns"].items():
        if kind not in ("continuous", "categorical"):
            raise SchemaMismatch(f"column {name!r} has unknown kind {kind!r}")
    return schema


def load_tabular(path, schema, seed: int = 0, train_fraction: float = 0.8) -> TabularData:
    """Read a CSV, encode it and split rows into training and validation sets.

    Rows with a missing value in any used column are dropped.  Continuous
    columns are standardized with training-row statistics (a zero standard
    deviation is replaced by one); categorical columns are one-hot encoded
    with the category list taken from all rows, sorted.
    """
    schema = load_schema(schema)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh, skipinitialspace=True))
    except FileNotFoundError as exc:
        raise IoError(str(exc)) from exc
    columns, label = schema["columns"], schema["label"]
    header = set(rows[0].keys()) if rows else set()
    missing = [c for c in [*columns, label] if c not in header]
    if missing:
        raise SchemaMismatch(f"columns not found in {path}: {missing}")
    used = [*columns, label]
    rows = [r for r in rows if all((r[c] or "").strip().lower() not in _MISSING for c in used)]
    if not rows:
        raise SchemaMismatch("no complete rows")

    positive = str(schema["positive"]).strip()
    y = np.array([1.0 if r[label].strip().rstrip(".") == positive.rstrip(".") else 0.0 for r in rows])
    blocks, names, cont_slots = [], [], []
    for name, kind in columns.items():
        values = [r[name].strip() for r in rows]
        if kind == "continuous":
            try:
                col = np.array([float(v) for v in values])
            except ValueError as exc:
                raise SchemaMismatch(f"column {name!r} is not numeric") from exc
            cont_slots.append(len(names))
            blocks.append(col[:, None])
            names.append(name)
        else:
            cats = sorted(set(values))
            blocks.append(np.array([[v == c for c in cats] for v in values], dtype=np.float64))
            names.extend(f"{name}={c}" for c in cats)
    x = np.concatenate(blocks, axis=1)

    n = len(rows)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(n * train_fraction)
    tr, va = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    means = np.zeros(x.shape[1])
    stds = np.ones(x.shape[1])
    if cont_slots and n_train:
        cols = np.asarray(cont_slots)
        means[cols] = x[tr][:, cols].mean(axis=0)
        sd = x[tr][:, cols].std(axis=0)
        stds[cols] = np.where(sd > 0, sd, 1.0)
    x = (x - means) / stds
    meta = {"preprocessing": "standardize continuous (train stats, zero std -> 1), one-hot categorical, "
                             "drop incomplete rows", "seed": seed, "train_fraction": train_fraction}
    return TabularData(Dataset(x[tr], y[tr]), Dataset(x[va], y[va]), names, means, stds, meta)


def rebalance_majority(dataset: Dataset, seed: int = 0) -> Dataset:
    """Keep every minority row and an equally sized random subset of the majority."""
    y = dataset.labels
    maj = majority_label(y)
    maj_idx = np.flatnonzero(y == maj)
    min_idx = np.flatnonzero(y != maj)
    keep = np.random.default_rng(seed).choice(maj_idx, size=min_idx.size, replace=False)
    return dataset.subset(np.sort(np.concatenate([keep, min_idx])))


def train_validation_split(dataset: Dataset, seed: int = 0, train_fraction: float = 0.8) -> tuple[Dataset, Dataset]:
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(n * train_fraction)
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


# --------------------------------------------------------------------------
# synthetic data


def synth_logreg(n: int, input_dim: int, theta_true, seed: int = 0) -> Dataset:
    """Standard normal features with Bernoulli labels from a logistic model.

    ``theta_true`` has ``input_dim + 1`` entries, bias first.
    """
    theta = np.asarray(theta_true, dtype=np.float64).reshape(-1)
    if theta.size != input_dim + 1:
        raise DomainError(f"theta_true needs {input_dim + 1} entries")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, input_dim))
    p = expit(theta[0] + x @ theta[1:])
    y = (rng.random(n) < p).astype(np.float64)
    return Dataset(x, y)


def synth_gaussian_mean(n: int, theta_true, noise_var: float = 1.0, seed: int = 0) -> Dataset:
    """Observations ``N(theta_true, noise_var I)`` for the conjugate test model; labels are zero."""
    theta = np.atleast_1d(np.asarray(theta_true, dtype=np.float64))
    rng = np.random.default_rng(seed)
    x = theta + math.sqrt(noise_var) * rng.standard_normal((n, theta.size))
    return Dataset(x, np.zeros(n))


def synth_bernoulli(n: int, p: float, seed: int = 0) -> Dataset:
    """Coin flips for the Beta-Bernoulli test model; features are zero."""
    rng = np.random.default_rng(seed)
    return Dataset(np.zeros((n, 1)), (rng.random(n) < p).astype(np.float64))
