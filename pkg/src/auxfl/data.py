"""Flow datasets: CSV ingestion, auxiliary-label binning, splits, partitions, synthetic data.

CSV schema (UTF-8, header required)::

    label,duration,bandwidth,f_0,f_1,...,f_{n-1}

``label`` is the service class name; class names map to indices in sorted
order. ``duration`` and ``bandwidth`` are raw per-flow values from which the
auxiliary classes are derived by train-fitted quantile bins.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .mtl import Shard


@dataclass(frozen=True)
class FlowSample:
    features: tuple
    main_label: int
    aux_labels: dict = field(default_factory=dict)


@dataclass
class FlowDataset:
    """Column-oriented dataset: ``x`` is ``[n, n_features]``; ``labels`` maps task id to class indices."""

    x: np.ndarray
    labels: dict
    main_task: str = "service"
    class_names: tuple = ()

    def __len__(self):
        return len(self.x)

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "FlowDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return FlowDataset(self.x[idx], {k: v[idx] for k, v in self.labels.items()}, self.main_task, self.class_names)

    def sample(self, i: int) -> FlowSample:
        aux = {k: int(v[i]) for k, v in self.labels.items() if k != self.main_task}
        return FlowSample(tuple(self.x[i]), int(self.labels[self.main_task][i]), aux)

    def shard(self, tasks: Sequence[str] | None = None, input_shape=None) -> Shard:
        """Training view; ``input_shape`` reshapes rows (e.g. ``(1, n)`` for Conv1D input)."""
        tasks = list(self.labels) if tasks is None else list(tasks)
        x = self.x if input_shape is None else self.x.reshape((len(self.x),) + tuple(input_shape))
        return Shard(x, {t: self.labels[t] for t in tasks})


def load_flows(path):
    """Parse a flow CSV. Returns ``(dataset, raw)`` with ``raw = {"duration": ..., "bandwidth": ...}``."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:3] != ["label", "duration", "bandwidth"] or len(header) < 4:
            raise DataError(f"{path}:1: header must start with label,duration,bandwidth followed by feature columns")
        n_feat = len(header) - 3
        names, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            label = row[0].strip()
            if not label:
                raise DataError(f"{path}:{lineno}: empty label")
            try:
                values = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            if not np.all(np.isfinite(values)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            names.append(label)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    classes = tuple(sorted(set(names)))
    index = {c: i for i, c in enumerate(classes)}
    table = np.array(rows, dtype=np.float64).reshape(len(rows), n_feat + 2)
    dataset = FlowDataset(
        x=table[:, 2:].copy(),
        labels={"service": np.array([index[n] for n in names], dtype=np.int64)},
        main_task="service",
        class_names=classes,
    )
    raw = {"duration": table[:, 0].copy(), "bandwidth": table[:, 1].copy()}
    return dataset, raw


class QuantileBinner:
    """Equal-frequency bins with boundaries fitted on training values only.

    A value ``v`` falls in bin ``k`` when ``b[k-1] <= v < b[k]``; values below
    the first boundary go to bin 0 and above the last to the top bin.
    """

    def __init__(self, n_bins: int = 3):
        if n_bins < 2:
            raise ConfigError("need at least 2 bins")
        self.n_bins = n_bins
        self.boundaries = None

    def fit(self, values) -> "QuantileBinner":
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            raise DataError("cannot fit bins on an empty column")
        qs = np.quantile(values, np.arange(1, self.n_bins) / self.n_bins)
        if np.any(np.diff(qs) <= 0) or qs[0] <= values.min():
            raise ConfigError(
                f"column has too few distinct values for {self.n_bins} quantile bins; use fewer bins"
            )
        self.boundaries = qs
        return self

    def transform(self, values) -> np.ndarray:
        if self.boundaries is None:
            raise RuntimeError("binner is not fitted")
        return np.searchsorted(self.boundaries, np.asarray(values, dtype=np.float64), side="right").astype(np.int64)


def derive_aux_labels(raw_train, raw_all, n_bins):
    """Fit one binner per raw column on ``raw_train`` and label ``raw_all`` with it.

    ``n_bins`` maps column name to bin count. Returns ``(labels, binners)``.
    """
    labels, binners = {}, {}
    for name, k in n_bins.items():
        binner = QuantileBinner(k).fit(raw_train[name])
        binners[name] = binner
        labels[name] = binner.transform(raw_all[name])
    return labels, binners


def split_counts(n: int, ratios: Sequence[float]):
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios {list(ratios)} do not sum to 1")
    counts = [int(np.floor(r * n + 1e-9)) for r in ratios[:-1]]
    counts.append(n - sum(counts))
    if min(counts) < 1:
        raise ConfigError(f"split of {n} samples by {list(ratios)} leaves an empty part")
    return counts


def split(n: int, ratios: Sequence[float], seed: int):
    """Seeded shuffle of ``range(n)`` cut into contiguous parts of ``floor(ratio * n)``.

    The last part takes the remainder.
    """
    counts = split_counts(n, ratios)
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5117])).permutation(n)
    return np.split(order, np.cumsum(counts)[:-1])


@dataclass
class DatasetSplit:
    train: FlowDataset
    validation: FlowDataset
    test: FlowDataset


def train_val_test(dataset: FlowDataset, test_fraction: float, validation_fraction: float, seed: int) -> DatasetSplit:
    """Hold out ``test_fraction`` for test, then ``validation_fraction`` of the rest for validation."""
    train_idx, test_idx = split(len(dataset), [1 - test_fraction, test_fraction], seed)
    if validation_fraction > 0:
        tr, va = split(len(train_idx), [1 - validation_fraction, validation_fraction], seed + 1)
        train_idx, val_idx = train_idx[tr], train_idx[va]
    else:
        val_idx = np.zeros(0, dtype=np.int64)
    return DatasetSplit(dataset.subset(train_idx), dataset.subset(val_idx), dataset.subset(test_idx))


@dataclass
class PartitionPlan:
    mode: str
    n_stations: int
    seed: int
    alpha: float = 0.5
    shards: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "mode": self.mode,
            "n_stations": self.n_stations,
            "seed": self.seed,
            "alpha": self.alpha,
            "shards": [[int(i) for i in s] for s in self.shards],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        doc = json.loads(text)
        plan = cls(doc["mode"], doc["n_stations"], doc["seed"], doc["alpha"])
        plan.shards = [np.array(s, dtype=np.int64) for s in doc["shards"]]
        return plan


def partition(labels, n_stations: int, mode: str = "dirichlet", alpha: float = 0.5, seed: int = 0) -> PartitionPlan:
    """Assign sample indices to stations.

    ``iid``: shuffle, stable-sort by class, then deal round-robin, so every
    station's per-class count is within one of the global share.
    ``dirichlet``: per class, station proportions ~ Dirichlet(alpha); empty
    shards are then filled by moving single samples from the largest shard.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n_stations < 1:
        raise ConfigError("need at least one station")
    if n_stations > n:
        raise ConfigError(f"cannot give {n_stations} stations a non-empty shard from {n} samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A27]))
    if mode == "iid":
        order = rng.permutation(n)
        order = order[np.argsort(labels[order], kind="stable")]
        shards = [order[u::n_stations] for u in range(n_stations)]
    elif mode == "dirichlet":
        if not alpha > 0:
            raise ConfigError("Dirichlet alpha must be > 0")
        buckets = [[] for _ in range(n_stations)]
        for c in np.unique(labels):
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(n_stations, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for u, part in enumerate(np.split(idx, cuts)):
                buckets[u].extend(part.tolist())
        for u in range(n_stations):
            while not buckets[u]:
                donor = max(range(n_stations), key=lambda v: (len(buckets[v]), -v))
                buckets[u].append(buckets[donor].pop())
        shards = [np.sort(np.array(b, dtype=np.int64)) for b in buckets]
    else:
        raise ConfigError(f"unknown partition mode {mode!r}")
    return PartitionPlan(mode, n_stations, seed, alpha, [np.asarray(s, dtype=np.int64) for s in shards])


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic multi-task generator settings.

    ``classes`` lists class counts with the main task first; auxiliary tasks
    are coarse groupings of the main classes, so they share structure with it.
    """

    classes: tuple = (5, 3, 3)
    task_ids: tuple = ("service", "duration", "bandwidth")
    n_samples: int = 3000
    n_features: int = 32
    noise: float = 1.0
    label_noise: float = 0.1
    seed: int = 0


def synth_generate(spec: SynthSpec) -> FlowDataset:
    """Gaussian clusters around per-class prototypes with derived auxiliary labels.

    Each main class gets a random prototype feature vector and a random latent
    coordinate per auxiliary task; an auxiliary label is the bin of its class's
    latent coordinate, replaced by a uniform draw with probability
    ``label_noise``.
    """
    if len(spec.classes) != len(spec.task_ids) or len(spec.classes) < 1:
        raise ConfigError("synthetic spec needs one class count per task id")
    if min(spec.classes) < 2 or spec.n_samples < 1 or spec.n_features < 1:
        raise ConfigError("synthetic spec sizes must be positive (class counts >= 2)")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5E7]))
    n_main = spec.classes[0]
    prototypes = rng.standard_normal((n_main, spec.n_features))
    main = rng.integers(0, n_main, size=spec.n_samples)
    x = prototypes[main] + spec.noise * rng.standard_normal((spec.n_samples, spec.n_features))
    labels = {spec.task_ids[0]: main.astype(np.int64)}
    for tid, k in zip(spec.task_ids[1:], spec.classes[1:]):
        # surjective class -> bin map whenever n_main >= k
        latent = rng.permutation(n_main) / n_main
        groups = np.minimum((latent * k).astype(np.int64), k - 1)
        aux = groups[main]
        flip = rng.random(spec.n_samples) < spec.label_noise
        aux = np.where(flip, rng.integers(0, k, size=spec.n_samples), aux)
        labels[tid] = aux.astype(np.int64)
    return FlowDataset(x, labels, spec.task_ids[0], tuple(f"class_{i}" for i in range(n_main)))
