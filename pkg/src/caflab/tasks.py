"""Task sequences: rotated Gaussian-cluster tasks and class splits of CSV data."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .optim import STREAM_SPLIT, substream

__all__ = [
    "Dataset",
    "Task",
    "TaskSequence",
    "SyntheticSpec",
    "CSVFormatError",
    "gen_synthetic_sequence",
    "class_means",
    "load_csv_dataset",
    "save_csv_dataset",
    "split_dataset",
    "export_sequence_csv",
]


class CSVFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"features {x.shape} and labels {y.shape} do not line up")
        if np.isnan(x).any():
            raise ValueError("features contain NaN")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def as_batch(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features, self.labels


@dataclass(frozen=True, eq=False)
class Task:
    train: Dataset
    test: Dataset
    task_id: int

    @property
    def n_classes(self) -> int:
        return self.train.n_classes


@dataclass(eq=False)
class TaskSequence:
    tasks: list[Task]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]

    def subset(self, order: Sequence[int]) -> "TaskSequence":
        """Tasks in ``order``, renumbered 0..len-1."""
        tasks = [Task(self.tasks[i].train, self.tasks[i].test, new) for new, i in enumerate(order)]
        return TaskSequence(tasks, {**self.metadata, "subset": [int(i) for i in order]})


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-cluster tasks; task k's class means are task 0's rotated by k * conflict degrees.

    Rotation acts in the plane of the first two feature axes. ``cluster_sep``
    is the distance between neighbouring class means in units of
    ``noise_sigma``; ``mean_jitter`` (same units) perturbs every task's means
    after rotation. Counts are per class.
    """

    n_tasks: int = 5
    classes_per_task: int = 2
    dim: int = 10
    cluster_sep: float = 6.0
    conflict: float = 60.0
    n_train: int = 100
    n_test: int = 100
    noise_sigma: float = 1.0
    mean_jitter: float = 0.0

    def __post_init__(self):
        for name in ("n_tasks", "classes_per_task", "dim", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.classes_per_task < 2:
            raise ValueError("classes_per_task must be >= 2")
        if not 0.0 <= self.conflict <= 180.0:
            raise ValueError("conflict must lie in [0, 180] degrees")
        if self.noise_sigma <= 0 or self.cluster_sep < 0 or self.mean_jitter < 0:
            raise ValueError("noise_sigma must be positive; cluster_sep and mean_jitter nonnegative")
        if self.dim < 2 and self.conflict != 0.0:
            raise ValueError("rotating class means needs dim >= 2")


def _base_means(spec: SyntheticSpec) -> np.ndarray:
    c = spec.classes_per_task
    sep = spec.cluster_sep * spec.noise_sigma
    means = np.zeros((c, spec.dim))
    if spec.dim == 1:
        means[:, 0] = (np.arange(c) - (c - 1) / 2.0) * sep
        return means
    radius = sep / (2.0 * np.sin(np.pi / c))
    angles = 2.0 * np.pi * np.arange(c) / c
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def class_means(spec: SyntheticSpec, task_index: int, seed: int = 0) -> np.ndarray:
    """Class means (classes_per_task, dim) of one task, jitter included."""
    means = _base_means(spec)
    if spec.dim >= 2:
        a = np.deg2rad(task_index * spec.conflict)
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        means[:, :2] = means[:, :2] @ rot.T
    if spec.mean_jitter > 0:
        rng = substream(seed, STREAM_SPLIT, 1, task_index)
        means = means + rng.normal(0.0, spec.mean_jitter * spec.noise_sigma, size=means.shape)
    return means


def _sample(means: np.ndarray, n: int, sigma: float, rng: np.random.Generator) -> Dataset:
    c, d = means.shape
    labels = np.repeat(np.arange(c), n)
    x = means[labels] + rng.normal(0.0, sigma, size=(c * n, d))
    return Dataset(x, labels, c)


def gen_synthetic_sequence(spec: SyntheticSpec, seed: int = 0) -> TaskSequence:
    tasks = []
    for t in range(spec.n_tasks):
        means = class_means(spec, t, seed)
        train = _sample(means, spec.n_train, spec.noise_sigma, substream(seed, STREAM_SPLIT, 2, t))
        test = _sample(means, spec.n_test, spec.noise_sigma, substream(seed, STREAM_SPLIT, 3, t))
        tasks.append(Task(train, test, t))
    return TaskSequence(tasks, {"generator": "synthetic", "spec": asdict(spec), "seed": int(seed)})


def load_csv_dataset(path: str | Path) -> Dataset:
    """Header row, float feature columns, integer label in the last column."""
    path = Path(path)
    rows, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file") from None
        if len(header) < 2:
            raise CSVFormatError(f"{path}: need at least one feature column and a label column")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CSVFormatError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            feats = []
            for col, cell in zip(header[:-1], row[:-1]):
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise CSVFormatError(f"{path}:{lineno}: column {col!r} value {cell!r} is not numeric") from None
            try:
                label = int(row[-1])
            except ValueError:
                raise CSVFormatError(f"{path}:{lineno}: label {row[-1]!r} is not an integer") from None
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise CSVFormatError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    present = np.unique(y)
    if present[0] != 0 or not np.array_equal(present, np.arange(present.size)):
        raise CSVFormatError(f"{path}: labels must be 0..C-1 with no gaps, found {present.tolist()}")
    return Dataset(np.array(rows, dtype=np.float64), y, int(present.size))


def save_csv_dataset(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def export_sequence_csv(seq: TaskSequence, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for task in seq:
        for split, ds in (("train", task.train), ("test", task.test)):
            p = out_dir / f"task{task.task_id}_{split}.csv"
            save_csv_dataset(ds, p)
            paths.append(p)
    return paths


def _stratified(dataset: Dataset, classes: Sequence[int], rng: np.random.Generator, test_frac: float = 0.2):
    train_idx, test_idx = [], []
    for c in classes:
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(test_frac * idx.size))
        if idx.size >= 2:
            n_test = min(max(n_test, 1), idx.size - 1)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    remap = {c: i for i, c in enumerate(classes)}

    def build(parts):
        idx = np.sort(np.concatenate(parts))
        y = np.array([remap[int(v)] for v in dataset.labels[idx]], dtype=np.int64)
        names = None if dataset.class_names is None else tuple(dataset.class_names[c] for c in classes)
        return Dataset(dataset.features[idx], y, len(classes), names), idx

    train, tr = build(train_idx)
    test, te = build(test_idx)
    return train, test, tr, te


def split_dataset(
    dataset: Dataset,
    mode: str = "random",
    n_tasks: int | None = None,
    group_map: Mapping[int, int] | None = None,
    seed: int = 0,
) -> TaskSequence:
    """Class-disjoint tasks with a per-class stratified 80/20 train/test split.

    ``random`` shuffles the classes and cuts them into ``n_tasks`` equal
    groups; ``grouped`` takes a class -> group map (groups ordered by id).
    """
    c = dataset.n_classes
    rng = substream(seed, STREAM_SPLIT, 4)
    if mode == "random":
        if not n_tasks or n_tasks < 1 or c % n_tasks:
            raise ValueError(f"cannot split {c} classes into {n_tasks} equal tasks")
        order = rng.permutation(c)
        per = c // n_tasks
        groups = [sorted(int(v) for v in order[t * per:(t + 1) * per]) for t in range(n_tasks)]
    elif mode == "grouped":
        if group_map is None or sorted(int(k) for k in group_map) != list(range(c)):
            raise ValueError(f"group_map must assign every class 0..{c - 1}")
        ids = sorted(set(int(v) for v in group_map.values()))
        groups = [sorted(int(k) for k, v in group_map.items() if int(v) == g) for g in ids]
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    tasks, rows = [], []
    for t, classes in enumerate(groups):
        train, test, tr, te = _stratified(dataset, classes, substream(seed, STREAM_SPLIT, 5, t))
        tasks.append(Task(train, test, t))
        rows.append({"train": tr.tolist(), "test": te.tolist()})
    meta = {"generator": "split", "mode": mode, "groups": groups, "seed": int(seed), "rows": rows}
    return TaskSequence(tasks, meta)
