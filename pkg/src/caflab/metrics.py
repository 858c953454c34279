"""Transfer metrics, learner diversity, and loss-landscape / task-divergence probes."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import MCLModel, mcl_backward, mcl_forward_with_cache
from .numerics import log_softmax
from .optim import STREAM_PROBE, substream

__all__ = [
    "UndefinedMetricError",
    "AccuracyMatrix",
    "ProbeConfig",
    "aac",
    "fwt",
    "fwt_diagonal",
    "bwt",
    "diversity",
    "discrimination_error",
    "train_discriminator",
    "ModelObjective",
    "flatness_probe",
    "FlatnessResult",
    "robust_risk",
    "RobustRiskResult",
    "robust_risk_curve",
    "metrics_report",
    "write_metrics_csv",
]

DISCRIMINATOR_STEPS = 200
DISCRIMINATOR_LR = 0.1


class UndefinedMetricError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    """``a[t, i]`` = test accuracy on task i after training task t (i <= t).

    ``pre[i]`` holds task i's accuracy just before it is trained (its head at
    standard init); ``scratch[i]`` the from-scratch accuracy. Unset entries
    are NaN.
    """

    a: np.ndarray
    scratch: np.ndarray
    pre: np.ndarray

    @classmethod
    def empty(cls, n_tasks: int) -> "AccuracyMatrix":
        return cls(np.full((n_tasks, n_tasks), np.nan), np.full(n_tasks, np.nan), np.full(n_tasks, np.nan))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], scratch=None, pre=None) -> "AccuracyMatrix":
        T = len(rows)
        m = cls.empty(T)
        for t, row in enumerate(rows):
            if len(row) != t + 1:
                raise ValueError(f"row {t} must have {t + 1} entries")
            m.a[t, :t + 1] = row
        if scratch is not None:
            m.scratch[:] = scratch
        if pre is not None:
            m.pre[:] = pre
        return m

    @property
    def n_tasks(self) -> int:
        return self.a.shape[0]

    def completed(self) -> int:
        """Number of rows filled in."""
        return int(sum(not np.isnan(self.a[t, t]) for t in range(self.n_tasks)))

    def to_dict(self) -> dict:
        def clean(v):
            return [None if np.isnan(x) else float(x) for x in v]

        return {
            "a": [clean(self.a[t, :t + 1]) for t in range(self.n_tasks)],
            "scratch": clean(self.scratch),
            "pre": clean(self.pre),
        }

    def write_csv(self, path: str | Path) -> None:
        """Rows are t, columns i; entries above the diagonal are left blank."""
        T = self.n_tasks
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"task{i}" for i in range(T)])
            for t in range(T):
                w.writerow([t] + [repr(float(self.a[t, i])) if i <= t and not np.isnan(self.a[t, i]) else ""
                                  for i in range(T)])


def _final_row(A: AccuracyMatrix) -> np.ndarray:
    T = A.n_tasks
    row = A.a[T - 1, :T]
    if np.isnan(row).any():
        raise UndefinedMetricError("accuracy matrix is incomplete")
    return row


def aac(A: AccuracyMatrix) -> float:
    """Mean final accuracy over all tasks."""
    if A.n_tasks < 1:
        raise UndefinedMetricError("AAC needs at least one task")
    return float(_final_row(A).mean())


def bwt(A: AccuracyMatrix) -> float:
    """Mean over i < T of ``A[T, i] - A[i, i]``."""
    T = A.n_tasks
    if T < 2:
        raise UndefinedMetricError("BWT needs at least two tasks")
    final = _final_row(A)
    diag = np.diag(A.a)
    return float(np.mean(final[:T - 1] - diag[:T - 1]))


def fwt(A: AccuracyMatrix) -> float:
    """Mean over i >= 2 of ``A[i-1, i] - scratch[i]`` (pre-training accuracy vs scratch)."""
    T = A.n_tasks
    if T < 2:
        raise UndefinedMetricError("FWT needs at least two tasks")
    gains = A.pre[1:] - A.scratch[1:]
    if np.isnan(gains).any():
        raise UndefinedMetricError("FWT needs pre-training and scratch accuracies for tasks 2..T")
    return float(np.mean(gains))


def fwt_diagonal(A: AccuracyMatrix) -> float:
    """Mean over i >= 2 of ``A[i, i] - scratch[i]``: how well each new task is learned."""
    T = A.n_tasks
    if T < 2:
        raise UndefinedMetricError("FWT needs at least two tasks")
    gains = np.diag(A.a)[1:] - A.scratch[1:]
    if np.isnan(gains).any():
        raise UndefinedMetricError("diagonal FWT needs diagonal and scratch accuracies")
    return float(np.mean(gains))


def diversity(predictions) -> tuple[float, float]:
    """(Cos, Euc) over ordered learner pairs.

    ``predictions`` is (K, C) or (K, N, C); with a sample axis the per-sample
    values are averaged.
    """
    p = np.asarray(predictions, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, None, :]
    k = p.shape[0]
    if k < 2:
        raise UndefinedMetricError("diversity needs at least two learners")
    norms = np.linalg.norm(p, axis=2)
    cos_sum = np.zeros(p.shape[1])
    euc_sum = np.zeros(p.shape[1])
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            cos_sum += (p[i] * p[j]).sum(axis=1) / (norms[i] * norms[j])
            euc_sum += np.linalg.norm(p[i] - p[j], axis=1)
    pairs = k * (k - 1)
    return float(np.mean(1.0 - cos_sum / pairs)), float(np.mean(euc_sum / pairs))


# --- task-divergence probe ----------------------------------------------------


def _bce(z: np.ndarray, y: np.ndarray) -> float:
    # log(1 + e^-z) for positives, log(1 + e^z) for negatives
    s = np.where(y > 0, -z, z)
    return float(np.mean(np.logaddexp(0.0, s)))


def train_discriminator(pos: np.ndarray, neg: np.ndarray, rng: np.random.Generator) -> tuple[float, float]:
    """One-layer logistic discriminator, positives vs negatives.

    Both sides are subsampled to the same size and halved into train and
    held-out parts. Features are centred and scaled by the training
    within-class spread, then fitted by full-batch gradient descent. Returns (held-out BCE, held-out error rate).
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    n = min(pos.shape[0], neg.shape[0])
    if n < 2:
        raise ValueError("each side of the discriminator needs at least 2 samples")
    pos = pos[rng.permutation(pos.shape[0])[:n]]
    neg = neg[rng.permutation(neg.shape[0])[:n]]
    h = n // 2
    x_tr = np.vstack([pos[:h], neg[:h]])
    y_tr = np.concatenate([np.ones(h), np.zeros(h)])
    x_te = np.vstack([pos[h:], neg[h:]])
    y_te = np.concatenate([np.ones(n - h), np.zeros(n - h)])
    # within-class spread, so separation is measured in noise units
    mu = x_tr.mean(axis=0)
    sd = np.sqrt(0.5 * (pos[:h].var(axis=0) + neg[:h].var(axis=0)))
    sd = np.where(sd > 0, sd, 1.0)
    x_tr = (x_tr - mu) / sd
    x_te = (x_te - mu) / sd
    w = np.zeros(x_tr.shape[1])
    b = 0.0
    for _ in range(DISCRIMINATOR_STEPS):
        z = x_tr @ w + b
        r = 1.0 / (1.0 + np.exp(-z)) - y_tr
        w -= DISCRIMINATOR_LR * (x_tr.T @ r) / y_tr.size
        b -= DISCRIMINATOR_LR * r.mean()
    z = x_te @ w + b
    err = float(np.mean((z > 0) != (y_te > 0)))
    return _bce(z, y_te), err


def discrimination_error(features: Sequence[np.ndarray], seed: int = 0) -> list[float]:
    """Held-out BCE per task of a discriminator telling that task's features from the rest.

    Larger values mean the task is harder to tell apart from the others.
    """
    if len(features) < 2:
        raise ValueError("discrimination needs at least two tasks")
    for k, f in enumerate(features):
        if np.asarray(f).shape[0] < 2:
            raise ValueError(f"task {k} has fewer than 2 feature samples")
    out = []
    for k, f in enumerate(features):
        others = np.vstack([g for j, g in enumerate(features) if j != k])
        bce, _ = train_discriminator(f, others, substream(seed, STREAM_PROBE, 1, k))
        out.append(bce)
    return out


# --- parameter-space probes ---------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    b: float = 1.0
    n_directions: int = 8
    n_radii: int = 11
    n_ascent_steps: int = 20
    ascent_lr: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.b < 0:
            raise ValueError("perturbation radius b must be >= 0")
        if self.n_directions < 1 or self.n_ascent_steps < 0:
            raise ValueError("n_directions must be >= 1 and n_ascent_steps >= 0")
        if self.n_radii < 2:
            raise ValueError("n_radii must be >= 2 (radius 0 is always included)")


class ModelObjective:
    """Mean training cross-entropy over a set of tasks, as a function of a flat vector.

    The vector stacks every learner's theta_i followed by the heads of the
    given tasks in order.
    """

    def __init__(self, model: MCLModel, datasets: Sequence[tuple[int, np.ndarray, np.ndarray]]):
        self.model = model.copy()
        self.datasets = [(int(t), np.asarray(x, dtype=np.float64), np.asarray(y)) for t, x, y in datasets]
        self._theta_sizes = [self.model.theta(i).size for i in range(self.model.k)]
        self._head_sizes = [self.model.head(t).size for t, _, _ in self.datasets]

    def theta0(self) -> np.ndarray:
        parts = [self.model.theta(i).data for i in range(self.model.k)]
        parts += [self.model.head(t).data for t, _, _ in self.datasets]
        return np.concatenate(parts)

    def _load(self, flat: np.ndarray) -> MCLModel:
        m = self.model.copy()
        off = 0
        for i, n in enumerate(self._theta_sizes):
            m.set_theta(i, flat[off:off + n])
            off += n
        for (t, _, _), n in zip(self.datasets, self._head_sizes):
            m.heads[t] = m.heads[t].with_data(flat[off:off + n])
            off += n
        return m

    def __call__(self, flat: np.ndarray) -> float:
        m = self._load(flat)
        total = 0.0
        for t, x, y in self.datasets:
            logits = mcl_forward_with_cache(m, x, t).logits
            total += -log_softmax(logits)[np.arange(y.size), y].mean()
        return float(total / len(self.datasets))

    def value_and_grad(self, flat: np.ndarray) -> tuple[float, np.ndarray]:
        m = self._load(flat)
        n_tasks = len(self.datasets)
        total = 0.0
        theta_g = [np.zeros(n) for n in self._theta_sizes]
        head_g = []
        for t, x, y in self.datasets:
            cache = mcl_forward_with_cache(m, x, t)
            logp = log_softmax(cache.logits)
            total += -logp[np.arange(y.size), y].mean()
            d = np.exp(logp)
            d[np.arange(y.size), y] -= 1.0
            d /= y.size * n_tasks
            g = mcl_backward(m, cache, t, d)
            for i in range(m.k):
                theta_g[i] += g.theta(i)
            head_g.append(g.head)
        return float(total / n_tasks), np.concatenate(theta_g + head_g)


def _unit_directions(n_dir: int, dim: int, seed: int) -> np.ndarray:
    rng = substream(seed, STREAM_PROBE, 2)
    d = rng.normal(size=(n_dir, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class FlatnessResult:
    radii: np.ndarray
    curves: np.ndarray  # (n_directions, n_radii)
    base: float
    directions: str = "uniform on the unit sphere, scaled by radius"

    @property
    def mean_curve(self) -> np.ndarray:
        return self.curves.mean(axis=0)


def flatness_probe(objective: Callable[[np.ndarray], float], theta: np.ndarray, probe: ProbeConfig,
                   directions: np.ndarray | None = None) -> FlatnessResult:
    """Objective along random unit directions at radii ``linspace(0, b, n_radii)``.

    The radius-0 column is the unperturbed objective itself.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if directions is None:
        directions = _unit_directions(probe.n_directions, theta.size, probe.seed)
    radii = np.linspace(0.0, probe.b, probe.n_radii)
    base = objective(theta)
    curves = np.empty((directions.shape[0], radii.size))
    curves[:, 0] = base
    for d_idx, d in enumerate(directions):
        for r_idx in range(1, radii.size):
            r = radii[r_idx]
            curves[d_idx, r_idx] = base if r == 0.0 else objective(theta + r * d)
    return FlatnessResult(radii, curves, base)


@dataclass
class RobustRiskResult:
    value: float
    base: float
    b: float
    delta: np.ndarray
    points: list[np.ndarray] = field(default_factory=list)


def _project(delta: np.ndarray, b: float) -> np.ndarray:
    n = np.linalg.norm(delta)
    return delta if n <= b else delta * (b / n)


def robust_risk(value_and_grad, theta: np.ndarray, probe: ProbeConfig,
                reuse: Sequence[np.ndarray] = ()) -> RobustRiskResult:
    """Approximate ``max_{||delta|| <= b} f(theta + delta)``.

    Each of ``n_directions`` random boundary starts is refined by
    normalised projected gradient ascent (step ``ascent_lr * b``). Every
    visited point, delta = 0 and any ``reuse`` points (projected into the
    ball) enter the max, so the result never falls below f(theta).
    """
    theta = np.asarray(theta, dtype=np.float64)
    base, _ = value_and_grad(theta)
    best, best_delta = base, np.zeros_like(theta)
    points: list[np.ndarray] = []
    if probe.b == 0.0:
        return RobustRiskResult(base, base, 0.0, best_delta, points)

    def consider(delta):
        nonlocal best, best_delta
        v, g = value_and_grad(theta + delta)
        points.append(delta)
        if v > best:
            best, best_delta = v, delta
        return g

    for delta in reuse:
        consider(_project(np.asarray(delta, dtype=np.float64), probe.b))
    step = probe.ascent_lr * probe.b
    for d in _unit_directions(probe.n_directions, theta.size, probe.seed):
        delta = probe.b * d
        g = consider(delta)
        for _ in range(probe.n_ascent_steps):
            gn = np.linalg.norm(g)
            if gn == 0.0:
                break
            delta = _project(delta + step * g / gn, probe.b)
            g = consider(delta)
    return RobustRiskResult(float(best), float(base), probe.b, best_delta, points)


def robust_risk_curve(value_and_grad, theta, radii: Sequence[float], probe: ProbeConfig) -> list[RobustRiskResult]:
    """Robust risk at increasing radii, each search seeded with all earlier points."""
    out = []
    carried: list[np.ndarray] = []
    for b in sorted(radii):
        cfg = ProbeConfig(b=b, n_directions=probe.n_directions, n_radii=probe.n_radii,
                          n_ascent_steps=probe.n_ascent_steps, ascent_lr=probe.ascent_lr, seed=probe.seed)
        res = robust_risk(value_and_grad, theta, cfg, reuse=carried)
        carried = carried + res.points
        out.append(res)
    return out


def metrics_report(A: AccuracyMatrix) -> dict:
    """Flat metric dictionary; metrics undefined for this matrix are None."""
    out = {"n_tasks": A.n_tasks}
    for name, fn in (("aac", aac), ("fwt", fwt), ("fwt_diagonal", fwt_diagonal), ("bwt", bwt)):
        try:
            out[name] = fn(A)
        except UndefinedMetricError:
            out[name] = None
    return out


def write_metrics_csv(rows: Sequence[tuple[str, int | None, float | None]], path: str | Path) -> None:
    """Long format: metric, task, value (task blank for sequence-level metrics)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "task", "value"])
        for metric, task, value in rows:
            w.writerow([metric, "" if task is None else task, "" if value is None else repr(float(value))])


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
