"""Task-incremental training loop, consolidation, scratch baselines and grid search."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .consolidate import accumulate, mcl_importance
from .metrics import AccuracyMatrix, UndefinedMetricError, diversity, metrics_report
from .model import DiversityBackground, MCLModel, draw_dropout_masks, init_head, init_mcl, learner_predictions, mcl_forward
from .numerics import LearnerSpec
from .optim import STREAM_DROPOUT, STREAM_SPLIT, TrainConfig, minimize, substream
from .regularize import ConsolidationState, RegConfig, af2_expand, caf_loss, pack_params, unpack_params
from .tasks import Task, TaskSequence

__all__ = [
    "ModelConfig",
    "RunState",
    "RunResult",
    "GridSpec",
    "GridCell",
    "new_run_state",
    "train_task",
    "consolidate_after_task",
    "evaluate",
    "run_sequence",
    "scratch_baseline",
    "grid_search",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of every learner plus how many learners and how they differ."""

    spec: LearnerSpec
    k: int = 1
    background: DiversityBackground | str = DiversityBackground.HIGH

    def build(self, seed: int) -> MCLModel:
        return init_mcl(self.spec, self.k, self.background, seed)


@dataclass
class RunState:
    model: MCLModel
    consolidation: ConsolidationState
    accuracy: AccuracyMatrix
    history: dict[int, list[float]] = field(default_factory=dict)
    alpha_sums: list[float] = field(default_factory=list)
    tasks_done: int = 0


def new_run_state(model: MCLModel, n_tasks: int) -> RunState:
    return RunState(model, ConsolidationState(), AccuracyMatrix.empty(n_tasks))


def _ensure_head(model: MCLModel, task: Task) -> None:
    if task.task_id not in model.heads:
        model.heads[task.task_id] = init_head(model, task.task_id, task.n_classes)


def train_task(state: RunState, task: Task, reg: RegConfig, train: TrainConfig) -> RunState:
    """Optimise ``caf_loss`` on one task, in place.

    The task head is created first. Batch order and dropout masks come from
    sub-streams of ``train.seed`` keyed by (task, epoch, batch). Optimizer
    state starts fresh.
    """
    x, y = task.train.as_batch()
    if x.shape[0] == 0:
        raise ValueError(f"task {task.task_id} has no training data")
    model = state.model
    _ensure_head(model, task)
    tid = task.task_id
    cons = state.consolidation
    if reg.af_mode == "af2" and cons.has_old_tasks:
        cons.expansion = af2_expand(model, tid, (x, y), train, reg.expansion_epochs)
    with_mod = reg.modulated and model.k > 1

    def loss_grad(flat, idx, epoch, b):
        unpack_params(model, tid, flat, with_mod)
        masks = draw_dropout_masks(model, idx.size, substream(train.seed, STREAM_DROPOUT, tid, epoch, b))
        res = caf_loss(model, (x[idx], y[idx]), tid, cons, reg, masks)
        state.alpha_sums.append(float(res.alpha.sum()))
        return res.total, res.flat_grad(with_mod)

    try:
        flat, hist = minimize(loss_grad, pack_params(model, tid, with_mod), x.shape[0], train, task=tid)
    except FloatingPointError as exc:
        raise FloatingPointError(f"training diverged: {exc}") from exc
    unpack_params(model, tid, flat, with_mod)
    state.history[tid] = hist
    return state


def consolidate_after_task(state: RunState, task: Task, reg: RegConfig) -> RunState:
    """Snapshot every theta_i and add this task's importance to the running sum."""
    model = state.model
    cons = state.consolidation
    new = mcl_importance(reg.importance_kind, model, task.task_id, task.train.as_batch())
    old = cons.importance or [None] * model.k
    cons.importance = [accumulate(o, n) for o, n in zip(old, new)]
    cons.snapshots = [model.theta(i) for i in range(model.k)]
    cons.expansion = None
    state.tasks_done += 1
    return state


def evaluate(model: MCLModel, task: Task) -> float:
    """Test accuracy with the deterministic (dropout-off) forward pass."""
    x, y = task.test.as_batch()
    pred = np.argmax(mcl_forward(model, x, task.task_id), axis=1)
    return float(np.mean(pred == y))


def scratch_baseline(task: Task, train: TrainConfig, model_cfg: ModelConfig, seed: int | None = None) -> float:
    """Accuracy of a fresh model trained on ``task`` alone."""
    seed = train.seed if seed is None else seed
    state = new_run_state(model_cfg.build(seed), 1)
    train_task(state, task, RegConfig(), replace(train, seed=seed))
    return evaluate(state.model, task)


@dataclass
class RunResult:
    state: RunState
    metrics: dict[str, Any]


def _diversity_report(model: MCLModel, seq: TaskSequence) -> dict[str, float | None]:
    if model.k < 2:
        return {"cos": None, "euc": None}
    cos, euc = [], []
    for task in seq:
        c, e = diversity(np.stack(learner_predictions(model, task.test.features, task.task_id)))
        cos.append(c)
        euc.append(e)
    return {"cos": float(np.mean(cos)), "euc": float(np.mean(euc))}


def run_sequence(
    seq: TaskSequence,
    reg: RegConfig,
    train: TrainConfig,
    model_cfg: ModelConfig,
    seed: int = 0,
    with_scratch: bool = True,
) -> RunResult:
    """Train tasks in order, filling the accuracy matrix after each one.

    Before task i is trained its test accuracy is measured once with its
    freshly initialised head (used by FWT).
    """
    if len(seq) < 1:
        raise ValueError("a sequence needs at least one task")
    train = replace(train, seed=seed)
    state = new_run_state(model_cfg.build(seed), len(seq))
    A = state.accuracy
    for t, task in enumerate(seq):
        _ensure_head(state.model, task)
        A.pre[t] = evaluate(state.model, task)
        train_task(state, task, reg, train)
        consolidate_after_task(state, task, reg)
        for i in range(t + 1):
            A.a[t, i] = evaluate(state.model, seq[i])
    if with_scratch:
        for t, task in enumerate(seq):
            A.scratch[t] = scratch_baseline(task, train, model_cfg, seed)
    metrics = metrics_report(A)
    metrics.update(_diversity_report(state.model, seq))
    metrics["alpha"] = [float(v) for v in state.model.modulation.alpha]
    return RunResult(state, metrics)


# --- grid search ----------------------------------------------------------------


_REG_FIELDS = {f.name for f in fields(RegConfig)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass(frozen=True)
class GridSpec:
    """Axes map RegConfig or TrainConfig field names to candidate values.

    ``protocol`` is ``"full"`` (whole sequence) or ``"cv"``, which scores
    cells on ``cv_tasks`` tasks drawn at random from the sequence.
    """

    axes: Mapping[str, Sequence[Any]]
    protocol: str = "full"
    cv_tasks: int | None = None

    def __post_init__(self):
        if not self.axes or any(len(v) == 0 for v in self.axes.values()):
            raise ValueError("grid axes must be nonempty")
        unknown = set(self.axes) - _REG_FIELDS - _TRAIN_FIELDS
        if unknown:
            raise ValueError(f"unknown grid axes: {sorted(unknown)}")
        if self.protocol not in ("full", "cv"):
            raise ValueError(f"unknown grid protocol {self.protocol!r}")
        if self.protocol == "cv" and (self.cv_tasks is None or self.cv_tasks < 1):
            raise ValueError("cv protocol needs cv_tasks >= 1")

    def cells(self) -> list[dict[str, Any]]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]


@dataclass
class GridCell:
    params: dict[str, Any]
    aac: float
    fwt: float | None
    bwt: float | None
    reg: RegConfig
    train: TrainConfig

    def sort_key(self):
        return (-self.aac, -self.reg.lambda_sp, self.reg.lambda_af)


def _apply_cell(cell, reg: RegConfig, train: TrainConfig):
    reg_changes = {k: v for k, v in cell.items() if k in _REG_FIELDS}
    train_changes = {k: v for k, v in cell.items() if k in _TRAIN_FIELDS}
    return reg.replace(**reg_changes), replace(train, **train_changes)


def grid_search(
    seq: TaskSequence | Callable[[int], TaskSequence],
    grid: GridSpec,
    reg: RegConfig,
    train: TrainConfig,
    model_cfg: ModelConfig,
    seeds: Sequence[int] = (0,),
    with_scratch: bool = True,
) -> list[GridCell]:
    """Score every cell by mean AAC over ``seeds``; best first.

    ``seq`` is either one sequence shared by all seeds or a function giving
    each seed its own. Ties go to the larger lambda_sp, then the smaller
    lambda_af.
    """
    if not seeds:
        raise ValueError("grid search needs at least one seed")
    make = seq if callable(seq) else (lambda s: seq)
    seqs = {s: make(s) for s in seeds}
    if grid.protocol == "cv":
        for s, q in seqs.items():
            n = min(grid.cv_tasks, len(q))
            seqs[s] = q.subset(substream(s, STREAM_SPLIT, 6).permutation(len(q))[:n])
    out = []
    for cell in grid.cells():
        r, tr = _apply_cell(cell, reg, train)
        runs = [run_sequence(seqs[s], r, tr, model_cfg, s, with_scratch).metrics for s in seeds]

        def mean(key):
            vals = [m[key] for m in runs]
            return None if any(v is None for v in vals) else float(np.mean(vals))

        out.append(GridCell(cell, mean("aac"), mean("fwt"), mean("bwt"), r, tr))
    out.sort(key=GridCell.sort_key)
    return out
