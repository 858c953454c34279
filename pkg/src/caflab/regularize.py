"""Penalty terms for continual training and the combined multi-learner loss.

Terms:

* stability: ``(lambda_sp/2) sum_m xi_m (theta_m - theta*_m)^2`` against the
  previous-task snapshot, weighted by accumulated importance;
* AF-1: ``(lambda_af_i/2) ||theta_i||^2`` per learner;
* AF-2: ``(lambda_af/2) sum_m I_e,m (theta_m - theta_e,m)^2`` against a
  solution trained on the current task alone (single learner only);
* AF-S: ``sum_{i != j} gamma_ij * mean_n KL(p_i || p_j)`` between learner
  predictions, probabilities clamped below at ``KL_EPS``.

Per-learner strengths come from softmax-normalised free parameters so that
their mean stays pinned to the configured ``lambda_af`` and ``gamma``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .consolidate import ImportanceVector, mcl_fisher
from .model import MCLModel, ModulationState, mcl_backward, mcl_forward_with_cache, learner_logits, pair_index
from .numerics import LayoutError, ParamVector, log_softmax, softmax
from .optim import STREAM_EXPANSION, TrainConfig, minimize

__all__ = [
    "KL_EPS",
    "InvalidStateError",
    "RegConfig",
    "ModulationState",
    "ExpansionState",
    "ConsolidationState",
    "stability_term",
    "af1_term",
    "af2_term",
    "afs_term",
    "modulate",
    "modulate_backward",
    "af2_expand",
    "fit_expansion",
    "caf_loss",
    "CAFResult",
    "pack_params",
    "unpack_params",
]

KL_EPS = 1e-12
AF_MODES = ("none", "af1", "af2")


class InvalidStateError(RuntimeError):
    """The regulariser configuration cannot be evaluated in the current state."""


@dataclass(frozen=True)
class RegConfig:
    importance_kind: str = "fisher"
    lambda_sp: float = 0.0
    lambda_af: float = 0.0
    gamma: float = 0.0
    beta: float | None = None
    af_mode: str = "none"
    modulated: bool = False
    af_from_first_task: bool = False
    expansion_epochs: int | None = None
    afs_stop_grad: bool = True

    def __post_init__(self):
        if self.importance_kind not in ("fisher", "mas"):
            raise ValueError(f"unknown importance kind {self.importance_kind!r}")
        for name in ("lambda_sp", "lambda_af", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.beta is not None and not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.af_mode not in AF_MODES:
            raise ValueError(f"af_mode must be one of {AF_MODES}")
        if self.af_mode == "af2" and (self.expansion_epochs is None or self.expansion_epochs < 0):
            raise ValueError("af2 needs a nonnegative expansion_epochs budget")

    @classmethod
    def from_beta(cls, c: float, beta: float, af_mode: str = "af1", **kw) -> "RegConfig":
        """Forgetting-rate parameterisation.

        AF-1: lambda_sp = c (1 - beta), lambda_af = c beta.
        AF-2: lambda_sp = c, lambda_af = c beta / (1 - beta).
        """
        if not 0.0 <= beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if af_mode == "af1":
            return cls(lambda_sp=c * (1.0 - beta), lambda_af=c * beta, beta=beta, af_mode=af_mode, **kw)
        if af_mode == "af2":
            if beta >= 1.0:
                raise ValueError("af2 needs beta < 1")
            return cls(lambda_sp=c, lambda_af=c * beta / (1.0 - beta), beta=beta, af_mode=af_mode, **kw)
        raise ValueError("from_beta applies to af1 or af2")

    def replace(self, **changes) -> "RegConfig":
        d = dict(self.__dict__)
        d.update(changes)
        return RegConfig(**d)


@dataclass(frozen=True)
class ExpansionState:
    theta_e: ParamVector
    importance_e: ImportanceVector


@dataclass
class ConsolidationState:
    """Per-learner snapshots and accumulated importances (None before task 2)."""

    snapshots: list[ParamVector] | None = None
    importance: list[ImportanceVector] | None = None
    expansion: ExpansionState | None = None

    @property
    def has_old_tasks(self) -> bool:
        return self.snapshots is not None


def _arr(v) -> np.ndarray:
    return v.data if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64)


def _match(*vs) -> None:
    pvs = [v for v in vs if isinstance(v, ParamVector)]
    for a in pvs[1:]:
        pvs[0].check_layout(a)
    sizes = {_arr(v).size for v in vs}
    if len(sizes) != 1:
        raise LayoutError(f"vector sizes differ: {sorted(sizes)}")


def stability_term(theta, snapshot, xi, lambda_sp: float) -> tuple[float, np.ndarray]:
    """``(lambda_sp/2) sum xi (theta - snapshot)^2`` and its gradient."""
    _match(theta, snapshot, xi)
    d = _arr(theta) - _arr(snapshot)
    wd = _arr(xi) * d
    return float(0.5 * lambda_sp * np.dot(wd, d)), lambda_sp * wd


def af1_term(theta, lambda_af: float) -> tuple[float, np.ndarray]:
    """``(lambda/2) ||theta||^2`` and its gradient."""
    t = _arr(theta)
    return float(0.5 * lambda_af * np.dot(t, t)), lambda_af * t


def af2_term(theta, expansion: ExpansionState, lambda_af: float) -> tuple[float, np.ndarray]:
    return stability_term(theta, expansion.theta_e, expansion.importance_e, lambda_af)


def _check_probs(p: np.ndarray) -> None:
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("afs_term expects rows of nonnegative probabilities summing to 1")


@dataclass
class AFSResult:
    value: float
    grad_logits: list[np.ndarray]
    kl: np.ndarray  # (K, K) mean directed KL, zero diagonal


def afs_term(predictions, gamma_matrix, stop_grad: bool = True, eps: float = KL_EPS) -> AFSResult:
    """Pairwise prediction-divergence penalty.

    ``predictions`` is a list of K arrays (N, C); ``gamma_matrix`` is (K, K)
    with the diagonal ignored. Gradients are with respect to each learner's
    logits. With ``stop_grad`` the reference distribution p_j of each
    directed KL is treated as a constant.
    """
    ps = [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in predictions]
    for p in ps:
        _check_probs(p)
    k = len(ps)
    gamma_matrix = np.asarray(gamma_matrix, dtype=np.float64)
    n = ps[0].shape[0]
    qs = [np.maximum(p, eps) for p in ps]
    logq = [np.log(q) for q in qs]
    live = [(p >= eps).astype(np.float64) for p in ps]
    dps = [np.zeros_like(p) for p in ps]
    kl = np.zeros((k, k))
    value = 0.0
    for i, j in pair_index(k):
        diff = logq[i] - logq[j]
        kl[i, j] = float((ps[i] * diff).sum() / n)
        g = gamma_matrix[i, j]
        value += g * kl[i, j]
        if g == 0.0:
            continue
        dps[i] += (g / n) * (diff + live[i])
        if not stop_grad:
            dps[j] -= (g / n) * ps[i] / qs[j] * live[j]
    grads = [p * (dp - (p * dp).sum(axis=1, keepdims=True)) for p, dp in zip(ps, dps)]
    return AFSResult(float(value), grads, kl)


def modulate(state: ModulationState, k: int, lambda_af: float, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-learner AF strengths ``alpha_i K lambda_af`` and the (K, K) pair strengths.

    Pair strengths are ``pi_ij K (K-1) gamma`` with ``pi = softmax(w)`` over
    ordered pairs; both sets average exactly to the configured values.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    lam = state.alpha * (k * lambda_af)
    gm = np.zeros((k, k))
    if k > 1:
        pw = state.pair_weights * (k * (k - 1) * gamma)
        for (i, j), v in zip(pair_index(k), pw):
            gm[i, j] = v
    return lam, gm


def _softmax_vjp(p: np.ndarray, d: np.ndarray) -> np.ndarray:
    return p * (d - np.dot(p, d))


def modulate_backward(state: ModulationState, k: int, lambda_af: float, gamma: float,
                      d_lam: np.ndarray, d_gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pull gradients w.r.t. strengths back to the free parameters (u, w)."""
    du = _softmax_vjp(state.alpha, np.asarray(d_lam) * (k * lambda_af))
    if k > 1:
        d_pairs = np.array([d_gamma[i, j] for i, j in pair_index(k)]) * (k * (k - 1) * gamma)
        dw = _softmax_vjp(state.pair_weights, d_pairs)
    else:
        dw = np.zeros(0)
    return du, dw


@dataclass
class CAFResult:
    total: float
    parts: dict[str, float]
    theta_grads: list[np.ndarray]
    head_grad: np.ndarray
    du: np.ndarray
    dw: np.ndarray
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def flat_grad(self, with_modulation: bool) -> np.ndarray:
        parts = list(self.theta_grads) + [self.head_grad]
        if with_modulation:
            parts += [self.du, self.dw]
        return np.concatenate(parts)


def caf_loss(
    model: MCLModel,
    batch: tuple[np.ndarray, np.ndarray],
    task_id: int,
    state: ConsolidationState | None,
    config: RegConfig,
    dropout_masks=None,
) -> CAFResult:
    """Task cross-entropy plus stability, AF-1 or AF-2, and AF-S terms.

    Returns the total, each part, and gradients for every learner's
    theta_i = (layers, g_i), the task head and the modulation parameters.
    """
    state = state or ConsolidationState()
    x, y = batch
    k = model.k
    if config.af_mode == "af2":
        if k != 1:
            raise InvalidStateError("AF-2 is only supported for single-learner models")
        if state.has_old_tasks and state.expansion is None:
            raise InvalidStateError("AF-2 requires an expansion state for tasks after the first")

    cache = mcl_forward_with_cache(model, x, task_id, dropout_masks)
    n = cache.logits.shape[0]
    y = np.asarray(y, dtype=np.int64)
    logp = log_softmax(cache.logits)
    task_loss = float(-logp[np.arange(n), y].mean())
    d_fused = np.exp(logp)
    d_fused[np.arange(n), y] -= 1.0
    d_fused /= n

    lam, gm = modulate(model.modulation, k, config.lambda_af, config.gamma)
    afs_value = 0.0
    d_learners = None
    kl = np.zeros((k, k))
    if k > 1 and config.gamma > 0:
        preds = [softmax(l) for l in learner_logits(model, cache, task_id)]
        afs = afs_term(preds, gm, stop_grad=config.afs_stop_grad)
        afs_value, d_learners, kl = afs.value, afs.grad_logits, afs.kl

    grads = mcl_backward(model, cache, task_id, d_fused, d_learners)
    thetas = [model.theta(i).data for i in range(k)]
    theta_grads = [grads.theta(i) for i in range(k)]

    sp_value = 0.0
    if state.has_old_tasks and config.lambda_sp > 0:
        for i in range(k):
            v, g = stability_term(thetas[i], state.snapshots[i], state.importance[i], config.lambda_sp)
            sp_value += v
            theta_grads[i] = theta_grads[i] + g

    af_value = 0.0
    d_lam = np.zeros(k)
    af_active = state.has_old_tasks or config.af_from_first_task
    if config.af_mode == "af1" and af_active:
        for i in range(k):
            v, g = af1_term(thetas[i], lam[i])
            af_value += v
            theta_grads[i] = theta_grads[i] + g
            d_lam[i] = 0.5 * np.dot(thetas[i], thetas[i])
    elif config.af_mode == "af2" and state.expansion is not None:
        v, g = af2_term(thetas[0], state.expansion, config.lambda_af)
        af_value += v
        theta_grads[0] = theta_grads[0] + g

    du, dw = modulate_backward(model.modulation, k, config.lambda_af, config.gamma, d_lam, kl)
    total = task_loss + sp_value + af_value + afs_value
    return CAFResult(
        total=total,
        parts={"task": task_loss, "stability": sp_value, "active_forgetting": af_value, "afs": afs_value},
        theta_grads=theta_grads,
        head_grad=grads.head,
        du=du,
        dw=dw,
        alpha=model.modulation.alpha,
    )


def pack_params(model: MCLModel, task_id: int, with_modulation: bool) -> np.ndarray:
    parts = [model.theta(i).data for i in range(model.k)] + [model.head(task_id).data]
    if with_modulation:
        parts += [model.modulation.u, model.modulation.w]
    return np.concatenate(parts)


def unpack_params(model: MCLModel, task_id: int, flat: np.ndarray, with_modulation: bool) -> None:
    """Write a packed vector back into ``model`` (in place)."""
    off = 0
    g = model.output_weights.copy()
    for i in range(model.k):
        n = model.learners[i].size
        model.learners[i] = model.learners[i].with_data(flat[off:off + n])
        g[i] = flat[off + n]
        off += n + 1
    model.output_weights = g
    head = model.head(task_id)
    model.heads[task_id] = head.with_data(flat[off:off + head.size])
    off += head.size
    if with_modulation:
        k = model.k
        model.modulation = ModulationState(flat[off:off + k].copy(), flat[off + k:off + k + k * (k - 1)].copy())
        off += k + k * (k - 1)
    if off != flat.size:
        raise LayoutError(f"packed vector has {flat.size} values, model expects {off}")


def fit_expansion(loss_grad, theta0: np.ndarray, n_samples: int, train: TrainConfig, epochs: int, task: int = 0):
    """Train from ``theta0`` on the current-task objective alone; returns theta_e."""
    theta_e, _ = minimize(loss_grad, theta0, n_samples, train, task=task, epochs=epochs, purpose=STREAM_EXPANSION)
    return theta_e


def af2_expand(model: MCLModel, task_id: int, data, train: TrainConfig, epochs: int) -> ExpansionState:
    """Expansion for AF-2: a copy of ``model`` fitted to ``data`` with no old-task penalty.

    Returns the expanded learner parameters and their Fisher diagonal.
    """
    x, y = np.asarray(data[0], dtype=np.float64), np.asarray(data[1])
    if x.shape[0] == 0:
        raise ValueError("AF-2 expansion needs task data")
    work = model.copy()
    plain = RegConfig()

    def loss_grad(flat, idx, epoch, b):
        unpack_params(work, task_id, flat, False)
        res = caf_loss(work, (x[idx], y[idx]), task_id, None, plain)
        return res.total, res.flat_grad(False)

    flat = fit_expansion(loss_grad, pack_params(work, task_id, False), x.shape[0], train, epochs, task_id)
    unpack_params(work, task_id, flat, False)
    fisher = mcl_fisher(work, task_id, (x, y))
    return ExpansionState(theta_e=work.theta(0), importance_e=fisher[0])
