"""Post-task consolidation: parameter importance and Gaussian tempering.

Importance comes in two flavours, the empirical Fisher diagonal (mean
squared per-sample gradient of the log-likelihood at the true labels) and
MAS (mean absolute gradient of the squared L2 norm of the outputs). Both
are exact per-sample reductions, computed in one batched backward pass.

The tempering helpers give the closed form of ``p1^(1-beta) p2^beta / Z``
for 1-D Gaussians and use it to score how well a tempered old-task belief
explains a new task's Gaussian likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MCLModel, mcl_backward, mcl_forward_with_cache
from .numerics import (
    LayoutError,
    LearnerSpec,
    ParamVector,
    backward,
    forward_with_cache,
    log_softmax,
)

__all__ = [
    "ImportanceVector",
    "Snapshot",
    "GaussianBelief",
    "TemperResult",
    "fisher_diagonal",
    "mas_importance",
    "mcl_fisher",
    "mcl_mas",
    "mcl_importance",
    "accumulate",
    "temper_gaussian",
    "beta_evidence",
    "beta_evidence_demo",
]

# Importances share the ParamVector layout contract; entries are >= 0.
ImportanceVector = ParamVector


@dataclass(frozen=True)
class Snapshot:
    params: ParamVector
    task_index: int


def _subsample(x, y, batch_size: int, n_batches: int | None):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("importance estimation needs at least one sample")
    if n_batches is not None:
        n = min(x.shape[0], batch_size * int(n_batches))
        x = x[:n]
        y = None if y is None else np.asarray(y)[:n]
    return x, y


def _per_sample_loss_grad(out: np.ndarray, y, loss_kind: str) -> np.ndarray:
    """d(per-sample loss)/d(outputs), one row per sample (not batch-averaged)."""
    n = out.shape[0]
    if loss_kind == "softmax-ce":
        y = np.asarray(y, dtype=np.int64)
        g = np.exp(log_softmax(out))
        g[np.arange(n), y] -= 1.0
        return g
    if loss_kind == "squared":
        return 2.0 * (out - np.asarray(y, dtype=np.float64).reshape(out.shape))
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def fisher_diagonal(
    params: ParamVector,
    spec: LearnerSpec,
    data: tuple[np.ndarray, np.ndarray],
    loss_kind: str = "softmax-ce",
    n_batches: int | None = None,
    batch_size: int = 256,
) -> ImportanceVector:
    """Empirical Fisher diagonal of a plain network.

    Mean over samples of the squared per-sample gradient of the sample
    loss (negative log-likelihood for ``softmax-ce``).
    """
    x, y = _subsample(data[0], data[1], batch_size, n_batches)
    out, cache = forward_with_cache(params, spec, x)
    g_out = _per_sample_loss_grad(out, y, loss_kind)
    sq, _ = backward(params, spec, cache, g_out, reduce="sq")
    return params.with_data(sq / x.shape[0])


def mas_importance(
    params: ParamVector,
    spec: LearnerSpec,
    data,
    n_batches: int | None = None,
    batch_size: int = 256,
) -> ImportanceVector:
    """Mean over samples of |d ||f(x)||^2 / d theta|. ``data`` may be x or (x, y)."""
    x = data[0] if isinstance(data, tuple) else data
    x, _ = _subsample(x, None, batch_size, n_batches)
    out, cache = forward_with_cache(params, spec, x)
    ab, _ = backward(params, spec, cache, 2.0 * out, reduce="abs")
    return params.with_data(ab / x.shape[0])


def _theta_layout_vector(model: MCLModel, i: int, data: np.ndarray) -> ImportanceVector:
    return model.theta(i).with_data(data)


def mcl_fisher(model: MCLModel, task_id: int, data, n_batches: int | None = None, batch_size: int = 256):
    """Per-learner empirical Fisher over theta_i = (layers_i, g_i) for the fused model."""
    x, y = _subsample(data[0], data[1], batch_size, n_batches)
    cache = mcl_forward_with_cache(model, x, task_id)
    d = _per_sample_loss_grad(cache.logits, y, "softmax-ce")
    grads = mcl_backward(model, cache, task_id, d, reduce="sq")
    n = x.shape[0]
    return [_theta_layout_vector(model, i, grads.theta(i) / n) for i in range(model.k)]


def mcl_mas(model: MCLModel, task_id: int, data, n_batches: int | None = None, batch_size: int = 256):
    """Per-learner MAS importance of the fused logits' squared norm."""
    x = data[0] if isinstance(data, tuple) else data
    x, _ = _subsample(x, None, batch_size, n_batches)
    cache = mcl_forward_with_cache(model, x, task_id)
    grads = mcl_backward(model, cache, task_id, 2.0 * cache.logits, reduce="abs")
    n = x.shape[0]
    return [_theta_layout_vector(model, i, grads.theta(i) / n) for i in range(model.k)]


def mcl_importance(kind: str, model: MCLModel, task_id: int, data, n_batches=None):
    if kind == "fisher":
        return mcl_fisher(model, task_id, data, n_batches)
    if kind == "mas":
        return mcl_mas(model, task_id, data, n_batches)
    raise ValueError(f"unknown importance kind {kind!r}")


def accumulate(cum: ImportanceVector | None, new: ImportanceVector) -> ImportanceVector:
    """Running importance: elementwise ``cum + new`` (``None`` acts as zero)."""
    if cum is None:
        return new
    if not cum.same_layout(new):
        raise LayoutError("cannot accumulate importances with different layouts")
    return cum.with_data(cum.data + new.data)


@dataclass(frozen=True)
class GaussianBelief:
    """N(mu + offset, var); ``offset`` shifts the mean, e.g. a posterior at mu + a."""

    mu: float
    var: float
    offset: float = 0.0

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError(f"variance must be positive, got {self.var}")

    @property
    def mean(self) -> float:
        return self.mu + self.offset

    def pdf(self, x):
        return np.exp(-0.5 * (x - self.mean) ** 2 / self.var) / np.sqrt(2 * np.pi * self.var)


@dataclass(frozen=True)
class TemperResult:
    m: float
    v2: float
    logZ: float


def temper_gaussian(p1: GaussianBelief, p2: GaussianBelief, beta: float) -> TemperResult:
    """Normalised ``p1^(1-beta) p2^beta`` for Gaussians: N(m, v2) with normaliser Z.

    ``(k - m^2) / v2`` is evaluated as ``beta (1-beta) (mu1-mu2)^2 / denom``,
    algebraically identical and free of cancellation.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    mu1, s1 = p1.mean, p1.var
    mu2, s2 = p2.mean, p2.var
    denom = beta * s1 + (1.0 - beta) * s2
    v2 = s1 * s2 / denom
    m = ((1.0 - beta) * s2 * mu1 + beta * s1 * mu2) / denom
    gap = beta * (1.0 - beta) * (mu1 - mu2) ** 2 / denom
    logZ = 0.5 * (np.log(v2) - (1.0 - beta) * np.log(s1) - beta * np.log(s2)) - 0.5 * gap
    return TemperResult(float(m), float(v2), float(logZ))


def beta_evidence(prior: GaussianBelief, posterior_a: GaussianBelief, likelihood_b: GaussianBelief, beta: float) -> float:
    """Marginal likelihood of task B under the tempered task-A belief.

    ``likelihood_b`` is a Gaussian in theta, so the integral is the Gaussian
    convolution N(mu_B; m, v2 + var_B).
    """
    t = temper_gaussian(posterior_a, prior, beta)
    var = t.v2 + likelihood_b.var
    return float(np.exp(-0.5 * (likelihood_b.mean - t.m) ** 2 / var) / np.sqrt(2 * np.pi * var))


def beta_evidence_demo(
    prior: GaussianBelief,
    posterior_a: GaussianBelief,
    likelihood_b: GaussianBelief,
    betas: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Evidence over a beta grid; returns (argmax beta, grid, evidence values)."""
    betas = np.linspace(0.0, 1.0, 101) if betas is None else np.asarray(betas, dtype=np.float64)
    values = np.array([beta_evidence(prior, posterior_a, likelihood_b, b) for b in betas])
    return float(betas[int(np.argmax(values))]), betas, values
