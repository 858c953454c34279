"""First-order optimizers over flat float64 vectors, and seeded sub-streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TrainConfig", "SGD", "Adam", "make_optimizer", "substream", "batch_order", "minimize"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._v = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.momentum:
            self._v = grad if self._v is None else self.momentum * self._v + grad
            return params - self.lr * self._v
        return params - self.lr * grad


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m = None
        self._s = None
        self._t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self._m is None:
            self._m = np.zeros_like(params)
            self._s = np.zeros_like(params)
        self._t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * grad
        self._s = self.beta2 * self._s + (1 - self.beta2) * grad * grad
        m_hat = self._m / (1 - self.beta1**self._t)
        s_hat = self._s / (1 - self.beta2**self._t)
        return params - self.lr * m_hat / (np.sqrt(s_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    """Fresh optimizer state; callers create one per task so moments never leak."""
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr, cfg.momentum)
    return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


# Sub-stream purposes used as the first spawn-key component.
STREAM_BATCHES = 10
STREAM_DROPOUT = 11
STREAM_PROBE = 12
STREAM_SPLIT = 13
STREAM_EXPANSION = 14


def substream(seed: int, *key: int) -> np.random.Generator:
    """PCG64 generator for ``SeedSequence(seed, spawn_key=key)``.

    Keys are small integer tuples such as (purpose, task, epoch), so every
    stream is reproducible from the run seed alone.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def batch_order(n: int, cfg: TrainConfig, task: int, epoch: int, purpose: int = STREAM_BATCHES) -> list[np.ndarray]:
    idx = substream(cfg.seed, purpose, task, epoch).permutation(n) if cfg.shuffle else np.arange(n)
    return [idx[s:s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]


def minimize(loss_grad, x0: np.ndarray, n_samples: int, cfg: TrainConfig, task: int = 0,
             epochs: int | None = None, purpose: int = STREAM_BATCHES):
    """Mini-batch descent on a flat vector.

    ``loss_grad(x, batch_indices, epoch, batch_number) -> (loss, grad)``.
    Returns the final vector and the per-epoch mean losses. Raises
    ``FloatingPointError`` naming epoch and batch on a non-finite loss.
    """
    epochs = cfg.epochs if epochs is None else epochs
    opt = make_optimizer(cfg)
    x = np.array(x0, dtype=np.float64)
    history = []
    for epoch in range(epochs):
        total = 0.0
        batches = batch_order(n_samples, cfg, task, epoch, purpose)
        for b, idx in enumerate(batches):
            loss, grad = loss_grad(x, idx, epoch, b)
            if not np.isfinite(loss) or not np.isfinite(grad).all():
                raise FloatingPointError(f"non-finite loss at task {task}, epoch {epoch}, batch {b}")
            x = opt.step(x, grad)
            total += loss
        history.append(total / max(len(batches), 1))
    return x, history
