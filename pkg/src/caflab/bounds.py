"""Closed-form generalisation-bound diagnostics.

Cover terms depend on capacity surrogates (d for the whole parameter space,
d_i per learner), sharpness terms on the parameter norm relative to the
perturbation radius, and the task-discrepancy term on a discriminator-based
divergence proxy. Reported values omit the unspecified O~(1) constant of the
sharpness bound; capacity defaults are parameter counts and are labelled as
proxies.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .metrics import train_discriminator
from .optim import STREAM_PROBE, substream

__all__ = [
    "BoundDomainError",
    "BoundInputs",
    "BoundReport",
    "cover_terms",
    "cover_term",
    "sharpness_terms",
    "divergence_estimate",
    "bound_report",
    "MIN_DIVERGENCE_SAMPLES",
]

MIN_DIVERGENCE_SAMPLES = 20
SHARPNESS_NOTE = "sharpness terms omit the unspecified O~(1) additive constant"
CAPACITY_NOTE = "capacity d, d_i are proxies (default: parameter counts)"
DIVERGENCE_NOTE = "Div is the proxy 2|1 - 2 err| of a held-out one-layer logistic discriminator"


class BoundDomainError(ValueError):
    pass


@dataclass(frozen=True)
class BoundInputs:
    d: float
    d_i: tuple[float, ...]
    k: int
    m: int
    n_t: int
    n_old: int
    delta: float = 0.05
    b: float = 1.0
    theta_norm2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "d_i", tuple(float(v) for v in self.d_i))
        if len(self.d_i) != self.k:
            raise BoundDomainError(f"expected {self.k} per-learner capacities, got {len(self.d_i)}")
        for name in ("d", "k", "m", "n_t", "n_old"):
            if getattr(self, name) < 1:
                raise BoundDomainError(f"{name} must be >= 1")
        if any(v < 1 for v in self.d_i):
            raise BoundDomainError("every d_i must be >= 1")
        if max(self.d_i) > self.d:
            raise BoundDomainError("d_i must not exceed d")
        if not 0.0 < self.delta < 1.0:
            raise BoundDomainError("delta must lie in (0, 1)")
        if self.b <= 0 or self.theta_norm2 < 0:
            raise BoundDomainError("b must be positive and theta_norm2 nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "BoundInputs":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise BoundDomainError(f"unknown bound input keys: {sorted(unknown)}")
        return cls(**d)


def _vc_root(dim: float, n: float, log_term: float) -> float:
    if n < dim:
        raise BoundDomainError(f"sample count {n} is below capacity {dim}; ln(N/d) would be negative")
    return math.sqrt((dim * math.log(n / dim) + log_term) / n)


def cover_term(d: float, d_i: Sequence[float], n: float, delta: float) -> float:
    """``max_i sqrt((d_i ln(N/d_i) + ln(2K/delta))/N) + sqrt((d ln(N/d) + ln(2/delta))/N)``."""
    k = len(d_i)
    per = max(_vc_root(di, n, math.log(2.0 * k / delta)) for di in d_i)
    return per + _vc_root(d, n, math.log(2.0 / delta))


def cover_terms(inputs: BoundInputs) -> tuple[float, float]:
    """(C1 at N_old, C2 at N_t)."""
    c1 = cover_term(inputs.d, inputs.d_i, inputs.n_old, inputs.delta)
    c2 = cover_term(inputs.d, inputs.d_i, inputs.n_t, inputs.delta)
    return c1, c2


def sharpness_terms(m: int, n: int, delta: float, theta_norm2: float, b: float) -> float:
    """``sqrt((M ln(1 + x (1 + sqrt(ln N / M))^2) + 4 ln(N/delta)) / (N - 1))`` with x = ||theta||^2 / b^2."""
    if n < 2:
        raise BoundDomainError("sharpness term needs N >= 2")
    if b <= 0:
        raise BoundDomainError("b must be positive")
    if m < 1 or theta_norm2 < 0 or not 0.0 < delta < 1.0:
        raise BoundDomainError("need M >= 1, theta_norm2 >= 0 and delta in (0, 1)")
    x = theta_norm2 / (b * b)
    inner = m * math.log1p(x * (1.0 + math.sqrt(math.log(n) / m)) ** 2) + 4.0 * math.log(n / delta)
    return math.sqrt(inner / (n - 1))


def divergence_estimate(features_i: np.ndarray, features_j: np.ndarray, seed: int = 0) -> float:
    """Divergence proxy ``2 |1 - 2 err|`` in [0, 2] from a held-out discriminator error rate."""
    fi = np.asarray(features_i, dtype=np.float64)
    fj = np.asarray(features_j, dtype=np.float64)
    if fi.ndim == 1:
        fi = fi[:, None]
    if fj.ndim == 1:
        fj = fj[:, None]
    if min(fi.shape[0], fj.shape[0]) < MIN_DIVERGENCE_SAMPLES:
        raise ValueError(f"divergence estimate needs >= {MIN_DIVERGENCE_SAMPLES} samples per side")
    _, err = train_discriminator(fi, fj, substream(seed, STREAM_PROBE, 3))
    return float(2.0 * abs(1.0 - 2.0 * err))


@dataclass
class BoundReport:
    c1: float
    c2: float
    r1: float
    r2: float
    div_old_new: list[float]
    div_new_old: list[float]
    flatness_gap_old: float
    flatness_gap_new: float
    plasticity_bound: float
    stability_bound: float
    notes: list[str] = field(default_factory=lambda: [SHARPNESS_NOTE, CAPACITY_NOTE, DIVERGENCE_NOTE])

    def to_dict(self) -> dict:
        return asdict(self)


def bound_report(inputs: BoundInputs, flatness_gap_old: float, flatness_gap_new: float,
                 div_old_new: Sequence[float], div_new_old: Sequence[float]) -> BoundReport:
    """Plasticity and stability right-hand sides: flatness gap + mean Div + cover term."""
    if not div_old_new or not div_new_old:
        raise ValueError("at least one old task divergence is required")
    c1, c2 = cover_terms(inputs)
    # r is undefined for a single sample; reported as NaN (null in JSON)
    r1, r2 = (sharpness_terms(inputs.m, n, inputs.delta, inputs.theta_norm2, inputs.b) if n >= 2 else float("nan")
              for n in (inputs.n_old, inputs.n_t))
    d_on = [float(v) for v in div_old_new]
    d_no = [float(v) for v in div_new_old]
    plast = float(flatness_gap_old) + sum(d_on) / len(d_on) + c1
    stab = float(flatness_gap_new) + sum(d_no) / len(d_no) + c2
    return BoundReport(c1, c2, r1, r2, d_on, d_no, float(flatness_gap_old), float(flatness_gap_new), plast, stab)
