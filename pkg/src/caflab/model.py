"""Multi-learner composite: K parallel feature extractors, one head per task.

The fused prediction routes ``sum_i g_i * f_i(x)`` through the task head.
Each learner's own prediction routes ``K * g_i * f_i(x)`` through the same
head, so with identical learners and ``g_i = 1/K`` every per-learner
prediction equals the fused one. A single learner is simply ``k=1``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from .numerics import (
    ForwardCache,
    LayoutError,
    LearnerSpec,
    ParamVector,
    backward,
    forward_with_cache,
    init_params,
    softmax,
)

__all__ = [
    "DiversityBackground",
    "ModulationState",
    "MCLModel",
    "UnknownTaskError",
    "DEFAULT_DROPOUT",
    "init_mcl",
    "init_head",
    "mcl_forward",
    "mcl_forward_with_cache",
    "mcl_backward",
    "learner_predictions",
    "learner_param_count",
    "mcl_param_count",
    "width_for_budget",
    "draw_dropout_masks",
    "save_checkpoint",
    "load_checkpoint",
]

DEFAULT_DROPOUT = 0.2


class UnknownTaskError(KeyError):
    pass


class DiversityBackground(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


@dataclass
class ModulationState:
    """Free parameters behind the softmax-normalised forgetting strengths.

    ``u`` has one entry per learner; ``w`` has one per ordered pair (i, j),
    i != j, in row-major order skipping the diagonal.
    """

    u: np.ndarray
    w: np.ndarray

    @classmethod
    def uniform(cls, k: int) -> "ModulationState":
        return cls(np.zeros(k), np.zeros(k * (k - 1)))

    @property
    def k(self) -> int:
        return self.u.size

    @property
    def alpha(self) -> np.ndarray:
        return softmax(self.u)

    @property
    def pair_weights(self) -> np.ndarray:
        if self.w.size == 0:
            return np.zeros(0)
        return softmax(self.w)

    def copy(self) -> "ModulationState":
        return ModulationState(self.u.copy(), self.w.copy())


def pair_index(k: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(k) for j in range(k) if j != i]


@dataclass
class MCLModel:
    spec: LearnerSpec
    learners: list[ParamVector]
    output_weights: np.ndarray
    heads: dict[int, ParamVector] = field(default_factory=dict)
    modulation: ModulationState | None = None
    background: DiversityBackground = DiversityBackground.HIGH
    seed: int = 0

    def __post_init__(self):
        self.output_weights = np.asarray(self.output_weights, dtype=np.float64)
        if len(self.learners) != self.output_weights.size:
            raise LayoutError("one output weight per learner required")
        if self.modulation is None:
            self.modulation = ModulationState.uniform(self.k)

    @property
    def k(self) -> int:
        return len(self.learners)

    @property
    def feature_dim(self) -> int:
        return self.spec.n_outputs

    def head(self, task_id: int) -> ParamVector:
        try:
            return self.heads[task_id]
        except KeyError:
            raise UnknownTaskError(f"no head for task {task_id}") from None

    def theta(self, i: int) -> ParamVector:
        """Learner i's regularised parameters: its layers plus its output weight."""
        return ParamVector.concat(self.learners[i], ParamVector.from_arrays([("g", self.output_weights[i:i + 1])]))

    def set_theta(self, i: int, theta: np.ndarray) -> None:
        n = self.learners[i].size
        self.learners[i] = self.learners[i].with_data(theta[:n])
        self.output_weights = self.output_weights.copy()
        self.output_weights[i] = theta[n]

    def copy(self) -> "MCLModel":
        return replace(
            self,
            learners=list(self.learners),
            output_weights=self.output_weights.copy(),
            heads=dict(self.heads),
            modulation=self.modulation.copy(),
        )


def learner_param_count(spec: LearnerSpec) -> int:
    """Parameters of one learner including its scalar output weight."""
    return spec.n_params() + 1


def mcl_param_count(spec: LearnerSpec, k: int) -> int:
    """Learner parameters of a K-learner model. Heads are shared and excluded."""
    return k * learner_param_count(spec)


def init_head(model: MCLModel, task_id: int, n_classes: int) -> ParamVector:
    """Standard-init head for a task; deterministic in (model seed, task id)."""
    ss = np.random.SeedSequence(int(model.seed), spawn_key=(1, int(task_id)))
    rng = np.random.Generator(np.random.PCG64(ss))
    fan_in = model.feature_dim
    limit = np.sqrt(6.0 / (fan_in + n_classes))
    W = rng.uniform(-limit, limit, size=(n_classes, fan_in))
    return ParamVector.from_arrays([("weight", W), ("bias", np.zeros(n_classes))])


def init_mcl(
    spec: LearnerSpec,
    k: int,
    background: DiversityBackground | str = DiversityBackground.HIGH,
    seed: int = 0,
) -> MCLModel:
    """K learners; learner i uses init seed ``seed`` (low/medium) or ``seed + i`` (high).

    Low diversity switches dropout off; medium and high keep the spec's
    dropout rate, falling back to ``DEFAULT_DROPOUT`` if the spec has none.
    """
    if k < 1:
        raise ValueError(f"learner count must be >= 1, got {k}")
    background = DiversityBackground(background)
    if background is DiversityBackground.LOW:
        rate = 0.0
    else:
        rate = spec.dropout_rate if spec.dropout_rate > 0 else DEFAULT_DROPOUT
    spec = spec.replace(dropout_rate=rate, init_seed=seed)
    learners = []
    for i in range(k):
        s = seed + i if background is DiversityBackground.HIGH else seed
        learners.append(init_params(spec, s))
    return MCLModel(
        spec=spec,
        learners=learners,
        output_weights=np.full(k, 1.0 / k),
        heads={},
        modulation=ModulationState.uniform(k),
        background=background,
        seed=seed,
    )


def draw_dropout_masks(model: MCLModel, batch: int, rng: np.random.Generator):
    """Inverted-dropout masks per learner, or None when dropout is off."""
    rate = model.spec.dropout_rate
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    widths = model.spec.layer_widths
    out = []
    for _ in range(model.k):
        masks = []
        for l in model.spec.activated_layers():
            m = (rng.random((batch, widths[l + 1])) < keep) / keep
            masks.append(m)
        out.append(masks)
    return out


@dataclass
class MCLCache:
    x: np.ndarray
    features: list[np.ndarray]
    caches: list[ForwardCache]
    fused: np.ndarray
    logits: np.ndarray


def mcl_forward_with_cache(model: MCLModel, x: np.ndarray, task_id: int, dropout_masks=None) -> MCLCache:
    head = model.head(task_id)
    feats, caches = [], []
    for i, params in enumerate(model.learners):
        masks = None if dropout_masks is None else dropout_masks[i]
        f, c = forward_with_cache(params, model.spec, x, masks)
        feats.append(f)
        caches.append(c)
    g = model.output_weights
    fused = g[0] * feats[0]
    for i in range(1, model.k):
        fused = fused + g[i] * feats[i]
    logits = fused @ head.view("weight").T + head.view("bias")
    return MCLCache(np.asarray(x, dtype=np.float64), feats, caches, fused, logits)


def mcl_forward(model: MCLModel, x: np.ndarray, task_id: int, dropout_masks=None) -> np.ndarray:
    """Fused logits ``head(sum_i g_i f_i(x))``."""
    return mcl_forward_with_cache(model, x, task_id, dropout_masks).logits


def learner_logits(model: MCLModel, cache: MCLCache, task_id: int) -> list[np.ndarray]:
    head = model.head(task_id)
    W, b = head.view("weight"), head.view("bias")
    k = model.k
    return [(k * model.output_weights[i]) * cache.features[i] @ W.T + b for i in range(k)]


def learner_predictions(model: MCLModel, x: np.ndarray, task_id: int, dropout_masks=None) -> list[np.ndarray]:
    """Per-learner class probabilities ``softmax(head(K g_i f_i(x)))``."""
    cache = mcl_forward_with_cache(model, x, task_id, dropout_masks)
    return [softmax(l) for l in learner_logits(model, cache, task_id)]


@dataclass
class MCLGrad:
    learners: list[np.ndarray]  # flat gradient per learner (layers only)
    g: np.ndarray
    head: np.ndarray

    def theta(self, i: int) -> np.ndarray:
        return np.concatenate([self.learners[i], self.g[i:i + 1]])


def _reduce(per_sample: np.ndarray, reduce: str) -> np.ndarray:
    if reduce == "sum":
        return per_sample.sum(axis=0)
    if reduce == "sq":
        return (per_sample * per_sample).sum(axis=0)
    return np.abs(per_sample).sum(axis=0)


def mcl_backward(
    model: MCLModel,
    cache: MCLCache,
    task_id: int,
    d_fused: np.ndarray | None,
    d_learners: list[np.ndarray] | None = None,
    reduce: str = "sum",
) -> MCLGrad:
    """Gradients from d(loss)/d(fused logits) and optional per-learner logit gradients.

    With ``reduce`` in {"sq", "abs"} the inputs must be per-sample
    gradients and only the fused path may be given.
    """
    head = model.head(task_id)
    W = head.view("weight")
    k = model.k
    g = model.output_weights
    n = cache.fused.shape[0]
    if reduce != "sum" and d_learners is not None:
        raise ValueError("per-sample reductions support the fused path only")
    if d_fused is None:
        d_fused = np.zeros_like(cache.logits)
    if reduce == "sum":
        gW = d_fused.T @ cache.fused
        gb = d_fused.sum(axis=0)
    elif reduce == "sq":
        gW = (d_fused**2).T @ (cache.fused**2)
        gb = (d_fused**2).sum(axis=0)
    else:
        gW = np.abs(d_fused).T @ np.abs(cache.fused)
        gb = np.abs(d_fused).sum(axis=0)
    dz = d_fused @ W
    d_feats = [g[i] * dz for i in range(k)]
    g_per_sample = np.stack([(dz * cache.features[i]).sum(axis=1) for i in range(k)], axis=1)
    gg = _reduce(g_per_sample, reduce) if reduce != "sum" else g_per_sample.sum(axis=0)
    if d_learners is not None:
        gg = gg.copy()
        for i in range(k):
            dl = d_learners[i]
            scaled = (k * g[i]) * cache.features[i]
            gW = gW + dl.T @ scaled
            gb = gb + dl.sum(axis=0)
            dzi = dl @ W
            d_feats[i] = d_feats[i] + (k * g[i]) * dzi
            gg[i] += k * (dzi * cache.features[i]).sum()
    learner_grads = []
    for i in range(k):
        gi, _ = backward(model.learners[i], model.spec, cache.caches[i], d_feats[i], reduce=reduce)
        learner_grads.append(gi)
    head_grad = np.concatenate([gW.ravel(), gb])
    return MCLGrad(learner_grads, np.asarray(gg, dtype=np.float64), head_grad)


def width_for_budget(k: int, reference_spec: LearnerSpec, budget: int | None = None) -> int:
    """Largest hidden width w with ``k * learner_param_count(spec at w) <= budget``.

    Every hidden layer (all layers except input and feature output) is set
    to ``w``. ``budget`` defaults to one reference learner.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if reference_spec.n_layers < 2:
        raise ValueError("reference spec has no hidden layer to narrow")
    if budget is None:
        budget = learner_param_count(reference_spec)

    def cost(w: int) -> int:
        return k * learner_param_count(with_hidden_width(reference_spec, w))

    if cost(1) > budget:
        raise ValueError(f"budget {budget} too small for {k} learners of width 1 ({cost(1)} params)")
    lo, hi = 1, 2
    while cost(hi) <= budget:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cost(mid) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def with_hidden_width(spec: LearnerSpec, width: int) -> LearnerSpec:
    w = list(spec.layer_widths)
    for l in range(1, len(w) - 1):
        w[l] = int(width)
    return spec.replace(layer_widths=tuple(w))


# --- checkpoint format -------------------------------------------------------
#
#   bytes 0..7    magic b"CAFLAB\x00\x01"
#   bytes 8..15   header length H, unsigned 64-bit little-endian
#   next H bytes  UTF-8 JSON header
#   remainder     float64 little-endian payload
#
# The header holds {"format", "version", "metadata", "arrays"}; each array
# record is {"name", "offset", "length", "layout"} with offset/length in
# float64 elements from the payload start and layout a list of
# [block name, shape] pairs (null for plain arrays).

CHECKPOINT_MAGIC = b"CAFLAB\x00\x01"
CHECKPOINT_VERSION = 1


def _spec_to_dict(spec: LearnerSpec) -> dict[str, Any]:
    return {
        "layer_widths": list(spec.layer_widths),
        "dropout_rate": spec.dropout_rate,
        "init_scheme": spec.init_scheme,
        "init_seed": spec.init_seed,
        "relu_output": spec.relu_output,
    }


def _spec_from_dict(d: dict[str, Any]) -> LearnerSpec:
    return LearnerSpec(
        layer_widths=tuple(d["layer_widths"]),
        dropout_rate=d["dropout_rate"],
        init_scheme=d["init_scheme"],
        init_seed=d["init_seed"],
        relu_output=d["relu_output"],
    )


def save_checkpoint(
    path: str | Path,
    model: MCLModel,
    extra: dict[str, ParamVector | np.ndarray] | None = None,
    metadata: dict[str, Any] | None = None,
) -> None:
    arrays: list[tuple[str, np.ndarray, Any]] = []
    for i, p in enumerate(model.learners):
        arrays.append((f"learner.{i}", p.data, p.layout))
    arrays.append(("output_weights", model.output_weights, None))
    for t in sorted(model.heads):
        arrays.append((f"head.{t}", model.heads[t].data, model.heads[t].layout))
    arrays.append(("modulation.u", model.modulation.u, None))
    arrays.append(("modulation.w", model.modulation.w, None))
    for name, value in (extra or {}).items():
        if isinstance(value, ParamVector):
            arrays.append((name, value.data, value.layout))
        else:
            arrays.append((name, np.asarray(value, dtype=np.float64).ravel(), None))

    records = []
    offset = 0
    for name, data, layout in arrays:
        records.append({
            "name": name,
            "offset": offset,
            "length": int(data.size),
            "layout": None if layout is None else [[e.name, list(e.shape)] for e in layout],
        })
        offset += data.size
    header = {
        "format": "caflab-checkpoint",
        "version": CHECKPOINT_VERSION,
        "metadata": {
            "spec": _spec_to_dict(model.spec),
            "k": model.k,
            "background": model.background.value,
            "seed": model.seed,
            "task_ids": sorted(int(t) for t in model.heads),
            **(metadata or {}),
        },
        "arrays": records,
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.concatenate([np.asarray(d, dtype="<f8").ravel() for _, d, _ in arrays]) if arrays else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head_bytes)))
        fh.write(head_bytes)
        fh.write(payload.astype("<f8").tobytes())


def _pv_from_record(data: np.ndarray, layout) -> ParamVector:
    blocks = []
    offset = 0
    for name, shape in layout:
        size = int(np.prod(shape, dtype=np.int64))
        blocks.append((name, data[offset:offset + size].reshape(shape)))
        offset += size
    return ParamVector.from_arrays(blocks)


def load_checkpoint(path: str | Path) -> tuple[MCLModel, dict[str, ParamVector | np.ndarray], dict[str, Any]]:
    """Inverse of :func:`save_checkpoint`: (model, extra arrays, metadata)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a caflab checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f8").astype(np.float64)
    arrays: dict[str, ParamVector | np.ndarray] = {}
    for rec in header["arrays"]:
        data = payload[rec["offset"]:rec["offset"] + rec["length"]]
        arrays[rec["name"]] = data.copy() if rec["layout"] is None else _pv_from_record(data, rec["layout"])
    meta = header["metadata"]
    spec = _spec_from_dict(meta["spec"])
    k = int(meta["k"])
    model = MCLModel(
        spec=spec,
        learners=[arrays.pop(f"learner.{i}") for i in range(k)],
        output_weights=arrays.pop("output_weights"),
        heads={int(t): arrays.pop(f"head.{t}") for t in meta["task_ids"]},
        modulation=ModulationState(arrays.pop("modulation.u"), arrays.pop("modulation.w")),
        background=DiversityBackground(meta["background"]),
        seed=int(meta["seed"]),
    )
    return model, arrays, meta
