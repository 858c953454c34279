"""Dense MLP core: flat parameter vectors, forward/backward passes, losses.

Everything runs in float64 on numpy arrays (a "tensor" here is simply a
float64 ``np.ndarray``). Networks are stacks of affine layers with ReLU
between them; the last layer is linear unless the spec asks for a ReLU on
the output, which is how learner feature extractors are built.

Reverse-mode differentiation is done layer by layer with cached
activations. ``backward`` can reduce per-sample gradients in three ways:
a plain sum, a sum of squares (empirical Fisher) or a sum of absolute
values (MAS importance). The last two are exact because the per-sample
gradient of a dense weight is the outer product ``delta_n a_n^T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "LayoutError",
    "NumericError",
    "LayoutEntry",
    "ParamVector",
    "Gradient",
    "LearnerSpec",
    "ForwardCache",
    "init_params",
    "forward",
    "forward_with_cache",
    "backward",
    "loss_and_grad",
    "loss_value",
    "softmax",
    "log_softmax",
    "central_diff",
    "finite_diff_grad",
    "max_rel_error",
]


class LayoutError(ValueError):
    """Parameter layouts disagree with each other or with a network spec."""


class NumericError(FloatingPointError):
    """A forward pass or loss produced a non-finite value."""

    def __init__(self, where: str, message: str = "non-finite value"):
        super().__init__(f"{message} in {where}")
        self.where = where


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameter array plus a map back to named blocks.

    The backing array is made read-only so snapshots cannot be mutated
    through aliases; build a new vector with :meth:`with_data` instead.
    """

    data: np.ndarray
    layout: tuple[LayoutEntry, ...]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 1:
            raise LayoutError("ParamVector data must be one-dimensional")
        if data.flags.writeable or not data.flags.c_contiguous:
            data = np.array(data, dtype=np.float64, copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "layout", tuple(self.layout))
        offset = 0
        for entry in self.layout:
            if entry.offset != offset:
                raise LayoutError(f"block {entry.name!r} is not contiguous (offset {entry.offset} != {offset})")
            offset += entry.size
        if offset != data.size:
            raise LayoutError(f"layout covers {offset} values but data has {data.size}")

    @classmethod
    def from_arrays(cls, blocks: Iterable[tuple[str, np.ndarray]]) -> "ParamVector":
        layout = []
        chunks = []
        offset = 0
        for name, arr in blocks:
            arr = np.asarray(arr, dtype=np.float64)
            layout.append(LayoutEntry(name, tuple(int(s) for s in arr.shape), offset))
            chunks.append(arr.ravel())
            offset += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(data, tuple(layout))

    @classmethod
    def concat(cls, *vectors: "ParamVector") -> "ParamVector":
        blocks = []
        for vec in vectors:
            blocks.extend((e.name, vec.view(e.name)) for e in vec.layout)
        return cls.from_arrays(blocks)

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return self.data.size

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.layout]

    def entry(self, name: str) -> LayoutEntry:
        for e in self.layout:
            if e.name == name:
                return e
        raise KeyError(name)

    def view(self, name: str) -> np.ndarray:
        e = self.entry(name)
        return self.data[e.offset:e.offset + e.size].reshape(e.shape)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.view(name)

    def with_data(self, data: np.ndarray) -> "ParamVector":
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.data.shape:
            raise LayoutError(f"expected {self.data.shape[0]} values, got shape {data.shape}")
        return ParamVector(data, self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.data), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def check_layout(self, other: "ParamVector", what: str = "parameter vectors") -> None:
        if not self.same_layout(other):
            raise LayoutError(f"layout mismatch between {what}")

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)


# Gradients share the ParamVector representation and layout contract.
Gradient = ParamVector


@dataclass(frozen=True)
class LearnerSpec:
    """Architecture of one dense network.

    ``layer_widths`` runs input -> hidden... -> output. With
    ``relu_output`` the final layer is followed by a ReLU, which is the
    feature-extractor form used by continual learners; without it the
    network ends in raw logits.
    """

    layer_widths: tuple[int, ...]
    dropout_rate: float = 0.0
    init_scheme: str = "glorot_uniform"
    init_seed: int = 0
    relu_output: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("a network needs at least one layer (two widths)")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_widths[-1]

    def layout(self) -> tuple[LayoutEntry, ...]:
        entries = []
        offset = 0
        for l in range(self.n_layers):
            fan_in, fan_out = self.layer_widths[l], self.layer_widths[l + 1]
            entries.append(LayoutEntry(f"layer{l}.weight", (fan_out, fan_in), offset))
            offset += fan_in * fan_out
            entries.append(LayoutEntry(f"layer{l}.bias", (fan_out,), offset))
            offset += fan_out
        return tuple(entries)

    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[l] * w[l + 1] + w[l + 1] for l in range(self.n_layers))

    def activated_layers(self) -> list[int]:
        """Indices of layers followed by ReLU (and dropout, when enabled)."""
        last = self.n_layers - 1
        return [l for l in range(self.n_layers) if l < last or self.relu_output]

    def replace(self, **changes) -> "LearnerSpec":
        fields_ = dict(
            layer_widths=self.layer_widths,
            dropout_rate=self.dropout_rate,
            init_scheme=self.init_scheme,
            init_seed=self.init_seed,
            relu_output=self.relu_output,
        )
        fields_.update(changes)
        return LearnerSpec(**fields_)


def _glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def _zeros(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return np.zeros((fan_out, fan_in))


INIT_SCHEMES: dict[str, Callable[[np.random.Generator, int, int], np.ndarray]] = {
    "glorot_uniform": _glorot_uniform,
    "zeros": _zeros,
}


def init_params(spec: LearnerSpec, seed: int | None = None) -> ParamVector:
    """Weights from the spec's init scheme, biases zero.

    The generator is PCG64 seeded through ``SeedSequence(seed)``; ``seed``
    defaults to ``spec.init_seed``.
    """
    seed = spec.init_seed if seed is None else seed
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    init = INIT_SCHEMES[spec.init_scheme]
    blocks = []
    for l in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[l], spec.layer_widths[l + 1]
        blocks.append((f"layer{l}.weight", init(rng, fan_in, fan_out)))
        blocks.append((f"layer{l}.bias", np.zeros(fan_out)))
    return ParamVector.from_arrays(blocks)


def _check_spec(params: ParamVector, spec: LearnerSpec) -> None:
    if params.layout != spec.layout():
        raise LayoutError(
            f"parameter layout {[(e.name, e.shape) for e in params.layout]} does not match "
            f"spec widths {spec.layer_widths}"
        )


def _as_batch(x: np.ndarray, spec: LearnerSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] == 0:
        raise LayoutError(f"expected a nonempty (batch, features) array, got shape {x.shape}")
    if x.shape[1] != spec.n_inputs:
        raise LayoutError(f"input has {x.shape[1]} features, spec expects {spec.n_inputs}")
    return x


def _normalize_masks(dropout_mask, spec: LearnerSpec) -> list[np.ndarray | None]:
    activated = spec.activated_layers()
    if dropout_mask is None:
        return [None] * len(activated)
    if isinstance(dropout_mask, np.ndarray):
        dropout_mask = [dropout_mask]
    masks = list(dropout_mask)
    if len(masks) != len(activated):
        raise LayoutError(f"expected {len(activated)} dropout masks, got {len(masks)}")
    return masks


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)


def forward_with_cache(
    params: ParamVector,
    spec: LearnerSpec,
    x: np.ndarray,
    dropout_mask: Sequence[np.ndarray | None] | np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    _check_spec(params, spec)
    h = _as_batch(x, spec)
    masks = _normalize_masks(dropout_mask, spec)
    activated = set(spec.activated_layers())
    cache = ForwardCache()
    mask_iter = iter(masks)
    for l in range(spec.n_layers):
        W = params.view(f"layer{l}.weight")
        b = params.view(f"layer{l}.bias")
        cache.inputs.append(h)
        with np.errstate(over="ignore", invalid="ignore"):
            z = h @ W.T + b
        cache.pre.append(z)
        if l in activated:
            h = np.maximum(z, 0.0)
            mask = next(mask_iter)
            if mask is not None:
                if mask.shape != h.shape:
                    raise LayoutError(f"dropout mask for layer{l} has shape {mask.shape}, expected {h.shape}")
                h = h * mask
            cache.masks.append(mask)
        else:
            h = z
            cache.masks.append(None)
    if not np.isfinite(h).all():
        for l, z in enumerate(cache.pre):
            if not np.isfinite(z).all():
                raise NumericError(f"layer{l}")
        raise NumericError(f"layer{spec.n_layers - 1}")
    return h, cache


def forward(
    params: ParamVector,
    spec: LearnerSpec,
    x: np.ndarray,
    dropout_mask: Sequence[np.ndarray | None] | np.ndarray | None = None,
) -> np.ndarray:
    """Network output for a batch ``x`` of shape (batch, n_inputs)."""
    out, _ = forward_with_cache(params, spec, x, dropout_mask)
    return out


def backward(
    params: ParamVector,
    spec: LearnerSpec,
    cache: ForwardCache,
    grad_out: np.ndarray,
    reduce: str = "sum",
) -> tuple[np.ndarray, np.ndarray]:
    """Pull ``grad_out`` (batch, n_outputs) back through the network.

    Returns ``(flat parameter gradient, gradient w.r.t. the input)``.
    ``reduce`` chooses how per-sample parameter gradients are combined:
    ``"sum"``, ``"sq"`` (sum of squares) or ``"abs"`` (sum of magnitudes).
    The input gradient is always per-sample.
    """
    if reduce not in ("sum", "sq", "abs"):
        raise ValueError(f"unknown reduction {reduce!r}")
    grad = np.empty(params.size)
    delta = np.asarray(grad_out, dtype=np.float64)
    activated = set(spec.activated_layers())
    for l in range(spec.n_layers - 1, -1, -1):
        if l in activated:
            mask = cache.masks[l]
            if mask is not None:
                delta = delta * mask
            delta = delta * (cache.pre[l] > 0.0)
        a = cache.inputs[l]
        W = params.view(f"layer{l}.weight")
        ew = params.entry(f"layer{l}.weight")
        eb = params.entry(f"layer{l}.bias")
        if reduce == "sum":
            gw = delta.T @ a
            gb = delta.sum(axis=0)
        elif reduce == "sq":
            gw = (delta * delta).T @ (a * a)
            gb = (delta * delta).sum(axis=0)
        else:
            gw = np.abs(delta).T @ np.abs(a)
            gb = np.abs(delta).sum(axis=0)
        grad[ew.offset:ew.offset + ew.size] = gw.ravel()
        grad[eb.offset:eb.offset + eb.size] = gb
        delta = delta @ W
    return grad, delta


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


LOSS_KINDS = ("softmax-ce", "squared")


def output_loss(outputs: np.ndarray, targets: np.ndarray, loss_kind: str) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. ``outputs``.

    ``softmax-ce`` takes integer class labels. ``squared`` takes real
    targets shaped like the outputs (or (batch,) for a single output) and
    sums the squared residual over outputs: no 1/2 factor.
    """
    n = outputs.shape[0]
    if loss_kind == "softmax-ce":
        labels = np.asarray(targets)
        if labels.shape != (n,):
            raise LayoutError(f"expected {n} labels, got shape {labels.shape}")
        labels = labels.astype(np.int64)
        if labels.min() < 0 or labels.max() >= outputs.shape[1]:
            raise ValueError(f"labels must lie in [0, {outputs.shape[1]})")
        logp = log_softmax(outputs)
        loss = -logp[np.arange(n), labels].mean()
        g = np.exp(logp)
        g[np.arange(n), labels] -= 1.0
        return float(loss), g / n
    if loss_kind == "squared":
        y = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
        r = outputs - y
        return float((r * r).sum() / n), 2.0 * r / n
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def loss_value(params, spec, batch, loss_kind="softmax-ce", dropout_mask=None) -> float:
    x, y = batch
    out = forward(params, spec, x, dropout_mask)
    loss, _ = output_loss(out, y, loss_kind)
    if not np.isfinite(loss):
        raise NumericError("loss")
    return loss


def loss_and_grad(
    params: ParamVector,
    spec: LearnerSpec,
    batch: tuple[np.ndarray, np.ndarray],
    loss_kind: str = "softmax-ce",
    dropout_mask=None,
) -> tuple[float, Gradient]:
    """Batch-mean loss and its exact gradient."""
    x, y = batch
    out, cache = forward_with_cache(params, spec, x, dropout_mask)
    loss, g_out = output_loss(out, y, loss_kind)
    if not np.isfinite(loss):
        raise NumericError("loss")
    grad, _ = backward(params, spec, cache, g_out)
    return loss, params.with_data(grad)


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g


def finite_diff_grad(params, spec, batch, loss_kind="softmax-ce", h=1e-5, dropout_mask=None) -> Gradient:
    def f(flat):
        return loss_value(params.with_data(flat), spec, batch, loss_kind, dropout_mask)

    return params.with_data(central_diff(f, params.data, h))


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-8) -> float:
    """Largest coordinate error, relative where |g| >= abs_floor, absolute below it."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    rel = np.where(scale >= abs_floor, err / np.where(scale > 0, scale, 1.0), err)
    return float(rel.max()) if rel.size else 0.0
