from pathlib import Path

import numpy as np
import pytest

from caflab.numerics import LearnerSpec, ParamVector, forward_with_cache, init_params

KINK_MARGIN = 1e-3
FIXTURES_DIR = Path(__file__).parent / "fixtures"


def random_net(rng, max_params=200, relu_output=False, n_out=None):
    """A small random dense net whose pre-activations stay clear of ReLU kinks."""
    while True:
        depth = int(rng.integers(1, 4))
        widths = [int(rng.integers(1, 6)) for _ in range(depth + 1)]
        if n_out is not None:
            widths[-1] = n_out
        spec = LearnerSpec(tuple(widths), relu_output=relu_output)
        if spec.n_params() <= max_params:
            break
    params = init_params(spec, int(rng.integers(1 << 31)))
    params = params.with_data(params.data + 0.1 * rng.normal(size=params.size))
    return spec, params


def clear_of_kinks(params, spec, x, margin=KINK_MARGIN):
    _, cache = forward_with_cache(params, spec, x)
    activated = set(spec.activated_layers())
    return all(np.abs(z).min() > margin for l, z in enumerate(cache.pre) if l in activated)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_caf_case(rng, k, af_mode="af1", modulated=True, n=6, n_classes=3, max_params=60):
    """A K-learner model with a head, random old-task state, and a batch clear of kinks."""
    from caflab.model import ModulationState, init_head, init_mcl
    from caflab.regularize import ConsolidationState, ExpansionState

    while True:
        spec, _ = random_net(rng, max_params=max_params, relu_output=bool(rng.integers(2)))
        model = init_mcl(spec, k, "high", int(rng.integers(1 << 31)))
        model.learners = [p.with_data(p.data + 0.3 * rng.normal(size=p.size)) for p in model.learners]
        model.output_weights = rng.uniform(0.2, 1.0, k)
        model.heads[0] = init_head(model, 0, n_classes)
        model.heads[0] = model.heads[0].with_data(model.heads[0].data + 0.3 * rng.normal(size=model.heads[0].size))
        if modulated:
            model.modulation = ModulationState(rng.normal(size=k), rng.normal(size=k * (k - 1)))
        x = rng.normal(size=(n, spec.n_inputs))
        if all(clear_of_kinks(p, model.spec, x) for p in model.learners):
            break
    y = rng.integers(0, n_classes, n)
    thetas = [model.theta(i) for i in range(k)]
    state = ConsolidationState(
        snapshots=[t.with_data(t.data + 0.5 * rng.normal(size=t.size)) for t in thetas],
        importance=[t.with_data(rng.random(t.size)) for t in thetas],
    )
    if af_mode == "af2":
        t = thetas[0]
        state.expansion = ExpansionState(t.with_data(t.data + 0.5 * rng.normal(size=t.size)), t.with_data(rng.random(t.size)))
    return model, (x, y), state


# --- acceptance summary -------------------------------------------------------------

ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def acceptance():
    """Record (criterion, ok, detail); a summary line per criterion is printed at the end."""

    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE.setdefault(n, []).append((bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  " + "; ".join(d for _, d in parts))
