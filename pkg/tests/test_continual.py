import numpy as np
import pytest
from dataclasses import replace

from caflab.consolidate import mcl_importance
from caflab.continual import (
    GridSpec,
    ModelConfig,
    consolidate_after_task,
    evaluate,
    grid_search,
    new_run_state,
    run_sequence,
    scratch_baseline,
    train_task,
)
from caflab.numerics import LearnerSpec
from caflab.optim import TrainConfig, minimize
from caflab.regularize import RegConfig
from caflab.tasks import SyntheticSpec, TaskSequence, gen_synthetic_sequence

SMALL = ModelConfig(LearnerSpec((4, 8, 2)), 1, "low")
FAST = TrainConfig(epochs=5, optimizer="adam", lr=0.02, batch_size=16)


def small_seq(n_tasks=2, conflict=60.0, seed=0, **kw):
    return gen_synthetic_sequence(SyntheticSpec(n_tasks=n_tasks, dim=4, conflict=conflict, n_train=30, n_test=30, **kw), seed)


def forgetting_seq(seed):
    spec = SyntheticSpec(n_tasks=2, classes_per_task=4, conflict=120.0, dim=10, cluster_sep=6.0, n_train=100)
    return gen_synthetic_sequence(spec, seed)


FORGET_MODEL = ModelConfig(LearnerSpec((10, 32, 2), relu_output=False), 1, "high")
FORGET_TRAIN = TrainConfig(epochs=20, optimizer="adam", lr=0.01)


def test_zero_epochs_only_creates_head():
    seq = small_seq()
    state = new_run_state(SMALL.build(0), 2)
    before = state.model.theta(0).data.copy()
    train_task(state, seq[0], RegConfig(), replace(FAST, epochs=0))
    np.testing.assert_array_equal(state.model.theta(0).data, before)
    assert 0 in state.model.heads


def test_same_seed_bitwise_identical():
    seq = small_seq(3)
    cfg = RegConfig(lambda_sp=10.0, lambda_af=0.01, af_mode="af1")
    mc = ModelConfig(LearnerSpec((4, 8, 2)), 3, "high")
    a = run_sequence(seq, cfg, FAST, mc, seed=4, with_scratch=False)
    b = run_sequence(seq, cfg, FAST, mc, seed=4, with_scratch=False)
    assert a.metrics == b.metrics
    np.testing.assert_array_equal(a.state.accuracy.a, b.state.accuracy.a)
    for i in range(3):
        np.testing.assert_array_equal(a.state.model.theta(i).data, b.state.model.theta(i).data)


def test_convex_single_parameter_converges():
    # f(x) = mean_n (x - c_n)^2 / 2 has its minimum at mean(c)
    c = np.array([0.5, 1.5, 2.0, 4.0])

    def loss_grad(x, idx, epoch, b):
        d = x - c[idx]
        return float(0.5 * np.mean(d * d)), np.array([np.mean(d)])

    x, hist = minimize(loss_grad, np.array([10.0]), 4, TrainConfig(epochs=400, lr=0.05, batch_size=4))
    assert abs(x[0] - c.mean()) <= 1e-3
    assert hist[-1] <= hist[0]


def test_non_finite_loss_names_location():
    def loss_grad(x, idx, epoch, b):
        return (np.nan if epoch == 1 and b == 1 else 1.0), np.zeros(1)

    with pytest.raises(FloatingPointError, match="epoch 1, batch 1"):
        minimize(loss_grad, np.zeros(1), 10, TrainConfig(epochs=3, batch_size=5))


def test_consolidation_accumulates_per_task_importance():
    seq = small_seq()
    reg = RegConfig(lambda_sp=1.0)
    state = new_run_state(ModelConfig(LearnerSpec((4, 6, 2)), 2, "high").build(1), 2)
    train_task(state, seq[0], reg, FAST)
    first = mcl_importance("fisher", state.model, 0, seq[0].train.as_batch())
    consolidate_after_task(state, seq[0], reg)
    for i in range(2):
        np.testing.assert_array_equal(state.consolidation.importance[i].data, first[i].data)
        np.testing.assert_array_equal(state.consolidation.snapshots[i].data, state.model.theta(i).data)
    train_task(state, seq[1], reg, FAST)
    second = mcl_importance("fisher", state.model, 1, seq[1].train.as_batch())
    consolidate_after_task(state, seq[1], reg)
    for i in range(2):
        np.testing.assert_allclose(state.consolidation.importance[i].data, first[i].data + second[i].data, rtol=1e-15)
    assert state.tasks_done == 2


def test_old_heads_never_mutated():
    seq = small_seq(3)
    state = new_run_state(SMALL.build(0), 3)
    reg = RegConfig(lambda_sp=5.0)
    train_task(state, seq[0], reg, FAST)
    consolidate_after_task(state, seq[0], reg)
    head0 = state.model.head(0).data.copy()
    for t in (1, 2):
        train_task(state, seq[t], reg, FAST)
        consolidate_after_task(state, seq[t], reg)
        np.testing.assert_array_equal(state.model.head(0).data, head0)


def test_single_separable_task():
    seq = gen_synthetic_sequence(SyntheticSpec(n_tasks=1, dim=4, cluster_sep=6.0, n_train=50), 0)
    r = run_sequence(seq, RegConfig(), FAST, SMALL, seed=0)
    assert r.state.accuracy.a[0, 0] >= 0.95
    assert r.state.accuracy.scratch[0] >= 0.95
    assert r.metrics["bwt"] is None and r.metrics["aac"] >= 0.95


def test_scratch_baseline_deterministic_and_in_range():
    task = small_seq()[1]
    a = scratch_baseline(task, FAST, SMALL, 3)
    assert a == scratch_baseline(task, FAST, SMALL, 3)
    assert 0.0 <= a <= 1.0


@pytest.mark.parametrize("seed", range(3))
def test_repeated_task_has_no_interference(seed):
    # the same task (same identity, so the same head) presented twice
    task = small_seq(seed=seed)[0]
    r = run_sequence(TaskSequence([task, task]), RegConfig(), FAST, SMALL, seed=seed, with_scratch=False)
    assert r.metrics["bwt"] >= -0.02


def test_fine_tuning_forgets_conflicting_task():
    bwts = [run_sequence(forgetting_seq(s), RegConfig(), FORGET_TRAIN, FORGET_MODEL, s, with_scratch=False).metrics["bwt"]
            for s in range(2)]
    assert np.mean(bwts) <= -0.2


def test_pre_training_accuracy_recorded():
    r = run_sequence(small_seq(3), RegConfig(), FAST, SMALL, seed=0)
    A = r.state.accuracy
    assert not np.isnan(A.pre).any() and not np.isnan(A.scratch).any()
    assert np.isnan(A.a[0, 1])
    assert r.metrics["fwt"] == pytest.approx(np.mean(A.pre[1:] - A.scratch[1:]), abs=1e-15)


def test_alpha_sums_to_one_every_step():
    mc = ModelConfig(LearnerSpec((4, 6, 2)), 3, "high")
    reg = RegConfig(lambda_sp=1.0, lambda_af=0.1, gamma=0.1, af_mode="af1", modulated=True)
    r = run_sequence(small_seq(2), reg, FAST, mc, seed=0, with_scratch=False)
    sums = np.array(r.state.alpha_sums)
    assert sums.size == 2 * 5 * 4
    assert np.max(np.abs(sums - 1.0)) <= 1e-12
    assert not np.allclose(r.metrics["alpha"], 1 / 3)
    assert r.metrics["cos"] is not None


def test_af2_sequence_runs():
    reg = RegConfig(lambda_sp=1.0, lambda_af=1.0, af_mode="af2", expansion_epochs=2)
    r = run_sequence(small_seq(2), reg, FAST, SMALL, seed=0, with_scratch=False)
    assert r.state.consolidation.expansion is None
    assert 0 <= r.metrics["aac"] <= 1


def test_grid_single_cell_and_ordering():
    seq = small_seq(2)
    cells = grid_search(seq, GridSpec({"lambda_sp": [3.0]}), RegConfig(), FAST, SMALL, with_scratch=False)
    assert len(cells) == 1 and cells[0].params == {"lambda_sp": 3.0} and cells[0].reg.lambda_sp == 3.0
    cells = grid_search(seq, GridSpec({"lambda_sp": [0.0, 10.0], "lr": [0.02, 0.01]}), RegConfig(), FAST, SMALL,
                        with_scratch=False)
    assert len(cells) == 4
    assert [c.aac for c in cells] == sorted((c.aac for c in cells), reverse=True)
    again = grid_search(seq, GridSpec({"lambda_sp": [0.0, 10.0], "lr": [0.02, 0.01]}), RegConfig(), FAST, SMALL,
                        with_scratch=False)
    assert [c.params for c in cells] == [c.params for c in again]


def test_grid_tie_break_prefers_larger_stability_then_smaller_forgetting():
    # zero epochs: every cell has the same accuracy
    seq = small_seq(2)
    grid = GridSpec({"lambda_sp": [1.0, 5.0], "lambda_af": [0.5, 0.1]})
    cells = grid_search(seq, grid, RegConfig(af_mode="af1"), replace(FAST, epochs=0), SMALL, with_scratch=False)
    assert [(c.reg.lambda_sp, c.reg.lambda_af) for c in cells] == [(5.0, 0.1), (5.0, 0.5), (1.0, 0.1), (1.0, 0.5)]


def test_grid_regularised_cell_beats_fine_tuning():
    cells = grid_search(forgetting_seq, GridSpec({"lambda_sp": [0.0, 1e7]}), RegConfig(), FORGET_TRAIN, FORGET_MODEL,
                        seeds=(100, 101), with_scratch=False)
    assert cells[0].reg.lambda_sp == 1e7
    assert cells[0].bwt > cells[1].bwt


def test_grid_cv_protocol_uses_subset():
    seq = small_seq(4)
    cells = grid_search(seq, GridSpec({"lambda_sp": [1.0]}, protocol="cv", cv_tasks=2), RegConfig(), FAST, SMALL,
                        with_scratch=False)
    assert cells[0].aac is not None


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec({})
    with pytest.raises(ValueError):
        GridSpec({"lambda_spp": [1.0]})
    with pytest.raises(ValueError):
        GridSpec({"lambda_sp": [1.0]}, protocol="cv")


def test_evaluate_uses_deterministic_pass():
    mc = ModelConfig(LearnerSpec((4, 8, 2)), 2, "medium")
    seq = small_seq(1)
    state = new_run_state(mc.build(0), 1)
    train_task(state, seq[0], RegConfig(), FAST)
    assert evaluate(state.model, seq[0]) == evaluate(state.model, seq[0])
