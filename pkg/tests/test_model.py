import numpy as np
import pytest

from caflab.model import (
    DiversityBackground,
    ModulationState,
    UnknownTaskError,
    init_head,
    init_mcl,
    learner_param_count,
    learner_predictions,
    load_checkpoint,
    mcl_forward,
    mcl_param_count,
    save_checkpoint,
    width_for_budget,
    with_hidden_width,
)
from caflab.numerics import LearnerSpec, ParamVector, forward, softmax

SPEC = LearnerSpec((4, 8, 3))


def with_head(model, task=0, n_classes=2):
    model.heads[task] = init_head(model, task, n_classes)
    return model


def test_single_learner_init():
    m = init_mcl(SPEC, 1, "high", seed=3)
    assert m.k == 1
    np.testing.assert_array_equal(m.output_weights, [1.0])
    assert m.heads == {}


def test_low_background_learners_identical_and_dropout_off():
    m = init_mcl(SPEC, 5, "low", seed=3)
    assert m.spec.dropout_rate == 0.0
    for p in m.learners[1:]:
        np.testing.assert_array_equal(p.data, m.learners[0].data)


def test_medium_background_shares_init_with_dropout():
    m = init_mcl(SPEC, 3, "medium", seed=3)
    assert m.spec.dropout_rate > 0
    np.testing.assert_array_equal(m.learners[1].data, m.learners[0].data)


def test_high_background_learners_differ():
    m = init_mcl(SPEC, 5, DiversityBackground.HIGH, seed=3)
    for i in range(5):
        for j in range(i + 1, 5):
            assert np.linalg.norm(m.learners[i].data - m.learners[j].data) > 0


def test_zero_learners_rejected():
    with pytest.raises(ValueError):
        init_mcl(SPEC, 0)


def test_k1_matches_single_learner_forward(rng):
    m = with_head(init_mcl(SPEC, 1, "low", seed=1))
    x = rng.normal(size=(6, 4))
    head = m.head(0)
    expected = forward(m.learners[0], SPEC, x) @ head["weight"].T + head["bias"]
    np.testing.assert_array_equal(mcl_forward(m, x, 0), expected)


def test_one_hot_output_weights_select_a_learner(rng):
    m = with_head(init_mcl(SPEC, 3, "high", seed=1))
    m.output_weights = np.array([0.0, 1.0, 0.0])
    x = rng.normal(size=(6, 4))
    head = m.head(0)
    expected = forward(m.learners[1], m.spec, x) @ head["weight"].T + head["bias"]
    np.testing.assert_allclose(mcl_forward(m, x, 0), expected, rtol=0, atol=1e-15)


def hand_model():
    # identity-ish learners: 1 input -> 2 features, relu output
    spec = LearnerSpec((1, 2), relu_output=True)
    l1 = ParamVector.from_arrays([("layer0.weight", np.array([[1.0], [2.0]])), ("layer0.bias", np.zeros(2))])
    l2 = ParamVector.from_arrays([("layer0.weight", np.array([[3.0], [0.0]])), ("layer0.bias", np.array([0.0, 1.0]))])
    m = init_mcl(spec, 2, "low")
    m.learners = [l1, l2]
    m.output_weights = np.array([0.25, 0.75])
    m.heads[0] = ParamVector.from_arrays([("weight", np.array([[1.0, 0.0], [0.0, 1.0]])), ("bias", np.array([0.0, 0.5]))])
    return m


def test_fused_logits_hand_arithmetic():
    m = hand_model()
    # f1 = [1, 2], f2 = [3, 1]; fused = 0.25 f1 + 0.75 f2 = [2.5, 1.25]
    np.testing.assert_allclose(mcl_forward(m, np.array([[1.0]]), 0), [[2.5, 1.75]], atol=1e-15)


def test_learner_predictions_hand_softmax():
    m = hand_model()
    p1, p2 = learner_predictions(m, np.array([[1.0]]), 0)
    # learner i routes k g_i f_i: 0.5 [1,2] -> [0.5, 1.5]; 1.5 [3,1] -> [4.5, 2.0]
    np.testing.assert_allclose(p1, softmax(np.array([[0.5, 1.5]])), atol=1e-15)
    np.testing.assert_allclose(p2, softmax(np.array([[4.5, 2.0]])), atol=1e-15)
    for p in (p1, p2):
        assert abs(p.sum() - 1.0) <= 1e-12


def test_identical_learners_predictions_match_fused(rng):
    m = with_head(init_mcl(SPEC, 4, "low", seed=2), n_classes=3)
    x = rng.normal(size=(5, 4))
    fused = softmax(mcl_forward(m, x, 0))
    for p in learner_predictions(m, x, 0):
        np.testing.assert_allclose(p, fused, atol=1e-14)


def test_k1_prediction_equals_softmax_of_logits(rng):
    m = with_head(init_mcl(SPEC, 1, "high", seed=2), n_classes=3)
    x = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(learner_predictions(m, x, 0)[0], softmax(mcl_forward(m, x, 0)))


def test_missing_head_raises():
    with pytest.raises(UnknownTaskError):
        mcl_forward(init_mcl(SPEC, 1), np.zeros((1, 4)), 7)


def test_forward_is_deterministic(rng):
    m = with_head(init_mcl(SPEC, 3, "high", seed=5))
    x = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(mcl_forward(m, x, 0), mcl_forward(m, x, 0))


def test_width_for_budget_k1_is_reference_width():
    ref = LearnerSpec((10, 37, 8))
    assert width_for_budget(1, ref) == 37


def test_width_for_budget_inverts_parameter_count():
    ref = LearnerSpec((10, 20, 8))
    budget = 2 * learner_param_count(ref)
    assert width_for_budget(2, ref, budget) == 20


def test_width_never_increases_with_k():
    ref = LearnerSpec((10, 64, 8))
    widths = [width_for_budget(k, ref) for k in range(1, 9)]
    assert all(a >= b for a, b in zip(widths, widths[1:]))


@pytest.mark.parametrize("k", range(1, 9))
def test_budget_parity(k):
    ref = LearnerSpec((10, 64, 8))
    budget = learner_param_count(ref)
    total = mcl_param_count(with_hidden_width(ref, width_for_budget(k, ref)), k)
    assert total <= budget
    assert abs(total - budget) / budget <= 0.1


def test_budget_too_small():
    with pytest.raises(ValueError):
        width_for_budget(4, LearnerSpec((10, 64, 8)), budget=20)


def test_modulation_uniform_sums():
    s = ModulationState.uniform(4)
    assert abs(s.alpha.sum() - 1.0) <= 1e-12
    assert abs(s.pair_weights.sum() - 1.0) <= 1e-12
    assert s.w.size == 12


def test_checkpoint_round_trip(tmp_path, rng):
    m = init_mcl(SPEC, 3, "medium", seed=9)
    for t in range(2):
        with_head(m, t, 2 + t)
    m.modulation = ModulationState(rng.normal(size=3), rng.normal(size=6))
    extra = {"importance.0": m.theta(0), "plain": np.arange(4.0)}
    path = tmp_path / "model.caf"
    save_checkpoint(path, m, extra, {"note": "x"})
    m2, extras, meta = load_checkpoint(path)
    assert meta["note"] == "x"
    assert m2.k == 3 and m2.spec == m.spec and m2.background is m.background
    for a, b in zip(m.learners, m2.learners):
        np.testing.assert_array_equal(a.data, b.data)
        assert a.layout == b.layout
    np.testing.assert_array_equal(m2.output_weights, m.output_weights)
    for t in m.heads:
        np.testing.assert_array_equal(m2.heads[t].data, m.heads[t].data)
    np.testing.assert_array_equal(m2.modulation.w, m.modulation.w)
    np.testing.assert_array_equal(extras["plain"], np.arange(4.0))
    assert extras["importance.0"].layout == m.theta(0).layout
    assert path.read_bytes()[:8] == b"CAFLAB\x00\x01"


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "bad.caf"
    p.write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        load_checkpoint(p)
