import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphcam.data import Dataset, Subject
from graphcam.errors import InvalidStateError, ValidationError
from graphcam.nn import ModelConfig, init_model, model_forward
from graphcam.saliency import (
    ClassActivationMap,
    class_activation_map,
    minmax_scale,
    population_saliency,
    top_k_nodes,
)
from graphcam.train import FoldSplit

from conftest import random_graph


def make_dataset(rng, n=6, d=7, dy=3):
    subjects = [Subject(f"s{i}", i % 2, rng.standard_normal((d, dy))) for i in range(n)]
    return Dataset(random_graph(rng, d), subjects)


def make_model(rng, dy=3, channels=(4, 3), k=3):
    return init_model(ModelConfig(channels=channels, num_coeffs=k, dropout_layers=(0,), input_channels=dy), rng)


def test_cam_single_feature_map(rng):
    ds = make_dataset(rng)
    m = make_model(rng, channels=(1,))
    m.dense.weights[0, 1] = 1.0
    cam = class_activation_map(m, ds.ltilde, ds.subjects[0], 1)
    _, trace = model_forward(m, ds.ltilde, ds.subjects[0].features, "eval")
    np.testing.assert_array_equal(cam.scores, trace.last_conv_features[0, :, 0])


def test_cam_zero_weights(rng):
    ds = make_dataset(rng)
    m = make_model(rng)
    m.dense.weights[:, 0] = 0
    assert not np.any(class_activation_map(m, ds.ltilde, ds.subjects[1], 0).scores)


def test_cam_logit_identity(rng):
    ds = make_dataset(rng)
    m = make_model(rng)
    m.dense.bias[:] = rng.standard_normal(2)
    for s in ds.subjects:
        logits, _ = model_forward(m, ds.ltilde, s.features, "eval")
        for c in range(2):
            cam = class_activation_map(m, ds.ltilde, s, c)
            assert abs(cam.scores.mean() - (logits[0, c] - m.dense.bias[c])) < 1e-9


def test_cam_class_out_of_range(rng):
    ds = make_dataset(rng)
    with pytest.raises(ValidationError):
        class_activation_map(make_model(rng), ds.ltilde, ds.subjects[0], 2)


def test_top_k_examples():
    assert top_k_nodes(np.array([0.1, 0.9, 0.5]), 2) == [1, 2]
    assert top_k_nodes(np.full(5, 0.3), 3) == [0, 1, 2]
    cam = ClassActivationMap("x", 0, np.array([3.0, 1.0, 3.0]))
    assert top_k_nodes(cam, 2) == [0, 2]
    with pytest.raises(ValidationError):
        top_k_nodes(np.zeros(3), 0)
    with pytest.raises(ValidationError):
        top_k_nodes(np.zeros(3), 4)


def test_top_k_matches_full_sort(rng):
    scores = rng.standard_normal(55)
    ranked = sorted(range(55), key=lambda v: (-scores[v], v))
    assert top_k_nodes(scores, 3) == ranked[:3]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=2, max_size=20), st.data())
def test_top_k_monotone(values, data):
    scores = np.array(values, dtype=float)
    k = data.draw(st.integers(1, len(values) - 1))
    assert set(top_k_nodes(scores, k)) <= set(top_k_nodes(scores, k + 1))


def test_minmax_scale():
    np.testing.assert_array_equal(minmax_scale([2.0, 4.0, 3.0]), [0.0, 1.0, 0.5])
    np.testing.assert_array_equal(minmax_scale([5.0, 5.0]), [0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
def test_minmax_idempotent(values):
    once = minmax_scale(values)
    np.testing.assert_allclose(minmax_scale(once), once, atol=1e-12)


def single_fold(n):
    return [FoldSplit([], [], list(range(n)))]


def test_population_one_subject_k1(rng):
    ds = make_dataset(rng, n=2)
    ds1 = Dataset(ds.graph, ds.subjects[:1], ["a"])
    m = make_model(rng)
    sal = population_saliency([([m], single_fold(1))], ds1, k=1)
    assert sal.topk_counts.sum() == 1 and sal.topk_counts.max() == 1


def test_population_counts_and_scaling(rng):
    ds = make_dataset(rng, n=8)
    m = make_model(rng)
    one = population_saliency([([m], single_fold(8))], ds, k=3)
    two = population_saliency([([m], single_fold(8))] * 2, ds, k=3)
    assert one.topk_counts.sum() == 3 * 8
    np.testing.assert_array_equal(two.topk_counts, 2 * one.topk_counts)
    np.testing.assert_allclose(two.mean_activation, one.mean_activation, atol=1e-12)
    for row in one.mean_activation:
        assert row.min() == 0.0 and row.max() == 1.0


def test_population_uses_predicted_class(rng):
    ds = make_dataset(rng, n=4)
    m = make_model(rng)
    sal, cams = population_saliency([([m], single_fold(4))], ds, k=2, keep_subject_cams=True)
    for cam, s in zip(cams, ds.subjects):
        logits, _ = model_forward(m, ds.ltilde, s.features, "eval")
        assert cam.predicted == int(np.argmax(logits))
        assert cam.top_nodes == top_k_nodes(cam.scores[cam.predicted], 2)


def test_population_uses_test_fold_model(rng):
    ds = make_dataset(rng, n=4)
    m0, m1 = make_model(rng), make_model(rng)
    splits = [FoldSplit([2, 3], [], [0, 1]), FoldSplit([0, 1], [], [2, 3])]
    _, cams = population_saliency([([m0, m1], splits)], ds, k=1, keep_subject_cams=True)
    for cam, s, m in zip(cams, ds.subjects, [m0, m0, m1, m1]):
        want = class_activation_map(m, ds.ltilde, s, 0).scores
        np.testing.assert_allclose(cam.scores[0], want, atol=1e-12)


def test_population_missing_model(rng):
    ds = make_dataset(rng, n=4)
    with pytest.raises(InvalidStateError):
        population_saliency([([make_model(rng)], [FoldSplit([], [], [0, 1, 2])])], ds, k=1)
    with pytest.raises(InvalidStateError):
        population_saliency([([None], single_fold(4))], ds, k=1)


def test_ranking_order():
    from graphcam.saliency import PopulationSaliency

    sal = PopulationSaliency(1, np.zeros((2, 4)), np.zeros((2, 4)), np.array([2, 5, 5, 0]), 12, 1)
    assert sal.ranking() == [1, 2, 0, 3]
