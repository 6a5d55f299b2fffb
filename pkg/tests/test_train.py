import math

import numpy as np
import pytest

from graphcam.data import SynthConfig, generate_synthetic
from graphcam.errors import NumericalError, TrainingError, ValidationError
from graphcam.nn import DenseParams, ModelConfig, dense_backward, dense_forward, init_model, softmax_cross_entropy
from graphcam.train import (
    AdamState,
    BalancedBatcher,
    PlateauDecay,
    TrainConfig,
    adam_step,
    derive_rng,
    evaluate,
    make_balanced_batch,
    make_stratified_folds,
    replay_lr,
    run_cross_validation,
    train_model,
)


def reference_adam(x0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written from the textbook update, pure Python floats."""
    x, m, v = x0, 0.0, 0.0
    traj = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        traj.append(x)
    return traj


def test_adam_zero_grad_fresh_state():
    params = {"w": np.array([1.5, -0.0, 3.0])}
    before = params["w"].copy()
    state = AdamState()
    for _ in range(3):
        adam_step(params, {"w": np.zeros(3)}, state, TrainConfig())
    assert params["w"].tobytes() == before.tobytes()
    assert state.step_count == 3


def test_adam_first_step():
    params = {"x": np.array([1.0])}
    adam_step(params, {"x": np.array([1.0])}, AdamState(), TrainConfig(learning_rate=0.1))
    assert params["x"][0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_matches_reference_on_quadratic():
    cfg = TrainConfig(learning_rate=0.1)
    params = {"x": np.array([0.0])}
    state = AdamState()
    traj = []
    for _ in range(50):
        adam_step(params, {"x": params["x"] - 3.0}, state, cfg)
        traj.append(params["x"][0])
    ref = reference_adam(0.0, lambda x: x - 3.0, 50, 0.1)
    assert max(abs(a - b) for a, b in zip(traj, ref)) < 1e-12


def test_adam_rejects_non_finite():
    params = {"x": np.array([1.0])}
    state = AdamState()
    with pytest.raises(NumericalError):
        adam_step(params, {"x": np.array([np.nan])}, state, TrainConfig())
    assert params["x"][0] == 1.0 and state.step_count == 0


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=5)
    with pytest.raises(ValidationError):
        TrainConfig(total_steps=55, eval_every=10)
    with pytest.raises(ValidationError):
        TrainConfig(beta1=1.0)


@pytest.mark.parametrize(
    "accs, decays",
    [
        ((0.8, 0.7, 0.6), [2]),
        ((0.8, 0.7, 0.9), []),
        ((0.8, 0.8, 0.7), []),
        ((0.9, 0.8, 0.7, 0.6, 0.5), [2, 4]),
    ],
)
def test_plateau_decay(accs, decays):
    sched = PlateauDecay(0.001)
    got = [i for i, a in enumerate(accs) if sched.update(a)]
    assert got == decays
    assert sched.lr == 0.001 * 0.5 ** len(decays)


def test_replay_lr():
    assert replay_lr(0.001, [{}, {}]) == 0.001 * 0.5 * 0.5


def test_folds_twenty_samples():
    labels = np.array([0, 1] * 10)
    splits = make_stratified_folds(labels, 10, seed=0)
    for s in splits:
        assert sorted(labels[s.test_idx]) == [0, 1]


def test_folds_partition_and_disjoint():
    labels = np.array([0] * 37 + [1] * 23)
    splits = make_stratified_folds(labels, 10, seed=5)
    tested = sorted(i for s in splits for i in s.test_idx)
    assert tested == list(range(60))
    for s in splits:
        parts = [set(s.train_idx), set(s.val_idx), set(s.test_idx)]
        assert sum(map(len, parts)) == 60 and len(set().union(*parts)) == 60
        for p in parts:
            assert {labels[i] for i in p} == {0, 1}


def test_folds_large_cohort_ratio():
    labels = np.array([0] * 2873 + [1] * 2557)
    ratio = 2873 / 5430
    for s in make_stratified_folds(labels, 10, seed=1):
        n = len(s.test_idx)
        n0 = int(np.sum(labels[s.test_idx] == 0))
        assert abs(n0 - ratio * n) <= 1
        assert abs(n - 543) <= 1


def test_folds_too_few():
    with pytest.raises(ValidationError):
        make_stratified_folds(np.array([0] * 5 + [1] * 20), 10)


def test_balanced_batch_counts():
    labels = np.array([0] * 300 + [1] * 100)
    batch = make_balanced_batch(np.arange(400), labels, 200, np.random.default_rng(0))
    assert np.sum(labels[batch] == 0) == 100 and np.sum(labels[batch] == 1) == 100
    # the 100-member class is exhausted exactly once per batch
    assert sorted(i for i in batch if labels[i] == 1) == list(range(300, 400))


def test_balanced_batcher_without_replacement_within_epoch():
    labels = np.array([0] * 30 + [1] * 30)
    b = BalancedBatcher(np.arange(60), labels, 20, np.random.default_rng(2))
    first_three = [i for _ in range(3) for i in b.next_batch()]
    assert sorted(first_three) == list(range(60))


def test_balanced_batcher_deterministic():
    labels = np.array([0, 1] * 40)
    a = BalancedBatcher(np.arange(80), labels, 10, derive_rng(4, 1))
    b = BalancedBatcher(np.arange(80), labels, 10, derive_rng(4, 1))
    assert [a.next_batch() for _ in range(10)] == [b.next_batch() for _ in range(10)]


def _always(cls, n_in):
    m = init_model(ModelConfig(channels=(1,), num_coeffs=1, dropout_layers=(), input_channels=n_in), 0)
    for p in m.parameters().values():
        p[...] = 0
    m.dense.bias[cls] = 1.0
    return m


def test_evaluate_constant_model():
    ds = generate_synthetic(SynthConfig(n_subjects=20, d_nodes=4, n_salient=1, seed=0))
    res = evaluate(_always(0, 4), ds.ltilde, ds.features, ds.labels)
    assert res.accuracy == 0.5
    assert res.confusion.sum() == 20
    np.testing.assert_array_equal(res.confusion, [[10, 0], [10, 0]])


def test_evaluate_perfect_model():
    ds = generate_synthetic(SynthConfig(n_subjects=20, d_nodes=4, n_salient=1, seed=0, noise_sd=0))
    m = init_model(ModelConfig(channels=(1,), num_coeffs=1, dropout_layers=(), input_channels=4), 0)
    for p in m.parameters().values():
        p[...] = 0
    # node-0 row sum differs by class (salient node), relu keeps the positive side
    m.conv_layers[0].coeffs[:, 0, 0] = 1.0
    feats = ds.features
    mean0 = feats[ds.labels == 0].sum(axis=2).clip(0).mean(axis=1).mean()
    mean1 = feats[ds.labels == 1].sum(axis=2).clip(0).mean(axis=1).mean()
    sign = 1.0 if mean1 > mean0 else -1.0
    mid = 0.5 * (mean0 + mean1)
    # logit1 - logit0 = 2 * sign * (pooled - mid)
    m.dense.weights[0] = [-sign, sign]
    m.dense.bias[:] = [sign * mid, -sign * mid]
    res = evaluate(m, ds.ltilde, feats, ds.labels)
    assert res.accuracy == 1.0
    assert res.confusion[0, 1] == 0 and res.confusion[1, 0] == 0


def test_evaluate_empty():
    with pytest.raises(ValidationError):
        evaluate(_always(0, 4), None, np.zeros((0, 4, 4)), np.zeros(0, dtype=int))


def test_dense_only_training_reduces_loss():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((80, 3))
    y = (x @ np.array([1.0, -2.0, 0.5]) > 0).astype(int)
    params = DenseParams(np.zeros((3, 2)), np.zeros(2))
    named = {"w": params.weights, "b": params.bias}
    state = AdamState()
    cfg = TrainConfig(learning_rate=0.05)
    first = None
    for _ in range(100):
        loss, g = softmax_cross_entropy(dense_forward(params, x), y)
        first = loss if first is None else first
        _, gw, gb = dense_backward(params, g, x)
        adam_step(named, {"w": gw, "b": gb}, state, cfg)
    final, _ = softmax_cross_entropy(dense_forward(params, x), y)
    assert final < first


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_synthetic(SynthConfig(n_subjects=60, d_nodes=8, n_salient=2, seed=3))


TINY_MODEL = ModelConfig(channels=(4, 4), num_coeffs=3, dropout_layers=(1,), input_channels=8)
TINY_TRAIN = TrainConfig(batch_size=10, total_steps=30, eval_every=10, seed=5)


def test_train_model_report(tiny_dataset):
    split = make_stratified_folds(tiny_dataset.labels, 5, 0)[0]
    model, rep = train_model(tiny_dataset, split, TINY_MODEL, TINY_TRAIN)
    assert len(rep.val_accuracies) == 3
    assert 0 <= rep.test_accuracy <= 1
    assert rep.final_lr == replay_lr(TINY_TRAIN.learning_rate, rep.lr_events)


def test_train_model_divergence_reported(tiny_dataset):
    split = make_stratified_folds(tiny_dataset.labels, 5, 0)[0]
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="step"):
        train_model(tiny_dataset, split, TINY_MODEL, TrainConfig(learning_rate=1e300, batch_size=10, total_steps=30))


def test_cross_validation_deterministic(tiny_dataset):
    a = run_cross_validation(tiny_dataset, TINY_MODEL, TINY_TRAIN, n_runs=2, n_folds=5)
    b = run_cross_validation(tiny_dataset, TINY_MODEL, TINY_TRAIN, n_runs=2, n_folds=5)
    assert a.summary() == b.summary()
    for r in range(2):
        for f in range(5):
            for name, p in a.models[r][f].parameters().items():
                assert p.tobytes() == b.models[r][f].parameters()[name].tobytes()
    s = a.summary()
    flat = [v for run in s["runs"] for v in run["fold_accuracies"]]
    assert len(flat) == 10
    assert s["grand_mean"] == float(np.mean(flat))
    assert [run["seed"] for run in s["runs"]] == [5, 6]


def test_cross_validation_parallel_matches(tiny_dataset):
    a = run_cross_validation(tiny_dataset, TINY_MODEL, TINY_TRAIN, n_runs=1, n_folds=5)
    b = run_cross_validation(tiny_dataset, TINY_MODEL, TINY_TRAIN, n_runs=1, n_folds=5, workers=2)
    assert a.summary() == b.summary()
    for f in range(5):
        for name, p in a.models[0][f].parameters().items():
            assert p.tobytes() == b.models[0][f].parameters()[name].tobytes()
