# featcal/tests/test_task_suite_and_trainer.py

import numpy as np
import pytest

from core.errors import TrainingDivergedError
from core.losses import top1
from core.model_engine import build_model
from core.parameters import ParameterSet, Role
from tasks.task_suite import SuiteConfig, TaskDataset, make_pretrain_set, make_task_suite, split_of, splits
from tasks.trainer import TrainConfig, evaluate, loss_and_gradients, train_experts_concurrently, train_model
from tests.helpers import linear_spec, random_batch, random_model, residual_spec

SMALL_SUITE = SuiteConfig(num_tasks=3, input_dim=4, classes_per_task=3, train_samples=60,
                          calibration_samples=20, test_samples=40, seed=5)


@pytest.fixture(scope="module")
def suite():
    return make_task_suite(SMALL_SUITE)


@pytest.fixture
def spec():
    return residual_spec(input_dim=4, classes=3)


def test_suite_layout_and_determinism(suite):
    assert len(suite) == 3 * 3
    again = make_task_suite(SMALL_SUITE)
    for a, b in zip(suite, again):
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
    train = split_of(suite, 1, "train")
    assert train.features.shape == (4, 60)
    assert train.labels.min() >= 0 and train.labels.max() < 3
    assert [d.task_index for d in splits(suite, "test")] == [0, 1, 2]


def test_calibration_and_test_splits_differ(suite):
    calib = split_of(suite, 0, "calibration")
    test = split_of(suite, 0, "test")
    assert not np.array_equal(calib.features, test.features[:, :20])


def test_tasks_are_shifted_apart(suite):
    means = [split_of(suite, i, "train").features.mean(axis=1) for i in range(3)]
    assert np.linalg.norm(means[0] - means[1]) > 0.1


def test_zero_shift_gives_identical_geometry():
    config = SMALL_SUITE.model_copy(update={"shift_magnitude": 0.0, "train_samples": 4000})
    suite = make_task_suite(config)
    a, b = split_of(suite, 0, "train"), split_of(suite, 2, "train")
    np.testing.assert_allclose(a.features.mean(axis=1), b.features.mean(axis=1), atol=0.15)


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        TaskDataset(task_index=0, split="train", num_classes=2, features=np.zeros((3, 2)), labels=[0, 2])


def test_head_takes_leading_columns(suite):
    calib = split_of(suite, 2, "calibration")
    part = calib.head(7)
    np.testing.assert_array_equal(part.features, calib.features[:, :7])
    np.testing.assert_array_equal(part.labels, calib.labels[:7])
    assert calib.head(100).num_samples == 20


def test_backprop_matches_finite_differences(spec):
    params = random_model(spec, seed=9)
    X = random_batch(4, 7, seed=1)
    y = np.array([0, 1, 2, 2, 1, 0, 1])
    _, grads = loss_and_gradients(params, spec, X, y)
    rng = np.random.default_rng(0)
    h = 1e-6
    for key in params.keys():
        shape = params[key].shape
        for _ in range(3):
            idx = tuple(rng.integers(0, n) for n in shape)
            plus, minus = np.array(params[key]), np.array(params[key])
            plus[idx] += h
            minus[idx] -= h
            f_plus, _ = loss_and_gradients(params.replace({key: plus}), spec, X, y)
            f_minus, _ = loss_and_gradients(params.replace({key: minus}), spec, X, y)
            numeric = (f_plus - f_minus) / (2 * h)
            assert grads[key][idx] == pytest.approx(numeric, rel=1e-5, abs=1e-8), key


def test_training_lowers_the_loss(suite, spec):
    start = build_model(spec, 0)
    data = split_of(suite, 0, "train")
    before = evaluate(start, spec, data)
    trained = train_model(start, spec, data, TrainConfig(epochs=60, lr=0.2, momentum=0.9))
    after = evaluate(trained, spec, data)
    assert after.mean_loss < before.mean_loss
    assert after.accuracy > 0.6


def test_minibatch_training_is_seeded(suite, spec):
    start = build_model(spec, 0)
    data = split_of(suite, 1, "train")
    config = TrainConfig(epochs=3, lr=0.1, batch_size=16, seed=4)
    assert train_model(start, spec, data, config).same_values(train_model(start, spec, data, config))


def test_divergence_is_reported(suite, spec):
    with pytest.raises(TrainingDivergedError):
        train_model(build_model(spec, 0), spec, split_of(suite, 0, "train"), TrainConfig(epochs=3, lr=float("inf")))


@pytest.mark.asyncio
async def test_concurrent_experts_match_sequential_training(suite, spec):
    base = build_model(spec, 1)
    config = TrainConfig(epochs=5, lr=0.1, seed=20)
    train_sets = splits(suite, "train")
    experts = await train_experts_concurrently(base, spec, train_sets, config)
    assert [e.role for e in experts] == [Role.expert(i) for i in range(3)]
    for i, expert in enumerate(experts):
        sequential = train_model(base, spec, train_sets[i], config.model_copy(update={"seed": 20 + i}), Role.expert(i))
        assert expert.same_values(sequential)
    assert isinstance(experts[0], ParameterSet)


def test_pretrain_set_uses_the_unrotated_prototypes():
    config = SMALL_SUITE.model_copy(update={"pretrain_samples": 4000})
    pretrain = make_pretrain_set(config)
    assert pretrain.task_index == -1 and pretrain.split == "train"
    assert pretrain.num_samples == 4000
    np.testing.assert_array_equal(pretrain.features, make_pretrain_set(config).features)
    unrotated = make_task_suite(config.model_copy(update={"shift_magnitude": 0.0, "train_samples": 4000}))
    np.testing.assert_allclose(pretrain.features.mean(axis=1), split_of(unrotated, 0, "train").features.mean(axis=1),
                               atol=0.15)


def _head_only(bias, classes=4):
    spec = linear_spec([2, 3], classes=classes)
    params = build_model(spec, 0)
    params = params.replace({"head.linear.weight": np.zeros((classes, 3)), "head.linear.bias": np.asarray(bias, float)})
    return spec, params


def _dataset(labels, classes=4):
    labels = np.asarray(labels)
    return TaskDataset(task_index=0, split="test", num_classes=classes,
                       features=random_batch(2, labels.size, seed=0), labels=labels)


def test_uniform_scores_cost_log_k():
    spec, params = _head_only(np.zeros(4))
    result = evaluate(params, spec, _dataset([0, 1, 2, 3, 1]))
    assert result.mean_loss == pytest.approx(np.log(4.0), abs=1e-15)


def test_ties_go_to_the_lowest_index():
    spec, params = _head_only(np.zeros(4))
    assert evaluate(params, spec, _dataset([0] * 6)).accuracy == 1.0
    assert list(top1(np.array([[1.0, 3.0], [3.0, 3.0], [3.0, 0.0]]))) == [1, 0]


def test_constant_score_head_is_exact_on_its_argmax_class():
    spec, params = _head_only([0.1, 0.9, 0.3, 0.2])
    assert evaluate(params, spec, _dataset([1] * 9)).accuracy == 1.0
    assert evaluate(params, spec, _dataset([0, 2, 3])).accuracy == 0.0


def test_random_model_on_permuted_labels_is_at_chance():
    spec = residual_spec(input_dim=4, classes=4)
    params = random_model(spec, seed=11)
    labels = np.random.default_rng(4).permutation(np.arange(4000) % 4)
    data = TaskDataset(task_index=0, split="test", num_classes=4, features=random_batch(4, 4000, seed=3), labels=labels)
    # balanced labels independent of the inputs: expected accuracy is exactly 1/K
    assert evaluate(params, spec, data).accuracy == pytest.approx(0.25, abs=0.03)


def test_zero_learning_rate_leaves_parameters_unchanged(suite, spec):
    start = build_model(spec, 0)
    trained = train_model(start, spec, split_of(suite, 0, "train"), TrainConfig(epochs=5, lr=0.0, momentum=0.9))
    assert trained.same_values(start)
