import numpy as np
import pytest

import oracles
from evofed.datasets import Dataset
from evofed.nn_core import (
    ArchSpec,
    Batch,
    DenseLayer,
    DimensionMismatchError,
    ModelParams,
    OptimizerCfg,
    batch_schedule,
    evaluate,
    init_model,
    local_train,
    loss_and_grad,
    sgd_step,
)


def random_batch(rng, n, d, classes):
    return Batch(rng.uniform(0, 1, size=(n, d)), rng.integers(0, classes, size=n))


def test_mlp_layout():
    arch = ArchSpec.mlp(2, [16], 4)
    assert arch.num_params == 116
    assert [layer.activation for layer in arch.layers] == ["relu", "identity"]
    assert arch.layer_bounds() == [(0, 48), (48, 116)]


def test_arch_rejects_unchained_layers():
    with pytest.raises(ValueError):
        ArchSpec((DenseLayer(2, 3), DenseLayer(4, 2)))
    with pytest.raises(ValueError):
        ArchSpec((DenseLayer(2, 3, "sigmoid"),))


def test_model_params_validation():
    arch = ArchSpec.mlp(2, [], 3)
    with pytest.raises(DimensionMismatchError):
        ModelParams(arch, np.zeros(arch.num_params + 1))
    bad = np.zeros(arch.num_params)
    bad[0] = np.nan
    with pytest.raises(ValueError):
        ModelParams(arch, bad)


def test_init_is_deterministic():
    arch = ArchSpec.mlp(3, [5, 4], 2)
    a, b = init_model(arch, 11), init_model(arch, 11)
    assert a.fingerprint() == b.fingerprint()
    assert init_model(arch, 12).fingerprint() != a.fingerprint()
    for _, bias in a.unpack():
        assert np.all(bias == 0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for trial in range(20):
        d, hidden, classes = (int(rng.integers(lo, hi)) for lo, hi in ((2, 5), (3, 6), (2, 5)))
        activation = "tanh" if trial % 2 else "identity"
        arch = ArchSpec.mlp(d, [hidden], classes, activation)
        model = init_model(arch, trial)
        model = model.with_values(model.values + 0.1 * rng.standard_normal(arch.num_params))
        batch = random_batch(rng, 7, d, classes)
        _, grad = loss_and_grad(model, batch)
        numeric = oracles.finite_difference_grad(model, batch)
        np.testing.assert_allclose(grad, numeric, atol=1e-6, rtol=0)


def test_zero_model_has_uniform_loss():
    arch = ArchSpec.mlp(3, [], 5)
    batch = random_batch(np.random.default_rng(1), 10, 3, 5)
    loss, _ = loss_and_grad(ModelParams(arch, np.zeros(arch.num_params)), batch)
    assert loss == pytest.approx(np.log(5), abs=1e-12)


def test_wrong_feature_count():
    model = init_model(ArchSpec.mlp(3, [], 2), 0)
    with pytest.raises(DimensionMismatchError):
        loss_and_grad(model, random_batch(np.random.default_rng(2), 4, 2, 2))


def test_sgd_step_without_momentum():
    model = init_model(ArchSpec.mlp(2, [4], 3), 3)
    batch = random_batch(np.random.default_rng(3), 8, 2, 3)
    cfg = OptimizerCfg(learning_rate=0.5, momentum=0.0)
    stepped, velocity = sgd_step(model, np.zeros(model.arch.num_params), batch, cfg)
    _, grad = loss_and_grad(model, batch)
    np.testing.assert_array_equal(velocity, -0.5 * grad)
    np.testing.assert_array_equal(stepped.values, model.values - 0.5 * grad)


def test_local_train_with_zero_learning_rate_is_identity():
    rng = np.random.default_rng(4)
    shard = Dataset(rng.uniform(0, 1, size=(50, 2)), rng.integers(0, 3, size=50), 3)
    model = init_model(ArchSpec.mlp(2, [4], 3), 0)
    trained = local_train(model, shard, OptimizerCfg(learning_rate=0.0), seed=1)
    np.testing.assert_array_equal(trained.values, model.values)


def test_local_train_is_deterministic_and_learns():
    rng = np.random.default_rng(5)
    inputs = rng.uniform(0, 1, size=(200, 2))
    labels = (inputs[:, 0] > inputs[:, 1]).astype(np.int64)
    shard = Dataset(inputs, labels, 2)
    model = init_model(ArchSpec.mlp(2, [8], 2), 0)
    cfg = OptimizerCfg(learning_rate=0.1, local_steps=200, batch_size=32)
    a = local_train(model, shard, cfg, seed=9)
    b = local_train(model, shard, cfg, seed=9)
    assert a.fingerprint() == b.fingerprint()
    assert evaluate(a, shard)[1] < evaluate(model, shard)[1]


def test_batch_schedule_covers_shard_before_reshuffling():
    cfg = OptimizerCfg(local_steps=4, batch_size=5)
    batches = list(batch_schedule(10, cfg, seed=0))
    assert len(batches) == 4
    assert sorted(np.concatenate(batches[:2])) == list(range(10))
    assert sorted(np.concatenate(batches[2:])) == list(range(10))


def test_samples_consumed_is_capped():
    cfg = OptimizerCfg(local_steps=10, batch_size=256)
    assert cfg.samples_consumed(100) == 100
    assert cfg.samples_consumed(5000) == 2560


def test_empty_inputs_are_rejected():
    model = init_model(ArchSpec.mlp(2, [], 2), 0)
    empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), 2)
    with pytest.raises(ValueError):
        local_train(model, empty, OptimizerCfg(), seed=0)
    with pytest.raises(ValueError):
        evaluate(model, empty)


def test_local_train_replays_sgd_steps():
    rng = np.random.default_rng(6)
    shard = Dataset(rng.uniform(0, 1, size=(40, 2)), rng.integers(0, 3, size=40), 3)
    model = init_model(ArchSpec.mlp(2, [5], 3), 2)
    cfg = OptimizerCfg(learning_rate=0.2, momentum=0.9, local_steps=7, batch_size=16)
    expected, velocity = model, np.zeros(model.arch.num_params)
    for indices in batch_schedule(len(shard), cfg, seed=3):
        expected, velocity = sgd_step(expected, velocity, Batch.of(shard, indices), cfg)
    trained = local_train(model, shard, cfg, seed=3)
    np.testing.assert_array_equal(trained.values, expected.values)


def test_single_full_batch_step_is_gradient_descent():
    rng = np.random.default_rng(7)
    shard = Dataset(rng.uniform(0, 1, size=(24, 3)), rng.integers(0, 2, size=24), 2)
    model = init_model(ArchSpec.mlp(3, [4], 2), 5)
    cfg = OptimizerCfg(learning_rate=0.3, momentum=0.0, local_steps=1, batch_size=64)
    _, grad = loss_and_grad(model, Batch.of(shard))
    trained = local_train(model, shard, cfg, seed=0)
    np.testing.assert_allclose(trained.values, model.values - 0.3 * grad, rtol=1e-12, atol=1e-14)


def test_duplicated_rows_leave_loss_and_gradient_unchanged():
    rng = np.random.default_rng(8)
    model = init_model(ArchSpec.mlp(2, [6], 3), 1)
    batch = random_batch(rng, 9, 2, 3)
    doubled = Batch(np.concatenate([batch.inputs] * 2), np.concatenate([batch.labels] * 2))
    loss, grad = loss_and_grad(model, batch)
    loss2, grad2 = loss_and_grad(model, doubled)
    assert loss2 == pytest.approx(loss, rel=1e-12)
    np.testing.assert_allclose(grad2, grad, rtol=1e-12, atol=1e-15)


def test_evaluate_constant_and_perfect_predictions():
    arch = ArchSpec.mlp(2, [], 4)
    labels = np.repeat(np.arange(4), 5)
    testset = Dataset(np.random.default_rng(9).uniform(0, 1, size=(20, 2)), labels, 4)
    accuracy, loss = evaluate(ModelParams(arch, np.zeros(arch.num_params)), testset)
    assert accuracy == pytest.approx(0.25)
    assert loss == pytest.approx(np.log(4), abs=1e-12)

    values = np.zeros(arch.num_params)
    values[-4:] = [0.0, 0.0, 5.0, 0.0]
    single = Dataset(np.array([[0.3, 0.7]]), np.array([2]), 4)
    assert evaluate(ModelParams(arch, values), single)[0] == 1.0
