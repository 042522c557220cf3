import numpy as np
import pytest

from evofed import baselines, federation
from evofed.baselines import (
    FedAvgEngine,
    PlainESEngine,
    baseline_uplink_bytes,
    es_client_message,
    es_fitness,
    fedavg_round,
    plain_es_round,
    quant_fedavg_round,
    quantize_update,
    sparse_fedavg_round,
    sparse_keep_count,
    topk_update,
)
from evofed.detrng import PerturbationSet, SeedSchedule
from evofed.federation import ClientState, client_round, local_seed
from evofed.fitness_codec import RAW32, CodecScheme
from evofed.nn_core import local_train
from evofed.pbge import decode, make_layout
from tests import flat_model, make_clients, protocol_for


def trained(client, model, t=0, base_seed=0):
    return local_train(model, client.shard, client.optimizer, local_seed(base_seed, t))


def test_fedavg_single_client_adopts_its_model():
    clients, model, _, _ = make_clients(num_clients=1, classes_per_client=4)
    expected = trained(clients[0], model, t=3, base_seed=42)
    result = fedavg_round(clients, model, t=3, base_seed=42)
    np.testing.assert_array_equal(result.values, expected.values)
    assert clients[0].model is result and clients[0].synced_round == 4


def test_fedavg_opposite_models_cancel(mocker):
    clients, model, _, _ = make_clients(num_clients=2)
    v = np.random.default_rng(0).standard_normal(model.arch.num_params)
    models = iter([model.with_values(v), model.with_values(-v)])
    mocker.patch("evofed.baselines.local_train", side_effect=lambda *args, **kwargs: next(models))
    weights = [c.optimizer.samples_consumed(len(c.shard)) for c in clients]
    assert weights[0] == weights[1]
    np.testing.assert_array_equal(fedavg_round(clients, model).values, 0.0)


def test_fedavg_identical_shards():
    clients, model, _, _ = make_clients(num_clients=1, classes_per_client=4)
    twins = [ClientState(j, model, clients[0].shard, clients[0].optimizer) for j in range(2)]
    alone = fedavg_round(clients, model)
    np.testing.assert_array_equal(fedavg_round(twins, model).values, alone.values)


def test_local_training_seeds_agree(mocker):
    clients, model, _, _ = make_clients()
    protocol = protocol_for(model.arch.num_params)
    fed_spy = mocker.spy(federation, "local_train")
    base_spy = mocker.spy(baselines, "local_train")
    for c in clients:
        client_round(c, 0, protocol, RAW32)
    fedavg_round(clients, model, t=0, base_seed=protocol.schedule.base_seed)
    fed_seeds = [call.args[3] for call in fed_spy.call_args_list]
    base_seeds = [call.args[3] for call in base_spy.call_args_list]
    assert fed_seeds == base_seeds


def test_topk_update():
    sparse = topk_update(np.array([1.0, -3.0, 3.0, 0.0]), 2)
    np.testing.assert_array_equal(sparse, [0.0, -3.0, 3.0, 0.0])


def test_sparse_keep_count_and_bytes():
    assert sparse_keep_count(11_000, 0.988) == 132
    assert sparse_keep_count(60, 0.999) == 1
    model = flat_model(np.zeros(11_000))
    assert baseline_uplink_bytes("fed-sparse", model, 0.988) == 1056
    assert baseline_uplink_bytes("fedavg", model) == 44_000
    assert baseline_uplink_bytes("fed-quant", model, bits=8) == 11_008
    with pytest.raises(ValueError):
        baseline_uplink_bytes("evofed", model)


def test_sparse_keeping_everything_is_fedavg():
    clients, model, _, _ = make_clients()
    sparse = sparse_fedavg_round(clients, model, 1e-12)
    dense = fedavg_round(clients, model)
    np.testing.assert_allclose(sparse.values, dense.values, rtol=0, atol=1e-12)


def test_sparse_single_component_update(mocker):
    clients, model, _, _ = make_clients(num_clients=1, classes_per_client=4)
    values = model.values.copy()
    values[17] += 0.5
    mocker.patch("evofed.baselines.local_train", return_value=model.with_values(values))
    result = sparse_fedavg_round(clients, model, 0.95)
    np.testing.assert_allclose(result.values, values, rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        sparse_fedavg_round(clients, model, 1.0)


def test_quant16_is_within_quantizer_bound():
    clients, model, _, _ = make_clients(num_clients=1, classes_per_client=4)
    update = trained(clients[0], model).values - model.values
    result = quant_fedavg_round(clients, model, 16).values - model.values
    for start, stop in model.arch.layer_bounds():
        layer = update[start:stop]
        bound = (layer.max() - layer.min()) / (2 * (2**16 - 1)) + 1e-7 * np.abs(layer).max()
        assert np.all(np.abs(result[start:stop] - layer) <= bound)


def test_constant_update_quantizes_exactly():
    _, model, _, _ = make_clients()
    for bits in (1, 3, 8):
        update = np.full(model.arch.num_params, 0.25)
        np.testing.assert_array_equal(quantize_update(update, model, bits), 0.25)
    assert baseline_uplink_bytes("fed-quant", model, bits=8) == 60 + 16
    with pytest.raises(ValueError):
        quant_fedavg_round([], model, 17)


def test_es_on_a_quadratic_descends():
    schedule = SeedSchedule(3)
    d, alpha = 10, 0.05
    layout = make_layout(d, 1)
    theta = flat_model(np.random.default_rng(0).standard_normal(d))

    def objective(model):
        return -float(np.sum(model.values**2))

    losses = [-objective(theta)]
    for t in range(200):
        pset = PerturbationSet(schedule.derive(t), 64, d, 0.1)
        theta = decode(theta, es_fitness(theta, pset, objective, t), pset, layout, alpha)
        losses.append(-objective(theta))
    decreasing = sum(b < a for a, b in zip(losses, losses[1:]))
    assert decreasing >= 180
    assert losses[-1] < 1e-3 * losses[0]


def test_es_on_a_flat_objective_does_not_move():
    theta = flat_model(np.random.default_rng(1).standard_normal(6))
    pset = PerturbationSet(5, 8, 6, 1e-6)
    fitness = es_fitness(theta, pset, lambda model: 3.0)
    np.testing.assert_array_equal(fitness.values, 0.0)
    moved = decode(theta, fitness, pset, make_layout(6, 1), 0.5)
    np.testing.assert_array_equal(moved.values, theta.values)


@pytest.mark.parametrize("scheme", [RAW32, CodecScheme("quant", 8)])
def test_es_uplink_matches_evofed(scheme):
    clients, model, _, _ = make_clients()
    protocol = protocol_for(model.arch.num_params, population=32)
    es = es_client_message(clients[0], 0, protocol, scheme)
    evofed = client_round(clients[0], 0, protocol, scheme)
    assert es.byte_size == evofed.byte_size
    assert es.dims == (32, 1) and es.client_id == 0


def test_es_needs_a_single_partition():
    clients, model, _, _ = make_clients()
    with pytest.raises(ValueError):
        es_client_message(clients[0], 0, protocol_for(model.arch.num_params, partitions=2), RAW32)


def test_plain_es_round_is_adopted():
    clients, model, _, _ = make_clients()
    protocol = protocol_for(model.arch.num_params)
    result = plain_es_round(clients, model, 0, protocol, RAW32)
    assert result.fingerprint() != model.fingerprint()
    assert all(c.model is result and c.synced_round == 1 for c in clients)


def test_plain_es_engine_matches_evofed_accounting():
    clients, model, train, test = make_clients(num_clients=5)
    protocol = protocol_for(model.arch.num_params, population=32)
    engine = PlainESEngine(
        clients,
        model,
        test,
        train,
        protocol.schedule,
        4,
        participation=0.6,
        protocol=protocol,
        scheme=RAW32,
    )
    records = engine.run()
    assert sum(r.uplink_total for r in records) == 4 * 3 * 128
    assert all(c.model.fingerprint() == engine.server_model.fingerprint() for c in clients)


@pytest.mark.parametrize("method", ["fedavg", "fed-sparse", "fed-quant"])
def test_fedavg_engine_accounting(method):
    clients, model, train, test = make_clients(num_clients=5)
    engine = FedAvgEngine(
        clients,
        model,
        test,
        train,
        SeedSchedule(42),
        4,
        eval_interval=2,
        participation=0.6,
        method=method,
        compression_rate=0.9,
        bits=4,
    )
    records = engine.run()
    per_client = baseline_uplink_bytes(method, model, 0.9, 4)
    full = 4 * model.arch.num_params
    for record in records:
        assert set(record.uplink_bytes.values()) == {per_client}
        assert len(record.uplink_bytes) == 3
    assert [r.downlink_bytes for r in records[:-1]] == [3 * full] * 3
    last = federation.select_participants(SeedSchedule(42), 3, 5, 0.6)
    stale = sum(1 for j in range(5) if j not in last)
    assert records[-1].downlink_bytes == 3 * full + stale * full
    assert all(c.model is engine.server_model for c in clients)
