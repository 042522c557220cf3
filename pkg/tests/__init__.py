from typing import List, Tuple

import numpy as np

from evofed.datasets import noniid_split, synth_blobs, train_test_split
from evofed.detrng import SeedSchedule
from evofed.federation import ClientState, PopulationParams, RoundProtocol
from evofed.nn_core import ArchSpec, DenseLayer, ModelParams, OptimizerCfg, init_model
from evofed.pbge import make_layout


def flat_model(values) -> ModelParams:
    """A model whose parameter vector is ``values``, whatever its length (>= 2)."""
    values = np.asarray(values, dtype=np.float64)
    return ModelParams(ArchSpec((DenseLayer(values.size - 1, 1, "identity"),)), values)


def protocol_for(
    num_params: int, population=16, sigma=0.27, partitions=1, alpha=0.4, seed=42, **kwargs
) -> RoundProtocol:
    return RoundProtocol(
        SeedSchedule(seed),
        PopulationParams(population, sigma),
        make_layout(num_params, partitions),
        alpha,
        **kwargs,
    )


def make_clients(
    num_clients=4, samples=400, hidden=(8,), classes_per_client=2, optimizer=None, seed=7
) -> Tuple[List[ClientState], ModelParams, object, object]:
    """Blob-shard clients sharing one initial model; returns (clients, model, train, test)."""
    optimizer = optimizer or OptimizerCfg(learning_rate=0.1, local_steps=3, batch_size=32)
    train, test = train_test_split(synth_blobs(seed, samples, 2, 4, 0.05), 0.2, seed)
    plan = noniid_split(train, num_clients, classes_per_client, seed)
    model = init_model(ArchSpec.mlp(2, hidden, 4), 1)
    shards = plan.shards(train)
    clients = [ClientState(j, model, shard, optimizer) for j, shard in enumerate(shards)]
    return clients, model, train, test
