"""
Comparison methods run on the same clients, seeds and local training as EvoFed:
FedAvg, FedAvg with top-k sparsified updates, FedAvg with quantized updates, and
plain evolution strategies whose fitness is the negated task loss.
"""

import dataclasses
import math
from typing import Callable, List, Sequence

import numpy as np

from evofed.config import ExperimentConfig
from evofed.detrng import PerturbationSet, iter_pairs
from evofed.federation import (
    ClientState,
    EvoFedEngine,
    RoundEngine,
    RoundProtocol,
    RoundRecord,
    aggregate,
    apply_broadcast,
    local_seed,
    make_protocol,
    prepare,
)
from evofed.fitness_codec import (
    CodecScheme,
    EncodedFitness,
    affine_dequantize,
    affine_quantize,
    encode_fitness,
)
from evofed.logger import get_logger
from evofed.nn_core import Batch, ModelParams, batch_schedule, local_train, loss_and_grad
from evofed.pbge import FitnessMatrix
from evofed.utils import weighted_sum

logger = get_logger("evofed")

Objective = Callable[[ModelParams], float]


def sparse_keep_count(num_params: int, compression_rate: float) -> int:
    # 1 - 0.988 is not exact in binary; round before taking the ceiling
    return max(1, math.ceil(round((1.0 - compression_rate) * num_params, 9)))


def baseline_uplink_bytes(
    method: str, model: ModelParams, compression_rate: float = 0.988, bits: int = 8
) -> int:
    """Bytes one client uploads per round under the FedAvg-family baselines."""
    num_params = model.arch.num_params
    if method == "fedavg":
        return 4 * num_params
    if method == "fed-sparse":
        return 8 * sparse_keep_count(num_params, compression_rate)
    if method == "fed-quant":
        return math.ceil(num_params * bits / 8) + 8 * len(model.arch.layers)
    raise ValueError(f"'{method}' is not a FedAvg-family baseline")


def _train_all(
    clients: Sequence[ClientState], server_model: ModelParams, t: int, base_seed: int, lr=None
):
    """Every client starts from the server model; returns their theta' in client order."""
    ordered = sorted(clients, key=lambda c: c.id)
    trained = []
    for c in ordered:
        c.model = server_model
        seed = local_seed(base_seed, t)
        trained.append(local_train(server_model, c.shard, c.optimizer, seed, lr))
    return ordered, trained


def _adopt(clients: Sequence[ClientState], model: ModelParams, t: int) -> ModelParams:
    for c in clients:
        c.model = model
        c.synced_round = t + 1
    return model


def _weights(clients: Sequence[ClientState]) -> List[int]:
    return [c.optimizer.samples_consumed(len(c.shard)) for c in clients]


def fedavg_round(
    clients: Sequence[ClientState],
    server_model: ModelParams,
    t: int = 0,
    base_seed: int = 0,
    learning_rate=None,
) -> ModelParams:
    """Sample-weighted mean of the locally trained models, adopted by every client."""
    ordered, trained = _train_all(clients, server_model, t, base_seed, learning_rate)
    mean = weighted_sum([m.values for m in trained], _weights(ordered))
    return _adopt(ordered, server_model.with_values(mean), t)


def topk_update(update: np.ndarray, keep: int) -> np.ndarray:
    """Zeroes all but the ``keep`` largest-magnitude components (ties go to the lower index)."""
    kept = np.argsort(-np.abs(update), kind="stable")[:keep]
    sparse = np.zeros_like(update)
    sparse[kept] = update[kept]
    return sparse


def sparse_fedavg_round(
    clients: Sequence[ClientState],
    server_model: ModelParams,
    compression_rate: float,
    t: int = 0,
    base_seed: int = 0,
    learning_rate=None,
) -> ModelParams:
    """Clients upload only the top ceil((1-rho)|theta|) components of theta' - theta."""
    if not 0.0 < compression_rate < 1.0:
        raise ValueError(f"compression rate must lie in (0, 1), got {compression_rate}")
    keep = sparse_keep_count(server_model.arch.num_params, compression_rate)
    ordered, trained = _train_all(clients, server_model, t, base_seed, learning_rate)
    updates = [topk_update(m.values - server_model.values, keep) for m in trained]
    mean = weighted_sum(updates, _weights(ordered))
    return _adopt(ordered, server_model.with_values(server_model.values + mean), t)


def quantize_update(update: np.ndarray, model: ModelParams, bits: int) -> np.ndarray:
    """Per-layer min-max quantization of ``update`` and its reconstruction."""
    restored = np.empty_like(update)
    for start, stop in model.arch.layer_bounds():
        lo, hi, codes = affine_quantize(update[start:stop], bits)
        restored[start:stop] = affine_dequantize(lo, hi, codes, bits)
    return restored


def quant_fedavg_round(
    clients: Sequence[ClientState],
    server_model: ModelParams,
    bits: int,
    t: int = 0,
    base_seed: int = 0,
    learning_rate=None,
) -> ModelParams:
    if not 1 <= bits <= 16:
        raise ValueError(f"quantization needs 1 to 16 bits, got {bits}")
    ordered, trained = _train_all(clients, server_model, t, base_seed, learning_rate)
    updates = [quantize_update(m.values - server_model.values, server_model, bits) for m in trained]
    mean = weighted_sum(updates, _weights(ordered))
    return _adopt(ordered, server_model.with_values(server_model.values + mean), t)


def es_fitness(
    theta: ModelParams,
    pset: PerturbationSet,
    objective: Objective,
    round_index: int = 0,
    weight: int = 1,
) -> FitnessMatrix:
    """
    objective(theta + sigma*eps_i) for every member, centered to zero mean. The
    result has a single column.
    """
    values = np.empty((pset.population, 1))
    for m, eps in iter_pairs(pset):
        step = pset.sigma * eps
        values[2 * m, 0] = objective(theta.with_values(theta.values + step))
        values[2 * m + 1, 0] = objective(theta.with_values(theta.values - step))
    return FitnessMatrix(round_index, values - values.mean(axis=0), weight)


def es_client_message(
    client: ClientState, t: int, protocol: RoundProtocol, scheme: CodecScheme
) -> EncodedFitness:
    """Plain-ES fitness of one client: negated loss on one seeded minibatch of its shard."""
    if protocol.layout.num_partitions != 1:
        raise ValueError("plain ES fitness has a single column and needs one partition")
    seed = local_seed(protocol.schedule.base_seed, t)
    indices = next(batch_schedule(len(client.shard), client.optimizer, seed))
    batch = Batch.of(client.shard, indices)

    def objective(model: ModelParams) -> float:
        return -loss_and_grad(model, batch)[0]

    fitness = es_fitness(client.model, protocol.perturbations(t), objective, t, len(indices))
    return dataclasses.replace(encode_fitness(fitness, scheme), client_id=client.id)


def plain_es_round(
    clients: Sequence[ClientState],
    server_model: ModelParams,
    t: int,
    protocol: RoundProtocol,
    scheme: CodecScheme,
) -> ModelParams:
    """One round of plain ES through the EvoFed aggregation and broadcast."""
    ordered = sorted(clients, key=lambda c: c.id)
    messages = []
    for c in ordered:
        c.model = server_model
        messages.append(es_client_message(c, t, protocol, scheme))
    fitness = aggregate(messages).for_broadcast()
    return _adopt(ordered, apply_broadcast(server_model, fitness, t, protocol), t)


class FedAvgEngine(RoundEngine):
    """FedAvg and its compressed variants; participants always receive the full model."""

    def __init__(
        self,
        *args,
        method: str = "fedavg",
        compression_rate: float = 0.988,
        bits: int = 8,
        **kwargs,
    ):
        super().__init__(*args, **kwargs)
        self.method = method
        self.compression_rate = compression_rate
        self.bits = bits
        self.uplink_per_client = baseline_uplink_bytes(
            method, self.server_model, compression_rate, bits
        )

    def step(self, t: int, participants: List[ClientState]):
        lr = self.learning_rate(participants[0], t)
        base = self.schedule.base_seed
        if self.method == "fedavg":
            self.server_model = fedavg_round(participants, self.server_model, t, base, lr)
        elif self.method == "fed-sparse":
            self.server_model = sparse_fedavg_round(
                participants, self.server_model, self.compression_rate, t, base, lr
            )
        else:
            self.server_model = quant_fedavg_round(
                participants, self.server_model, self.bits, t, base, lr
            )
        uplink = {c.id: self.uplink_per_client for c in sorted(participants, key=lambda c: c.id)}
        return uplink, len(participants) * 4 * self.server_model.arch.num_params

    def finish(self) -> int:
        stale = [c for c in self.clients if c.synced_round < self.rounds]
        for c in stale:
            c.model = self.server_model
            c.synced_round = self.rounds
        return len(stale) * 4 * self.server_model.arch.num_params


class PlainESEngine(EvoFedEngine):
    """EvoFed's pipeline with task-loss fitness in place of local BP."""

    def client_message(self, client: ClientState, t: int, expected: str) -> EncodedFitness:
        return es_client_message(client, t, self.protocol, self.scheme)


def run_baseline_rounds(cfg: ExperimentConfig) -> List[RoundRecord]:
    setup = prepare(cfg)
    args = setup.engine_arguments(cfg)
    if cfg.method == "plain-es":
        engine = PlainESEngine(
            **args,
            protocol=make_protocol(cfg, setup.server_model.arch.num_params),
            scheme=cfg.codec,
            history_depth=cfg.history_depth,
        )
    elif cfg.method in ("fedavg", "fed-sparse", "fed-quant"):
        engine = FedAvgEngine(
            **args,
            method=cfg.method,
            compression_rate=cfg.compression_rate,
            bits=cfg.baseline_bits,
        )
    else:
        raise ValueError(f"'{cfg.method}' is not a baseline")
    logger.info(f"Running the {cfg.method} baseline for {cfg.rounds} rounds")
    return engine.run()
