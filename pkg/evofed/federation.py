"""
The EvoFed round engine.

Every round t each participating client trains locally from the shared model
theta_t, encodes theta' as fitness against the round-t population and uploads
it. The server averages the decoded fitness matrices weighted by samples seen,
broadcasts the result, and every node (server included) decodes it against the
regenerated population to obtain theta_{t+1}. Clients that sat a round out
replay the missed global fitness from a bounded history, or receive the full
model when the history no longer reaches back far enough.
"""

import dataclasses
import struct
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from evofed.config import ExperimentConfig
from evofed.datasets import Dataset, load_idx, noniid_split, synth_blobs, train_test_split
from evofed.detrng import DEFAULT_BLOCK_SIZE, PerturbationSet, SeedSchedule
from evofed.fitness_codec import (
    SCHEME_CODES,
    CodecScheme,
    EncodedFitness,
    decode_fitness,
    encode_fitness,
)
from evofed.logger import get_logger
from evofed.nn_core import (
    ArchSpec,
    DimensionMismatchError,
    ModelParams,
    OptimizerCfg,
    evaluate,
    init_model,
    local_train,
)
from evofed.pbge import PartitionLayout, decode, decode_with_momentum, encode, make_layout
from evofed.utils import synchronized, weighted_sum

logger = get_logger("evofed")

HEADER = struct.Struct("<IIBHHI")


class SynchronizationError(RuntimeError):
    pass


class HistoryGapError(LookupError):
    def __init__(self, round_index: int):
        super().__init__(f"global fitness of round {round_index} is not in the history")
        self.round_index = round_index


def step_decay(value: float, factor: float, every: int, t: int) -> float:
    """``value * factor ** (t // every)``; constant when ``every`` is 0."""
    if every <= 0 or factor == 1.0:
        return value
    return value * factor ** (t // every)


def local_seed(base_seed: int, t: int) -> int:
    """
    Minibatch seed of round ``t``, shared by every client and every method. Clients on
    identical shards therefore train identically.
    """
    seq = np.random.SeedSequence([base_seed, t, 0x10CA1])
    return int(seq.generate_state(1, np.uint64)[0])


def select_participants(
    schedule: SeedSchedule, t: int, num_clients: int, participation: float
) -> List[int]:
    """Seeded choice of max(1, round(p*M)) distinct clients, in increasing id order."""
    if not 0.0 < participation <= 1.0:
        raise ValueError(f"participation must lie in (0, 1], got {participation}")
    count = max(1, int(round(participation * num_clients)))
    if count >= num_clients:
        return list(range(num_clients))
    chosen = schedule.stream(0x5E1EC7, t).choice(num_clients, size=count, replace=False)
    return sorted(int(c) for c in chosen)


@dataclass(frozen=True)
class PopulationParams:
    population: int = 128
    sigma: float = 0.27
    block_size: int = DEFAULT_BLOCK_SIZE
    streaming: bool = False


@dataclass(frozen=True)
class RoundProtocol:
    """Everything a node needs, besides its model, to encode or decode any round."""

    schedule: SeedSchedule
    params: PopulationParams
    layout: PartitionLayout
    alpha: float
    momentum: float = 0.0
    decay_factor: float = 1.0
    decay_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    def alpha_at(self, t: int) -> float:
        return step_decay(self.alpha, self.decay_factor, self.decay_every, t)

    def perturbations(self, t: int) -> PerturbationSet:
        p = self.params
        return PerturbationSet(
            self.schedule.derive(t),
            p.population,
            self.layout.total,
            p.sigma,
            block_size=p.block_size,
            streaming=p.streaming,
        )

    @property
    def fitness_bytes(self) -> int:
        """Size of one broadcast global fitness matrix at float32 precision."""
        return 4 * self.params.population * self.layout.num_partitions


@dataclass
class MomentumBuffer:
    """Per-node velocity of the decoded update; stays ``None`` while momentum is off."""

    velocity: Optional[np.ndarray] = None

    def copy(self) -> "MomentumBuffer":
        return MomentumBuffer(None if self.velocity is None else self.velocity.copy())


@dataclass
class ClientState:
    id: int
    model: ModelParams
    shard: Dataset
    optimizer: OptimizerCfg
    # the model is theta_{synced_round}
    synced_round: int = 0
    momentum: MomentumBuffer = field(default_factory=MomentumBuffer)


@dataclass(frozen=True, eq=False)
class GlobalFitness:
    round_index: int
    values: np.ndarray
    total_weight: int

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionMismatchError(
                f"global fitness must be an N x K matrix, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError(f"global fitness of round {self.round_index} is not finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def for_broadcast(self) -> "GlobalFitness":
        """The values as every node receives them, rounded to float32."""
        return GlobalFitness(self.round_index, self.values.astype(np.float32), self.total_weight)


class FitnessHistory:
    """The global fitness of the last ``depth`` rounds, in contiguous round order."""

    def __init__(self, depth: int):
        if depth < 0:
            raise ValueError(f"history depth must be non-negative, got {depth}")
        self.depth = depth
        self._entries: Deque[GlobalFitness] = deque(maxlen=depth or None)

    def __len__(self) -> int:
        return len(self._entries) if self.depth else 0

    def push(self, fitness: GlobalFitness):
        if self.depth == 0:
            return
        if self._entries and fitness.round_index != self._entries[-1].round_index + 1:
            raise ValueError(
                f"history holds rounds up to {self._entries[-1].round_index}, cannot append round {fitness.round_index}"
            )
        self._entries.append(fitness)

    def first_missing(self, t_from: int, t_to: int) -> Optional[int]:
        """The first round of [t_from, t_to) not held, or None when all are."""
        if t_from >= t_to:
            return None
        if not len(self):
            return t_from
        oldest, newest = self._entries[0].round_index, self._entries[-1].round_index
        if t_from < oldest:
            return t_from
        if t_to - 1 > newest:
            return max(t_from, newest + 1)
        return None

    def get(self, t: int) -> GlobalFitness:
        if not len(self):
            raise HistoryGapError(t)
        offset = t - self._entries[0].round_index
        if not 0 <= offset < len(self._entries):
            raise HistoryGapError(t)
        return self._entries[offset]


@dataclass(frozen=True)
class RoundRecord:
    t: int
    uplink_bytes: Dict[int, int]
    downlink_bytes: int
    accuracy: Optional[float]
    loss: Optional[float]
    wall_ms: float

    @property
    def uplink_total(self) -> int:
        return sum(self.uplink_bytes.values())


def pack_message(enc: EncodedFitness) -> bytes:
    header = HEADER.pack(
        enc.round_index,
        enc.client_id,
        enc.scheme.code,
        enc.population,
        enc.num_partitions,
        enc.weight,
    )
    return header + enc.payload


def unpack_message(data: bytes, scheme: CodecScheme) -> EncodedFitness:
    if len(data) < HEADER.size:
        raise ValueError(
            f"message of {len(data)} bytes is shorter than its {HEADER.size} byte header"
        )
    round_index, client_id, code, population, partitions, weight = HEADER.unpack_from(data)
    if code != SCHEME_CODES[scheme.kind]:
        raise ValueError(f"message uses codec {code}, expected {scheme}")
    payload = data[HEADER.size :]
    return EncodedFitness(scheme, payload, population, partitions, weight, round_index, client_id)


def client_round(
    client: ClientState,
    t: int,
    protocol: RoundProtocol,
    scheme: CodecScheme,
    expected_fingerprint: Optional[str] = None,
    learning_rate: Optional[float] = None,
) -> EncodedFitness:
    """
    Local BP from the synchronized model followed by fitness encoding. The client's
    model is not advanced here; that happens when the broadcast is applied.
    """
    if client.synced_round != t:
        raise SynchronizationError(
            f"client {client.id} holds the model of round {client.synced_round}, not {t}"
        )
    if expected_fingerprint is not None and client.model.fingerprint() != expected_fingerprint:
        logger.error(f"Client {client.id} diverged from the server model before round {t}")
        raise SynchronizationError(
            f"client {client.id} model does not match the server model in round {t}"
        )
    seed = local_seed(protocol.schedule.base_seed, t)
    theta_prime = local_train(client.model, client.shard, client.optimizer, seed, learning_rate)
    weight = client.optimizer.samples_consumed(len(client.shard))
    pset = protocol.perturbations(t)
    fitness = encode(client.model, theta_prime, pset, protocol.layout, weight, t)
    return dataclasses.replace(encode_fitness(fitness, scheme), client_id=client.id)


def aggregate(messages: Sequence[EncodedFitness]) -> GlobalFitness:
    """Sample-weighted mean of the decoded fitness matrices, summed in client-id order."""
    if not messages:
        raise ValueError("cannot aggregate an empty list of messages")
    ordered = sorted(messages, key=lambda m: m.client_id)
    first = ordered[0]
    for msg in ordered[1:]:
        if msg.dims != first.dims:
            raise DimensionMismatchError(
                f"client {msg.client_id} sent {msg.dims} fitness, expected {first.dims}"
            )
        if msg.round_index != first.round_index:
            raise SynchronizationError(
                f"client {msg.client_id} sent fitness for round {msg.round_index}, expected {first.round_index}"
            )
    decoded = [decode_fitness(msg) for msg in ordered]
    weights = [f.weight for f in decoded]
    values = weighted_sum([f.values for f in decoded], weights)
    return GlobalFitness(first.round_index, values, int(sum(weights)))


def apply_broadcast(
    model: ModelParams,
    fitness: GlobalFitness,
    t: int,
    protocol: RoundProtocol,
    buffer: Optional[MomentumBuffer] = None,
) -> ModelParams:
    """theta_{t+1} from theta_t and the round-t global fitness; ``buffer`` is updated in place."""
    if fitness.round_index != t:
        raise SynchronizationError(
            f"received global fitness of round {fitness.round_index} while in round {t}"
        )
    pset, alpha = protocol.perturbations(t), protocol.alpha_at(t)
    if not protocol.momentum:
        return decode(model, fitness, pset, protocol.layout, alpha)
    if buffer is None:
        raise ValueError("decoded-update momentum needs a momentum buffer")
    model, buffer.velocity = decode_with_momentum(
        model, fitness, pset, protocol.layout, alpha, buffer.velocity, protocol.momentum
    )
    return model


def catch_up(
    stale: ModelParams,
    t_from: int,
    t_to: int,
    history: FitnessHistory,
    protocol: RoundProtocol,
    buffer: Optional[MomentumBuffer] = None,
) -> ModelParams:
    """
    Replays the global fitness of rounds t_from .. t_to-1 onto a model of round t_from,
    so ``history`` must hold every round in [t_from, t_to). The result is the model of
    round t_to; t_from == t_to returns ``stale`` unchanged.
    """
    missing = history.first_missing(t_from, t_to)
    if missing is not None:
        raise HistoryGapError(missing)
    model = stale
    for t in range(t_from, t_to):
        model = apply_broadcast(model, history.get(t), t, protocol, buffer)
    return model


def fedavg_equivalence_check(
    theta: ModelParams, messages: Sequence[EncodedFitness], t: int, protocol: RoundProtocol
) -> Optional[float]:
    """
    Largest absolute difference between decoding the aggregated fitness and
    averaging the per-client decoded models. Only meaningful for uncompressed
    fitness; returns None for any other codec.
    """
    if any(msg.scheme.kind != "raw32" for msg in messages):
        logger.info("Skipping the FedAvg equivalence check for compressed fitness")
        return None
    through_aggregate = apply_broadcast(theta, aggregate(messages), t, protocol)
    ordered = sorted(messages, key=lambda m: m.client_id)
    per_client = []
    for msg in ordered:
        f = decode_fitness(msg)
        broadcast = GlobalFitness(t, f.values, f.weight)
        per_client.append(apply_broadcast(theta, broadcast, t, protocol).values)
    averaged = weighted_sum(per_client, [msg.weight for msg in ordered])
    return float(np.max(np.abs(through_aggregate.values - averaged)))


class RoundEngine:
    """
    The round loop shared by every method: participant selection, evaluation and
    bookkeeping. Subclasses implement ``step`` for one round and may implement
    ``finish`` to settle state after the last round.
    """

    def __init__(
        self,
        clients: List[ClientState],
        server_model: ModelParams,
        testset: Dataset,
        trainset: Dataset,
        schedule: SeedSchedule,
        rounds: int,
        eval_interval: int = 10,
        participation: float = 1.0,
        workers: int = 1,
        lr_decay_factor: float = 1.0,
        lr_decay_every: int = 0,
    ):
        if not clients:
            raise ValueError("need at least one client")
        if rounds < 1 or eval_interval < 1 or workers < 1:
            raise ValueError("rounds, evaluation interval and workers must be at least 1")
        self.clients = clients
        self.server_model = server_model
        self.testset = testset
        self.trainset = trainset
        self.schedule = schedule
        self.rounds = rounds
        self.eval_interval = eval_interval
        self.participation = participation
        self.workers = workers
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every = lr_decay_every
        self.mtx = threading.RLock()
        self._inbox: List[bytes] = []

    @synchronized("mtx")
    def _post(self, message: bytes):
        self._inbox.append(message)

    @synchronized("mtx")
    def _drain(self) -> List[bytes]:
        messages, self._inbox = self._inbox, []
        return messages

    def learning_rate(self, client: ClientState, t: int) -> float:
        return step_decay(
            client.optimizer.learning_rate, self.lr_decay_factor, self.lr_decay_every, t
        )

    def parallel(self, fn, items):
        """Maps ``fn`` over ``items`` on the worker pool; results keep the input order."""
        if self.workers == 1 or len(items) == 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def step(self, t: int, participants: List[ClientState]):
        """Runs round ``t``; returns (uplink bytes per client id, downlink bytes)."""
        raise NotImplementedError

    def finish(self) -> int:
        """Settles client state after the last round; returns extra downlink bytes."""
        return 0

    def run(self) -> List[RoundRecord]:
        records: List[RoundRecord] = []
        for t in range(self.rounds):
            started = time.perf_counter()
            ids = select_participants(self.schedule, t, len(self.clients), self.participation)
            uplink, downlink = self.step(t, [self.clients[j] for j in ids])
            accuracy = loss = None
            if (t + 1) % self.eval_interval == 0 or t == self.rounds - 1:
                accuracy, _ = evaluate(self.server_model, self.testset)
                _, loss = evaluate(self.server_model, self.trainset)
                logger.info(
                    f"Round {t + 1}/{self.rounds}: test accuracy {accuracy:.4f}, train loss {loss:.4f}"
                )
            wall_ms = (time.perf_counter() - started) * 1000.0
            records.append(RoundRecord(t, uplink, downlink, accuracy, loss, wall_ms))
        extra = self.finish()
        if extra:
            last = records[-1]
            records[-1] = dataclasses.replace(last, downlink_bytes=last.downlink_bytes + extra)
        return records


class EvoFedEngine(RoundEngine):
    def __init__(
        self,
        *args,
        protocol: RoundProtocol,
        scheme: CodecScheme,
        history_depth: int = 10,
        **kwargs,
    ):
        super().__init__(*args, **kwargs)
        self.protocol = protocol
        self.scheme = scheme
        self.history = FitnessHistory(history_depth)
        self.server_momentum = MomentumBuffer()
        scheme.check_population(protocol.params.population)

    def client_message(self, client: ClientState, t: int, expected: str) -> EncodedFitness:
        lr = self.learning_rate(client, t)
        return client_round(client, t, self.protocol, self.scheme, expected, lr)

    def resync(self, client: ClientState, t: int) -> int:
        """Brings a stale client to round ``t``; returns the downlink bytes this cost."""
        gap = t - client.synced_round
        if gap <= 0:
            return 0
        if self.history.first_missing(client.synced_round, t) is None:
            client.model = catch_up(
                client.model, client.synced_round, t, self.history, self.protocol, client.momentum
            )
            cost = gap * self.protocol.fitness_bytes
            logger.info(f"Client {client.id} caught up {gap} rounds from the fitness history")
        else:
            client.model = self.server_model
            client.momentum = self.server_momentum.copy()
            cost = 4 * self.server_model.arch.num_params
            if self.protocol.momentum:
                cost *= 2
            logger.info(
                f"Client {client.id} missed {gap} rounds, more than the history holds; sent the full model"
            )
        client.synced_round = t
        return cost

    def step(self, t: int, participants: List[ClientState]):
        downlink = sum(self.resync(c, t) for c in participants)
        expected = self.server_model.fingerprint()

        def work(client: ClientState):
            self._post(pack_message(self.client_message(client, t, expected)))

        self.parallel(work, participants)
        messages = [unpack_message(data, self.scheme) for data in self._drain()]
        ordered = sorted(messages, key=lambda m: m.client_id)
        uplink = {msg.client_id: msg.byte_size for msg in ordered}

        fitness = aggregate(messages).for_broadcast()
        self.history.push(fitness)
        self.server_model = apply_broadcast(
            self.server_model, fitness, t, self.protocol, self.server_momentum
        )

        def receive(client: ClientState):
            client.model = apply_broadcast(client.model, fitness, t, self.protocol, client.momentum)
            client.synced_round = t + 1

        self.parallel(receive, participants)
        downlink += len(participants) * self.protocol.fitness_bytes
        return uplink, downlink

    def finish(self) -> int:
        cost = sum(self.resync(c, self.rounds) for c in self.clients)
        expected = self.server_model.fingerprint()
        for c in self.clients:
            if c.model.fingerprint() != expected:
                logger.error(
                    f"Client {c.id} does not hold the server model after round {self.rounds}"
                )
                raise SynchronizationError(f"client {c.id} desynchronized from the server")
        return cost


@dataclass
class FederationSetup:
    clients: List[ClientState]
    server_model: ModelParams
    trainset: Dataset
    testset: Dataset
    schedule: SeedSchedule

    def engine_arguments(self, cfg: ExperimentConfig) -> Dict:
        return dict(
            clients=self.clients,
            server_model=self.server_model,
            testset=self.testset,
            trainset=self.trainset,
            schedule=self.schedule,
            rounds=cfg.rounds,
            eval_interval=cfg.eval_interval,
            participation=cfg.participation,
            workers=cfg.workers,
            lr_decay_factor=cfg.lr_decay_factor,
            lr_decay_every=cfg.lr_decay_every,
        )


def load_data(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """(train, test) datasets as configured."""
    ds = cfg.dataset
    if ds.kind == "blobs":
        full = synth_blobs(cfg.data_seed, ds.samples, ds.features, ds.classes, ds.spread)
        return train_test_split(full, ds.test_fraction, cfg.data_seed)
    train = load_idx(ds.train_images, ds.train_labels, ds.center)
    test = load_idx(ds.test_images, ds.test_labels, ds.center, train.num_classes)
    if ds.subset is not None and ds.subset < len(train):
        train = train.subset(np.arange(ds.subset))
    return train, test


def prepare(cfg: ExperimentConfig) -> FederationSetup:
    """Data, shards and M clients holding the same initial model."""
    trainset, testset = load_data(cfg)
    plan = noniid_split(trainset, cfg.num_clients, cfg.classes_per_client, cfg.data_seed)
    arch = ArchSpec.mlp(trainset.num_features, cfg.hidden, trainset.num_classes, cfg.activation)
    model = init_model(arch, cfg.model_seed)
    logger.info(
        f"Model has {arch.num_params} parameters, {cfg.num_clients} clients hold {len(trainset)} samples"
    )
    clients = [
        ClientState(j, model, shard, cfg.optimizer) for j, shard in enumerate(plan.shards(trainset))
    ]
    for c in clients:
        if len(c.shard) == 0:
            raise ValueError(f"client {c.id} received an empty shard")
    return FederationSetup(clients, model, trainset, testset, SeedSchedule(cfg.protocol_seed))


def make_protocol(cfg: ExperimentConfig, num_params: int) -> RoundProtocol:
    return RoundProtocol(
        SeedSchedule(cfg.protocol_seed),
        PopulationParams(cfg.population, cfg.sigma, streaming=cfg.streaming),
        make_layout(num_params, cfg.partitions),
        cfg.alpha,
        momentum=cfg.es_momentum,
        decay_factor=cfg.alpha_decay_factor,
        decay_every=cfg.alpha_decay_every,
    )


def run_rounds(cfg: ExperimentConfig) -> List[RoundRecord]:
    """Runs T EvoFed rounds as configured and returns one record per round."""
    if cfg.method != "evofed":
        raise ValueError(f"run_rounds runs evofed, not '{cfg.method}'")
    setup = prepare(cfg)
    engine = EvoFedEngine(
        **setup.engine_arguments(cfg),
        protocol=make_protocol(cfg, setup.server_model.arch.num_params),
        scheme=cfg.codec,
        history_depth=cfg.history_depth,
    )
    return engine.run()
