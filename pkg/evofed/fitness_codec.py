"""
Lossy wire encodings for fitness matrices.

Payloads are little-endian, columns (partitions) in order, members in index order:

- ``raw32``: N float32 values per column.
- ``topk(k)``: per column k centered float32 values, then their k member indices
  using ceil(ceil(log2 N) / 8) bytes each.
- ``quant(Q)``: per column float32 (min, max), then N codes of Q bits packed into
  ceil(N*Q/8) bytes.
- ``rank(R)``: per column N group indices of ceil(log2 R) bits packed into
  ceil(N*ceil(log2 R)/8) bytes.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from evofed.logger import get_logger
from evofed.pbge import FitnessMatrix
from evofed.utils import ceil_log2, pack_codes, unpack_codes

logger = get_logger("evofed")

SCHEME_CODES = {"raw32": 0, "topk": 1, "quant": 2, "rank": 3}
MAX_BITS = 16


@dataclass(frozen=True)
class CodecScheme:
    kind: str = "raw32"
    param: int = 0

    def __post_init__(self):
        if self.kind not in SCHEME_CODES:
            raise ValueError(f"unknown fitness codec '{self.kind}'")
        if self.kind == "quant" and not 1 <= self.param <= MAX_BITS:
            raise ValueError(f"quantization needs 1 to {MAX_BITS} bits, got {self.param}")
        if self.kind in ("topk", "rank") and self.param < 1:
            raise ValueError(f"{self.kind} needs a positive parameter, got {self.param}")

    @property
    def code(self) -> int:
        return SCHEME_CODES[self.kind]

    def check_population(self, population: int):
        if self.kind == "topk" and self.param > population:
            raise ValueError(f"top-k needs 1 <= k <= N={population}, got k={self.param}")
        if self.kind == "rank" and self.param > population:
            raise ValueError(f"rank needs 1 <= R <= N={population}, got R={self.param}")

    def __str__(self) -> str:
        return self.kind if self.kind == "raw32" else f"{self.kind}({self.param})"


RAW32 = CodecScheme()


@dataclass(frozen=True, eq=False)
class EncodedFitness:
    scheme: CodecScheme
    payload: bytes
    population: int
    num_partitions: int
    weight: int
    round_index: int = 0
    client_id: int = 0

    @property
    def dims(self) -> Tuple[int, int]:
        return self.population, self.num_partitions

    @property
    def byte_size(self) -> int:
        return len(self.payload)


def _index_bytes(population: int) -> int:
    return -(-ceil_log2(population) // 8)


def byte_size(scheme: CodecScheme, population: int, num_partitions: int) -> int:
    """Exact payload size of one encoded N x K fitness matrix."""
    n, k = population, num_partitions
    if scheme.kind == "raw32":
        return 4 * n * k
    if scheme.kind == "quant":
        return math.ceil(n * scheme.param / 8) * k + 8 * k
    if scheme.kind == "topk":
        return k * scheme.param * (4 + _index_bytes(n))
    return k * math.ceil(n * ceil_log2(scheme.param) / 8)


def _envelope(F: FitnessMatrix, scheme: CodecScheme, payload: bytes) -> EncodedFitness:
    return EncodedFitness(scheme, payload, F.population, F.num_partitions, F.weight, F.round_index)


def raw32(F: FitnessMatrix) -> EncodedFitness:
    payload = np.ascontiguousarray(F.values.T, dtype="<f4").tobytes()
    return _envelope(F, RAW32, payload)


def topk_sparsify(F: FitnessMatrix, k: int) -> EncodedFitness:
    """
    Keeps, per column, the k members whose mean-centered fitness is largest in
    magnitude (ties go to the lower index).
    """
    scheme = CodecScheme("topk", k)
    scheme.check_population(F.population)
    idx_bytes = _index_bytes(F.population)
    chunks = []
    for column in F.values.T:
        centered = column - column.mean()
        kept = np.sort(np.argsort(-np.abs(centered), kind="stable")[:k])
        chunks.append(centered[kept].astype("<f4").tobytes())
        chunks.append(kept.astype("<u8").view(np.uint8).reshape(-1, 8)[:, :idx_bytes].tobytes())
    return _envelope(F, scheme, b"".join(chunks))


def affine_quantize(values: np.ndarray, bits: int) -> Tuple[np.float32, np.float32, np.ndarray]:
    """Min-max quantization to 2**bits levels; (min, max) are rounded to float32 first."""
    lo, hi = np.float32(values.min()), np.float32(values.max())
    levels = (1 << bits) - 1
    span = float(hi) - float(lo)
    if span <= 0:
        return lo, hi, np.zeros(values.size, dtype=np.int64)
    scaled = (values - float(lo)) / span * levels
    codes = np.clip(np.floor(scaled + 0.5), 0, levels).astype(np.int64)
    return lo, hi, codes


def affine_dequantize(lo: float, hi: float, codes: np.ndarray, bits: int) -> np.ndarray:
    levels = (1 << bits) - 1
    span = float(hi) - float(lo)
    if span <= 0:
        return np.full(codes.size, float(lo))
    return float(lo) + codes.astype(np.float64) * (span / levels)


def quantize(F: FitnessMatrix, bits: int) -> EncodedFitness:
    scheme = CodecScheme("quant", bits)
    chunks = []
    for column in F.values.T:
        lo, hi, codes = affine_quantize(column, bits)
        chunks.append(np.array([lo, hi], dtype="<f4").tobytes())
        chunks.append(pack_codes(codes, bits))
    return _envelope(F, scheme, b"".join(chunks))


def rank_transform(F: FitnessMatrix, groups: int) -> EncodedFitness:
    """
    Sorts each column ascending (ties by member index) and maps sorted position p
    to group floor(p * R / N), so every group holds N/R neighbouring members.
    """
    scheme = CodecScheme("rank", groups)
    scheme.check_population(F.population)
    n = F.population
    width = ceil_log2(groups)
    chunks = []
    for column in F.values.T:
        order = np.argsort(column, kind="stable")
        group = np.empty(n, dtype=np.int64)
        group[order] = (np.arange(n) * groups) // n
        chunks.append(pack_codes(group, width))
    return _envelope(F, scheme, b"".join(chunks))


def _decode_raw32(enc: EncodedFitness) -> np.ndarray:
    n, k = enc.dims
    return np.frombuffer(enc.payload, dtype="<f4").astype(np.float64).reshape(k, n).T


def _decode_topk(enc: EncodedFitness) -> np.ndarray:
    n, k_parts = enc.dims
    k = enc.scheme.param
    idx_bytes = _index_bytes(n)
    values = np.zeros((n, k_parts))
    offset = 0
    for col in range(k_parts):
        kept = np.frombuffer(enc.payload, dtype="<f4", count=k, offset=offset).astype(np.float64)
        offset += 4 * k
        raw_idx = np.frombuffer(enc.payload, dtype=np.uint8, count=k * idx_bytes, offset=offset)
        offset += k * idx_bytes
        padded = np.zeros((k, 8), dtype=np.uint8)
        padded[:, :idx_bytes] = raw_idx.reshape(k, idx_bytes)
        values[padded.view("<u8").ravel().astype(np.int64), col] = kept
    return values


def _decode_quant(enc: EncodedFitness) -> np.ndarray:
    n, k = enc.dims
    bits = enc.scheme.param
    code_bytes = math.ceil(n * bits / 8)
    values = np.empty((n, k))
    offset = 0
    for col in range(k):
        lo, hi = np.frombuffer(enc.payload, dtype="<f4", count=2, offset=offset)
        offset += 8
        codes = unpack_codes(enc.payload[offset : offset + code_bytes], n, bits)
        offset += code_bytes
        values[:, col] = affine_dequantize(lo, hi, codes, bits)
    return values


def _decode_rank(enc: EncodedFitness) -> np.ndarray:
    n, k = enc.dims
    groups = enc.scheme.param
    width = ceil_log2(groups)
    col_bytes = math.ceil(n * width / 8)
    values = np.empty((n, k))
    for col in range(k):
        codes = unpack_codes(enc.payload[col * col_bytes : (col + 1) * col_bytes], n, width)
        values[:, col] = codes - (groups - 1) / 2.0
    return values


_ENCODERS = {
    "raw32": lambda F, scheme: raw32(F),
    "topk": lambda F, scheme: topk_sparsify(F, scheme.param),
    "quant": lambda F, scheme: quantize(F, scheme.param),
    "rank": lambda F, scheme: rank_transform(F, scheme.param),
}
_DECODERS = {
    "raw32": _decode_raw32,
    "topk": _decode_topk,
    "quant": _decode_quant,
    "rank": _decode_rank,
}


def encode_fitness(F: FitnessMatrix, scheme: CodecScheme) -> EncodedFitness:
    return _ENCODERS[scheme.kind](F, scheme)


def decode_fitness(enc: EncodedFitness) -> FitnessMatrix:
    expected = byte_size(enc.scheme, enc.population, enc.num_partitions)
    if enc.byte_size != expected:
        raise ValueError(f"{enc.scheme} payload has {enc.byte_size} bytes, expected {expected}")
    return FitnessMatrix(enc.round_index, _DECODERS[enc.scheme.kind](enc), enc.weight)


def dequantize(enc: EncodedFitness) -> FitnessMatrix:
    if enc.scheme.kind != "quant":
        raise ValueError(f"cannot dequantize a {enc.scheme} payload")
    return decode_fitness(enc)
