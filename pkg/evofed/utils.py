import hashlib
from typing import Sequence

import numpy as np

from evofed.logger import get_logger

logger = get_logger("evofed")


def ceil_log2(n: int) -> int:
    """Number of bits needed to address ``n`` distinct values (0 for n <= 1)."""
    if n <= 1:
        return 0
    return int(n - 1).bit_length()


def pack_codes(codes: np.ndarray, width: int) -> bytes:
    """
    Packs non-negative integer codes of ``width`` bits each into a little-endian
    bitstream. The result is exactly ``ceil(len(codes) * width / 8)`` bytes long.
    """
    codes = np.asarray(codes, dtype=np.uint64).ravel()
    if width == 0 or codes.size == 0:
        return b""
    if np.any(codes >> np.uint64(width)):
        raise ValueError(f"code does not fit into {width} bits")
    shifts = np.arange(width, dtype=np.uint64)
    bits = ((codes[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_codes(payload: bytes, count: int, width: int) -> np.ndarray:
    if width == 0 or count == 0:
        return np.zeros(count, dtype=np.int64)
    expected = -(-count * width // 8)
    if len(payload) != expected:
        raise ValueError(f"expected {expected} payload bytes for {count} codes, got {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8)
    bits = np.unpackbits(raw, count=count * width, bitorder="little")
    weights = np.left_shift(np.int64(1), np.arange(width, dtype=np.int64))
    return bits.reshape(count, width).astype(np.int64) @ weights


def fingerprint(values: np.ndarray) -> str:
    """Content hash of a parameter vector, used to detect desynchronized nodes."""
    data = np.ascontiguousarray(values, dtype=np.float64)
    return hashlib.blake2b(data.tobytes(), digest_size=16).hexdigest()


def weighted_sum(vectors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """
    Computes ``sum_j (w_j / W) * x_j`` in the given order. The normalized form keeps
    single-input and equal-weight pairs exact, and the fixed order keeps the result
    independent of how the inputs were produced.
    """
    if len(vectors) == 0:
        raise ValueError("cannot average an empty list")
    if len(vectors) != len(weights):
        raise ValueError("weights length mismatch")
    total = float(sum(weights))
    if total <= 0:
        raise ValueError("weights must sum to a positive number")
    acc = np.zeros_like(np.asarray(vectors[0], dtype=np.float64))
    for vector, weight in zip(vectors, weights):
        acc = acc + (float(weight) / total) * np.asarray(vector, dtype=np.float64)
    return acc


def synchronized(lock_name: str):
    def wrap(f):
        def with_lock(self, *args, **kw):
            lock = getattr(self, lock_name)
            with lock:
                return f(self, *args, **kw)

        return with_lock

    return wrap
