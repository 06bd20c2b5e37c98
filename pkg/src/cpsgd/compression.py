"""Stochastic compression operators with bounded relative error.

Each compressor C satisfies E||C(x)/r - x||^2 <= (1-phi)||x||^2 for its
declared (r, phi), and produces a wire message with documented bit
accounting:

    top_k:    k * (32 + ceil(log2 d))          per message
    b_bits:   32 + d * b  (norm + sign/level)  per message, 32 if x = 0
    identity: 32 * d

The accounting treats values as 32-bit floats on the wire. Payloads keep
float64 so decode reproduces the in-memory reconstruction bit-exactly; the
`bits` field always reports the accounting formula above.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "CompressionError",
    "BadK",
    "ContractViolation",
    "CompressedMessage",
    "TopKCompressor",
    "BBitsCompressor",
    "IdentityCompressor",
    "make_compressor",
    "compress_top_k",
    "compress_b_bits",
    "compress_identity",
    "decode_top_k",
    "decode_b_bits",
    "decode_identity",
    "measure_contraction",
    "estimate_contraction",
]


class CompressionError(ValueError):
    pass


class BadK(CompressionError):
    """Top-k sparsifier asked for k outside [1, d]."""


class ContractViolation(RuntimeError):
    """Measured compression error exceeds the declared (r, phi) bound."""


@dataclass(frozen=True)
class CompressedMessage:
    """One agent's broadcast: packed payload, its decoded vector, wire bits."""

    payload: bytes
    reconstructed: np.ndarray
    bits: int


class _BitWriter:
    def __init__(self) -> None:
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0

    def write(self, value: int, nbits: int) -> None:
        if nbits == 0:
            return
        self._acc = (self._acc << nbits) | (value & ((1 << nbits) - 1))
        self._nbits += nbits
        while self._nbits >= 8:
            self._nbits -= 8
            self._bytes.append((self._acc >> self._nbits) & 0xFF)
        self._acc &= (1 << self._nbits) - 1

    def write_f64(self, value: float) -> None:
        (as_int,) = struct.unpack(">Q", struct.pack(">d", value))
        self.write(as_int, 64)

    def getvalue(self) -> bytes:
        out = bytearray(self._bytes)
        if self._nbits:
            out.append((self._acc << (8 - self._nbits)) & 0xFF)
        return bytes(out)


class _BitReader:
    def __init__(self, payload: bytes) -> None:
        self._payload = payload
        self._pos = 0

    def read(self, nbits: int) -> int:
        if nbits == 0:
            return 0
        out = 0
        for _ in range(nbits):
            byte = self._payload[self._pos >> 3]
            out = (out << 1) | ((byte >> (7 - (self._pos & 7))) & 1)
            self._pos += 1
        return out

    def read_f64(self) -> float:
        (val,) = struct.unpack(">d", struct.pack(">Q", self.read(64)))
        return val


def _index_bits(d: int) -> int:
    return max(0, math.ceil(math.log2(d))) if d > 1 else 0


def _as_vector(x: Sequence[float]) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise CompressionError(f"expected a 1-d vector, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# top-k sparsifier


def _top_k_indices(x: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -|x|: ties resolved toward the lowest index
    order = np.argsort(-np.abs(x), kind="stable")
    return np.sort(order[:k])


def _top_k_values(vec: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    d = vec.size
    if not 1 <= k <= d:
        raise BadK(f"k={k} outside [1, {d}]")
    idx = _top_k_indices(vec, k)
    recon = np.zeros(d)
    recon[idx] = vec[idx]
    return idx, recon


def compress_top_k(x: Sequence[float], k: int) -> CompressedMessage:
    """Keep the k largest-magnitude coordinates, zero the rest."""
    vec = _as_vector(x)
    d = vec.size
    idx, recon = _top_k_values(vec, k)
    writer = _BitWriter()
    ib = _index_bits(d)
    for i in idx:
        writer.write(int(i), ib)
        writer.write_f64(float(vec[i]))
    return CompressedMessage(
        payload=writer.getvalue(),
        reconstructed=recon,
        bits=k * (32 + ib),
    )


def decode_top_k(payload: bytes, d: int, k: int) -> np.ndarray:
    reader = _BitReader(payload)
    ib = _index_bits(d)
    out = np.zeros(d)
    for _ in range(k):
        i = reader.read(ib)
        out[i] = reader.read_f64()
    return out


# ---------------------------------------------------------------------------
# dithered b-bits quantizer


def _b_bits_xi(d: int, b: int) -> float:
    scale = 2.0 ** (b - 1)
    return 1.0 + min(d / scale**2, math.sqrt(d) / scale)


def _b_bits_reconstruct(
    norm: float, negative: np.ndarray, levels: np.ndarray, d: int, b: int
) -> np.ndarray:
    signs = np.where(negative, -1.0, 1.0)
    return (norm / _b_bits_xi(d, b)) * signs * (levels * 2.0 ** (-(b - 1)))


def _b_bits_quantize(
    vec: np.ndarray, b: int, rng: np.random.Generator
) -> tuple[float, np.ndarray, np.ndarray]:
    if b < 1:
        raise CompressionError(f"b={b} must be >= 1")
    if b > 16:
        raise CompressionError(f"b={b} rejected (overflow guard, max 16)")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return 0.0, np.zeros(vec.size, dtype=bool), np.zeros(vec.size, dtype=np.int64)
    u = rng.random(vec.size)
    levels = np.floor(2.0 ** (b - 1) * np.abs(vec) / norm + u).astype(np.int64)
    return norm, vec < 0, levels


def compress_b_bits(
    x: Sequence[float], b: int, rng: np.random.Generator
) -> CompressedMessage:
    """Norm-scaled sign/level quantizer with uniform random dithering.

    Levels are floor(2^(b-1) |x_i| / ||x|| + u_i) with u ~ Uniform[0,1]^d,
    so each coordinate needs its sign plus a level in [0, 2^(b-1)]. The
    zero vector maps to the zero message (norm scalar only).
    """
    vec = _as_vector(x)
    d = vec.size
    norm, negative, levels = _b_bits_quantize(vec, b, rng)
    writer = _BitWriter()
    writer.write_f64(norm)
    if norm == 0.0:
        return CompressedMessage(
            payload=writer.getvalue(), reconstructed=np.zeros(d), bits=32
        )
    for neg, lvl in zip(negative, levels):
        writer.write(1 if neg else 0, 1)
        writer.write(int(lvl), b)  # level can reach 2^(b-1), needs b bits
    recon = _b_bits_reconstruct(norm, negative, levels, d, b)
    return CompressedMessage(
        payload=writer.getvalue(), reconstructed=recon, bits=32 + d * b
    )


def decode_b_bits(payload: bytes, d: int, b: int) -> np.ndarray:
    reader = _BitReader(payload)
    norm = reader.read_f64()
    if norm == 0.0:
        return np.zeros(d)
    negative = np.zeros(d, dtype=bool)
    levels = np.zeros(d, dtype=np.int64)
    for i in range(d):
        negative[i] = bool(reader.read(1))
        levels[i] = reader.read(b)
    return _b_bits_reconstruct(norm, negative, levels, d, b)


# ---------------------------------------------------------------------------
# identity (no compression)


def compress_identity(x: Sequence[float]) -> CompressedMessage:
    vec = _as_vector(x)
    writer = _BitWriter()
    for val in vec:
        writer.write_f64(float(val))
    return CompressedMessage(
        payload=writer.getvalue(), reconstructed=vec.copy(), bits=32 * vec.size
    )


def decode_identity(payload: bytes, d: int) -> np.ndarray:
    reader = _BitReader(payload)
    return np.array([reader.read_f64() for _ in range(d)])


# ---------------------------------------------------------------------------
# compressor objects (uniform interface for the round updates)


@dataclass(frozen=True)
class TopKCompressor:
    k: int
    kind: str = "top_k"
    r: float = 1.0
    stochastic: bool = False

    def __post_init__(self) -> None:
        if self.k < 1:
            raise BadK(f"k={self.k} must be >= 1")

    def phi(self, d: int) -> float:
        if self.k > d:
            raise BadK(f"k={self.k} exceeds dimension {d}")
        return self.k / d

    def compress(self, x, rng=None) -> CompressedMessage:
        return compress_top_k(x, self.k)

    def reconstruction(self, x, rng=None) -> np.ndarray:
        return _top_k_values(np.asarray(x, dtype=float), self.k)[1]

    def decode(self, payload: bytes, d: int) -> np.ndarray:
        return decode_top_k(payload, d, self.k)

    def estimate(self, target, reference, rng=None):
        diff = np.asarray(target) - np.asarray(reference)
        xhat = np.asarray(reference) + self.reconstruction(diff)
        return xhat, self.message_bits(diff.size)

    def message_bits(self, d: int) -> int:
        return self.k * (32 + _index_bits(d))

    def describe(self) -> dict:
        return {"kind": self.kind, "k": self.k, "r": self.r}


@dataclass(frozen=True)
class BBitsCompressor:
    b: int
    kind: str = "b_bits"
    r: float = 1.0
    stochastic: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.b <= 16:
            raise CompressionError(f"b={self.b} outside [1, 16]")

    def phi(self, d: int) -> float:
        """Empirical contraction constant for this (b, d), cached per pair."""
        key = (self.b, d)
        if key not in _BBITS_PHI_CACHE:
            est = measure_contraction(
                self.reconstruction,
                d=d,
                trials=2000,
                rng=np.random.default_rng(np.random.SeedSequence([1009, self.b, d])),
            )
            _BBITS_PHI_CACHE[key] = max(1.0 - est, 1e-6)
        return _BBITS_PHI_CACHE[key]

    def compress(self, x, rng: np.random.Generator) -> CompressedMessage:
        return compress_b_bits(x, self.b, rng)

    def reconstruction(self, x, rng: np.random.Generator) -> np.ndarray:
        vec = np.asarray(x, dtype=float)
        norm, negative, levels = _b_bits_quantize(vec, self.b, rng)
        if norm == 0.0:
            return np.zeros(vec.size)
        return _b_bits_reconstruct(norm, negative, levels, vec.size, self.b)

    def decode(self, payload: bytes, d: int) -> np.ndarray:
        return decode_b_bits(payload, d, self.b)

    def estimate(self, target, reference, rng: np.random.Generator):
        diff = np.asarray(target) - np.asarray(reference)
        bits = 32 if not diff.any() else self.message_bits(diff.size)
        xhat = np.asarray(reference) + self.reconstruction(diff, rng)
        return xhat, bits

    def message_bits(self, d: int) -> int:
        return 32 + d * self.b

    def describe(self) -> dict:
        return {"kind": self.kind, "b": self.b, "r": self.r}


@dataclass(frozen=True)
class IdentityCompressor:
    kind: str = "identity"
    r: float = 1.0
    stochastic: bool = False

    def phi(self, d: int) -> float:
        return 1.0

    def compress(self, x, rng=None) -> CompressedMessage:
        return compress_identity(x)

    def reconstruction(self, x, rng=None) -> np.ndarray:
        return np.asarray(x, dtype=float).copy()

    def decode(self, payload: bytes, d: int) -> np.ndarray:
        return decode_identity(payload, d)

    def estimate(self, target, reference, rng=None):
        # exact no-compression limit: returns the target itself so the
        # reference + C(target - reference) round trip adds no float error
        t = np.asarray(target, dtype=float)
        return t.copy(), 32 * t.size

    def message_bits(self, d: int) -> int:
        return 32 * d

    def describe(self) -> dict:
        return {"kind": self.kind, "r": self.r}


_BBITS_PHI_CACHE: dict[tuple[int, int], float] = {}

Compressor = TopKCompressor | BBitsCompressor | IdentityCompressor


def make_compressor(spec: dict | str) -> Compressor:
    """Build a compressor from {"kind": ..., "k"/"b": ...} or a kind string."""
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind")
    if kind == "top_k":
        return TopKCompressor(k=int(spec["k"]))
    if kind == "b_bits":
        return BBitsCompressor(b=int(spec["b"]))
    if kind == "identity":
        return IdentityCompressor()
    raise CompressionError(f"unknown compressor kind {kind!r}")


# ---------------------------------------------------------------------------
# contract verification


def _unit_vectors(d: int, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    # include the equal-magnitude vector: analytic worst case for top-k
    vecs = [np.full(d, 1.0 / math.sqrt(d))]
    while len(vecs) < count:
        v = rng.standard_normal(d)
        norm = np.linalg.norm(v)
        if norm > 0:
            vecs.append(v / norm)
    return vecs


def measure_contraction(
    compress_fn,
    d: int,
    trials: int,
    rng: np.random.Generator,
    num_vectors: int = 20,
    r: float = 1.0,
) -> float:
    """Max over unit vectors of the Monte Carlo mean of ||C(x)/r - x||^2."""
    worst = 0.0
    for vec in _unit_vectors(d, num_vectors, rng):
        total = 0.0
        for _ in range(trials):
            err = compress_fn(vec, rng) / r - vec
            total += float(err @ err)
        worst = max(worst, total / trials)
    return worst


def estimate_contraction(
    compressor: Compressor,
    d: int,
    trials: int,
    rng: np.random.Generator,
    num_vectors: int = 20,
) -> float:
    """Measure the relative compression error and check the declared bound.

    Raises ContractViolation when the estimate exceeds 1 - phi plus the
    statistical slack 3/sqrt(trials): that signals a miscoded compressor.
    """
    if trials < 100:
        raise CompressionError(f"trials={trials} < 100 is too noisy")
    eff_trials = trials if compressor.stochastic else 1
    estimate = measure_contraction(
        compressor.reconstruction,
        d=d,
        trials=eff_trials,
        rng=rng,
        num_vectors=num_vectors,
        r=compressor.r,
    )
    bound = 1.0 - compressor.phi(d) + 3.0 / math.sqrt(trials)
    if estimate > bound:
        raise ContractViolation(
            f"{compressor.describe()} measured {estimate:.6f} > bound {bound:.6f}"
        )
    return estimate
