"""Pairwise-mask secure aggregation of class statistics and pooled recovery.

Arithmetic is fixed-point over Z_M with M = 2**modulus_bits (<= 64), so numpy
uint64 wraparound is already correct modulo M.  Mask streams are the raw 64-bit
outputs of PCG64 seeded with the shared (or personal) seed, truncated to the
low ``modulus_bits`` bits.

Key agreement is simulated by a trusted dealer (``deal_seeds``).  As in the
classical pseudocode, the server also collects every personal mask b_k, which
means it could unmask any single upload; the protocol assumes honest parties.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .client_stats import ClassStats

MAGIC = b"OFGL-SA1"
GS_MAGIC = b"OFGL-GS1"
HEADER = struct.Struct("<8sII")


class SecureAggError(RuntimeError):
    pass


@dataclass(frozen=True)
class FixedPointCodec:
    scale_bits: int = 16
    modulus_bits: int = 62
    num_clients: int = 1

    def __post_init__(self):
        if not 1 <= self.modulus_bits <= 64:
            raise ValueError("modulus_bits must lie in [1, 64]")
        if self.scale_bits >= self.modulus_bits - 1:
            raise ValueError("scale_bits leaves no integer headroom")

    @property
    def scale(self) -> int:
        return 1 << self.scale_bits

    @property
    def modulus(self) -> int:
        return 1 << self.modulus_bits

    @property
    def mask(self) -> np.uint64:
        return np.uint64(self.modulus - 1)

    @property
    def bound(self) -> float:
        """Largest |x| whose encoding keeps any num_clients-sum below M/2."""
        return (self.modulus // (2 * max(self.num_clients, 1)) - 1) / self.scale

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise SecureAggError("cannot encode non-finite values")
        if x.size and np.max(np.abs(x)) > self.bound:
            raise SecureAggError(
                f"magnitude {np.max(np.abs(x)):.6g} exceeds codec bound {self.bound:.6g}"
            )
        q = np.rint(x * self.scale).astype(np.int64)
        return q.view(np.uint64) & self.mask

    def decode(self, v) -> np.ndarray:
        shift = np.uint64(64 - self.modulus_bits)
        v = np.asarray(v, dtype=np.uint64) & self.mask
        # sign-extend the top residue bit into a two's-complement int64
        signed = (v << shift).view(np.int64) >> np.int64(shift)
        return signed.astype(np.float64) / self.scale


@dataclass(frozen=True)
class MaskSeedMatrix:
    pair_seeds: np.ndarray
    personal_seeds: np.ndarray

    @property
    def num_clients(self) -> int:
        return len(self.personal_seeds)

    def pair(self, k: int, j: int) -> int:
        return int(self.pair_seeds[k, j])


def deal_seeds(num_clients: int, seed: int) -> MaskSeedMatrix:
    """Trusted-dealer stand-in for pairwise key agreement."""
    state = np.random.SeedSequence(seed).generate_state(
        num_clients * num_clients + num_clients, dtype=np.uint64
    )
    raw = state[: num_clients * num_clients].reshape(num_clients, num_clients)
    pairs = np.triu(raw, 1)
    pairs = pairs + pairs.T
    return MaskSeedMatrix(pair_seeds=pairs, personal_seeds=state[num_clients * num_clients:])


def mask_stream(seed: int, length: int, codec: FixedPointCodec) -> np.ndarray:
    bits = np.random.PCG64(int(seed)).random_raw(length)
    return np.asarray(bits, dtype=np.uint64) & codec.mask


# -- statistics vector layout ------------------------------------------------
# per class, in class order: [present, N, N*mu (D), (N-1)*s2 (D), N*mu^2 (D)]


def layout_size(num_classes: int, dim: int) -> int:
    return num_classes * (2 + 3 * dim)


def stats_vector(stats: ClassStats) -> np.ndarray:
    dim, num_classes = stats.dim, stats.num_classes
    out = np.zeros((num_classes, 2 + 3 * dim))
    for c in np.flatnonzero(stats.present):
        n = float(stats.counts[c])
        mu, s2 = stats.means[c], stats.variances[c]
        out[c, 0] = 1.0
        out[c, 1] = n
        out[c, 2 : 2 + dim] = n * mu
        # a singleton's n-1 variance is undefined; its within-sum is 0
        out[c, 2 + dim : 2 + 2 * dim] = (n - 1.0) * s2 if n > 1 else 0.0
        out[c, 2 + 2 * dim :] = n * mu**2
    return out.ravel()


@dataclass(frozen=True)
class MaskedUpload:
    client_id: int
    values: np.ndarray

    def to_bytes(self) -> bytes:
        return HEADER.pack(MAGIC, self.client_id, len(self.values)) + np.asarray(
            self.values, dtype="<u8"
        ).tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "MaskedUpload":
        if len(payload) < HEADER.size:
            raise SecureAggError("upload shorter than header")
        magic, client_id, length = HEADER.unpack_from(payload)
        if magic != MAGIC:
            raise SecureAggError(f"bad magic {magic!r}")
        body = payload[HEADER.size :]
        if len(body) != 8 * length:
            raise SecureAggError("upload length does not match header")
        return cls(client_id=client_id, values=np.frombuffer(body, dtype="<u8").astype(np.uint64))

    @property
    def nbytes(self) -> int:
        return HEADER.size + 8 * len(self.values)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MaskedUpload":
        return cls.from_bytes(Path(path).read_bytes())


def build_masked_upload(u: np.ndarray, k: int, seeds: MaskSeedMatrix,
                        codec: FixedPointCodec) -> tuple[MaskedUpload, np.ndarray]:
    """Return y_k = enc(u) + b_k + sum_j sign(k, j) r_kj (mod M) and b_k."""
    n = len(u)
    personal = mask_stream(seeds.personal_seeds[k], n, codec)
    y = codec.encode(u) + personal
    for j in range(seeds.num_clients):
        if j == k:
            continue
        r = mask_stream(seeds.pair(k, j), n, codec)
        y = y + r if k < j else y - r
    return MaskedUpload(client_id=k, values=y & codec.mask), personal


def aggregate_unmask(uploads, personal_masks, codec: FixedPointCodec, *,
                     strict: bool = True) -> np.ndarray:
    """Decode sum(y_k) - sum(b_k) mod M into the real-valued summed vector.

    ``personal_masks`` is aligned with ``uploads``; a ``None`` entry marks a
    withheld mask, which is an error unless ``strict`` is False.
    """
    if not uploads:
        raise SecureAggError("no uploads to aggregate")
    if len(personal_masks) != len(uploads):
        raise SecureAggError("one personal mask per upload is required")
    ids = [up.client_id for up in uploads]
    if len(set(ids)) != len(ids):
        raise SecureAggError("duplicate client upload")
    length = len(uploads[0].values)
    total = np.zeros(length, dtype=np.uint64)
    for up, b in zip(uploads, personal_masks):
        if len(up.values) != length:
            raise SecureAggError("upload lengths differ")
        total = total + up.values
        if b is None:
            if strict:
                raise SecureAggError(f"personal mask of client {up.client_id} missing")
            continue
        total = total - np.asarray(b, dtype=np.uint64)
    return codec.decode(total & codec.mask)


@dataclass
class GlobalStats:
    counts: np.ndarray
    client_counts: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def proportions(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def to_dict(self) -> dict:
        def rows(a):
            return [None if not p else [float(x) for x in r] for r, p in zip(a, self.present)]

        return {
            "counts": [float(x) for x in self.counts],
            "client_counts": [int(x) for x in self.client_counts],
            "means": rows(self.means),
            "variances": rows(self.variances),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GlobalStats":
        counts = np.array(d["counts"], dtype=np.float64)
        dim = next(len(r) for r in d["means"] if r is not None)

        def rows(key):
            return np.array([r if r is not None else [np.nan] * dim for r in d[key]])

        return cls(counts=counts, client_counts=np.array(d["client_counts"], dtype=np.int64),
                   means=rows("means"), variances=rows("variances"))

    def to_bytes(self) -> bytes:
        """Broadcast payload: header + float64 [N, m, mu, s2] per class."""
        body = np.concatenate(
            [self.counts[:, None], self.client_counts[:, None].astype(np.float64),
             np.nan_to_num(self.means), np.nan_to_num(self.variances)], axis=1
        ).ravel()
        return HEADER.pack(GS_MAGIC, self.num_classes, self.dim) + body.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "GlobalStats":
        magic, num_classes, dim = HEADER.unpack_from(payload)
        if magic != GS_MAGIC:
            raise SecureAggError(f"bad magic {magic!r}")
        body = np.frombuffer(payload[HEADER.size :], dtype="<f8")
        if len(body) != num_classes * (2 + 2 * dim):
            raise SecureAggError("global statistics payload has the wrong length")
        rows = body.reshape(num_classes, 2 + 2 * dim).astype(np.float64)
        counts = rows[:, 0].copy()
        means, variances = rows[:, 2 : 2 + dim].copy(), rows[:, 2 + dim :].copy()
        means[counts <= 0] = np.nan
        variances[counts <= 0] = np.nan
        return cls(counts=counts, client_counts=rows[:, 1].astype(np.int64),
                   means=means, variances=variances)


def pooled_stats(summed: np.ndarray, num_classes: int, dim: int,
                 mode: str = "paper") -> GlobalStats:
    """Recover per-class N, mean and pooled variance from the summed vector.

    ``mode="paper"`` divides by N - m_c (m_c = contributing clients);
    ``mode="centralized"`` divides by N - 1.  A non-positive paper denominator
    falls back to N - 1, and N = 1 yields variance 0.
    """
    if mode not in ("paper", "centralized"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    blocks = np.asarray(summed, dtype=np.float64).reshape(num_classes, 2 + 3 * dim)
    m_c = np.rint(blocks[:, 0]).astype(np.int64)
    counts = np.rint(blocks[:, 1])
    if not np.any(counts > 0):
        raise SecureAggError("no class is present in any client")
    means = np.full((num_classes, dim), np.nan)
    variances = np.full((num_classes, dim), np.nan)
    for c in np.flatnonzero(counts > 0):
        n = counts[c]
        b = blocks[c, 2 : 2 + dim]
        within = blocks[c, 2 + dim : 2 + 2 * dim]
        sq = blocks[c, 2 + 2 * dim :]
        means[c] = b / n
        between = sq - b**2 / n
        denom = n - m_c[c] if mode == "paper" else n - 1
        if denom <= 0:
            denom = n - 1
        if denom <= 0:
            variances[c] = 0.0
        else:
            variances[c] = np.maximum((within + between) / denom, 0.0)
    return GlobalStats(counts=counts, client_counts=m_c, means=means, variances=variances)
