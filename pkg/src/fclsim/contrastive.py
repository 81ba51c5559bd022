"""Memory banks, feature exchange pools, negative sampling and the losses.

All losses return ``(loss, grad)`` where ``grad`` is the derivative with
respect to the query/online-side vector; keys, negatives and BYOL targets are
treated as constants.  ``*_batch`` variants register the same maths as a
single primitive on a :class:`~fclsim.numerics.GradTape` so gradients reach
the encoder parameters.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from fclsim.encoder import FeatureVector
from fclsim.numerics import EPS_NORM, DegenerateVectorError, Tensor, as_tensor

BANK_HEADER_BYTES = 12  # client_id, count, d_feat as 4-byte ints
ENTRY_TAG_BYTES = 8  # volume_id, partition as 4-byte ints


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    K: int = 64

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"loss.tau must be > 0, got {self.tau}")
        if self.K < 1:
            raise ValueError(f"loss.K must be >= 1, got {self.K}")


class MemoryBank:
    """Fixed-capacity FIFO of FeatureVectors; pushing onto a full bank evicts the oldest."""

    def __init__(self, capacity: int, entries: Iterable[FeatureVector] = ()):
        if capacity < 1:
            raise ValueError("bank capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[FeatureVector] = deque(entries, maxlen=capacity)

    def push(self, feat: FeatureVector) -> None:
        self._entries.append(feat)

    def extend(self, feats: Iterable[FeatureVector]) -> None:
        self._entries.extend(feats)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, i):
        return self._entries[i]

    @property
    def full(self) -> bool:
        return len(self._entries) == self.capacity

    def copy(self) -> MemoryBank:
        return MemoryBank(self.capacity, self._entries)

    def to_pool(self) -> FeaturePool:
        return FeaturePool.from_features(list(self._entries))

    @property
    def n_bytes(self) -> int:
        return bank_wire_bytes(len(self), self._entries[0].embedding.size if self._entries else 0)


def bank_push(bank: MemoryBank, feat: FeatureVector) -> MemoryBank:
    """Value-style push: returns a new bank, ``bank`` is left untouched."""
    out = bank.copy()
    out.push(feat)
    return out


def bank_wire_bytes(count: int, d_feat: int) -> int:
    return BANK_HEADER_BYTES + count * (ENTRY_TAG_BYTES + 4 * d_feat)


def encode_bank(bank: MemoryBank, client_id: int) -> bytes:
    """Feature-exchange wire message for one bank."""
    d = bank[0].embedding.size if len(bank) else 0
    parts = [struct.pack("<3i", client_id, len(bank), d)]
    for f in bank:
        parts.append(struct.pack("<2i", f.volume_id, f.partition) + f.embedding.astype("<f4").tobytes())
    return b"".join(parts)


def decode_bank(blob: bytes, capacity: int | None = None) -> tuple[int, MemoryBank]:
    client_id, count, d = struct.unpack_from("<3i", blob, 0)
    pos, feats = BANK_HEADER_BYTES, []
    for _ in range(count):
        vol, part = struct.unpack_from("<2i", blob, pos)
        pos += ENTRY_TAG_BYTES
        emb = np.frombuffer(blob, dtype="<f4", count=d, offset=pos).astype(np.float64)
        pos += 4 * d
        feats.append(FeatureVector(emb / np.linalg.norm(emb), client_id, vol, part))
    return client_id, MemoryBank(capacity or max(count, 1), feats)


@dataclass(frozen=True)
class FeaturePool:
    """Array form of a multiset of tagged features (rows of ``embeddings``)."""

    embeddings: np.ndarray
    client_ids: np.ndarray
    volume_ids: np.ndarray
    partitions: np.ndarray

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @classmethod
    def from_features(cls, feats: Sequence[FeatureVector], d_feat: int | None = None) -> FeaturePool:
        if not feats:
            return cls.empty(d_feat or 0)
        return cls(
            np.stack([f.embedding for f in feats]),
            np.array([f.client_id for f in feats], dtype=np.int64),
            np.array([f.volume_id for f in feats], dtype=np.int64),
            np.array([f.partition for f in feats], dtype=np.int64),
        )

    @classmethod
    def empty(cls, d_feat: int) -> FeaturePool:
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, d_feat)), z, z.copy(), z.copy())

    def take(self, idx) -> FeaturePool:
        idx = np.asarray(idx, dtype=np.int64)
        return FeaturePool(self.embeddings[idx], self.client_ids[idx], self.volume_ids[idx], self.partitions[idx])

    def features(self) -> list[FeatureVector]:
        return [
            FeatureVector(e, int(c), int(v), int(p))
            for e, c, v, p in zip(self.embeddings, self.client_ids, self.volume_ids, self.partitions)
        ]

    @staticmethod
    def concat(pools: Sequence[FeaturePool]) -> FeaturePool:
        pools = [p for p in pools if len(p)]
        if not pools:
            return FeaturePool.empty(0)
        return FeaturePool(
            np.concatenate([p.embeddings for p in pools]),
            np.concatenate([p.client_ids for p in pools]),
            np.concatenate([p.volume_ids for p in pools]),
            np.concatenate([p.partitions for p in pools]),
        )


def _as_pool(x) -> FeaturePool:
    if isinstance(x, FeaturePool):
        return x
    if isinstance(x, MemoryBank):
        return x.to_pool()
    return FeaturePool.from_features(list(x))


def aggregate_banks(local, remote: Sequence = ()) -> FeaturePool:
    """Local bank plus every remote bank, tags preserved."""
    return FeaturePool.concat([_as_pool(local)] + [_as_pool(r) for r in remote])


def sample_negatives(Q, K: int, rng: np.random.Generator) -> FeaturePool:
    """``K`` distinct entries of ``Q`` drawn uniformly without replacement."""
    pool = _as_pool(Q)
    if K > len(pool):
        raise ValueError(f"cannot sample {K} negatives from a pool of {len(pool)}")
    return pool.take(rng.choice(len(pool), size=K, replace=False))


def remote_positives(q: FeatureVector | int, Q_prime) -> FeaturePool:
    """Entries of the sampled pool in the same partition as ``q``."""
    pool = _as_pool(Q_prime)
    part = q.partition if isinstance(q, FeatureVector) else int(q)
    return pool.take(np.flatnonzero(pool.partitions == part))


def _vecs(x) -> np.ndarray:
    if isinstance(x, FeatureVector):
        return x.embedding[None, :]
    if isinstance(x, (FeaturePool, MemoryBank)):
        return _as_pool(x).embeddings
    if isinstance(x, np.ndarray):
        return x.reshape(-1, x.shape[-1]) if x.ndim > 1 else x[None, :]
    items = list(x)
    if not items:
        return np.zeros((0, 0))
    return np.stack([f.embedding if isinstance(f, FeatureVector) else np.asarray(f, dtype=np.float64) for f in items])


def _nce_term(q: np.ndarray, pos: np.ndarray, neg: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """-(1/|P|) sum_k log(exp(q.k/t) / (exp(q.k/t) + sum_n exp(q.n/t))) and its q-gradient."""
    sp = pos @ q / tau  # (P,)
    sn = neg @ q / tau if len(neg) else np.zeros(0)
    m = max(sp.max(), sn.max() if sn.size else -np.inf)
    en = np.exp(sn - m)
    ep = np.exp(sp - m)
    denom = ep + en.sum()  # (P,)
    P = len(sp)
    loss = float((np.log(denom) - (sp - m)).sum()) / P
    # d/dq of log(denom_k) - s_k, averaged over positives
    grad = ((ep / denom) @ pos - pos.sum(axis=0)) / P
    if sn.size:
        grad = grad + (en * ((1.0 / denom).sum() / P)) @ neg
    return loss, grad / tau


def _query(q) -> np.ndarray:
    v = q.embedding if isinstance(q, FeatureVector) else as_tensor(q).data
    return np.asarray(v, dtype=np.float64).reshape(-1)


def local_contrastive_loss(q, positives, negatives, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Multi-positive InfoNCE of ``q`` against its positives and the sampled negatives."""
    pos = _vecs(positives)
    if pos.shape[0] == 0:
        raise ValueError("local_contrastive_loss needs at least one positive")
    return _nce_term(_query(q), pos, _vecs(negatives), cfg.tau)


def gsm_loss(q, positives, remote, negatives, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Local term plus the remote (same-partition) term; the latter is dropped when ``remote`` is empty."""
    loss, grad = local_contrastive_loss(q, positives, negatives, cfg)
    rem = _vecs(remote)
    if rem.shape[0]:
        l2, g2 = _nce_term(_query(q), rem, _vecs(negatives), cfg.tau)
        loss, grad = loss + l2, grad + g2
    return loss, grad


def byol_loss(z, z_target) -> tuple[float, np.ndarray]:
    """``2 - 2 cos(z, z')``; gradient with respect to ``z`` only."""
    z = as_tensor(z).data.reshape(-1)
    zt = as_tensor(z_target).data.reshape(-1)
    if z.shape != zt.shape:
        raise ValueError(f"byol_loss: shapes differ {z.shape} vs {zt.shape}")
    nz, nt = np.linalg.norm(z), np.linalg.norm(zt)
    if nz <= EPS_NORM or nt <= EPS_NORM:
        raise DegenerateVectorError("byol_loss: zero-norm input")
    u, v = z / nz, zt / nt
    cos = float(u @ v)
    grad = -2.0 * (v - cos * u) / nz
    return 2.0 - 2.0 * cos, grad


def byol_loss_batch(z: Tensor, z_target: np.ndarray) -> Tensor:
    """Mean BYOL loss over rows; targets are stop-gradient constants."""
    zt = np.asarray(getattr(z_target, "data", z_target), dtype=np.float64)
    losses, grads = zip(*(byol_loss(zi, ti) for zi, ti in zip(z.data, zt)))
    n = len(losses)
    G = np.stack(grads) / n
    return _emit_scalar(z, float(np.sum(losses)) / n, G)


def contrastive_loss_batch(
    q: Tensor,
    positives: Sequence[np.ndarray],
    negatives: Sequence[np.ndarray],
    cfg: LossConfig,
    remote: Sequence[np.ndarray] | None = None,
) -> Tensor:
    """Mean over rows of ``q`` of the local loss (``remote is None``) or the GSM loss.

    ``positives[i]``, ``negatives[i]`` and ``remote[i]`` are the key arrays for row ``i``.
    """
    n = q.shape[0]
    total, G = 0.0, np.zeros_like(q.data)
    for i in range(n):
        if remote is None:
            li, gi = local_contrastive_loss(q.data[i], positives[i], negatives[i], cfg)
        else:
            li, gi = gsm_loss(q.data[i], positives[i], remote[i], negatives[i], cfg)
        total += li
        G[i] = gi
    return _emit_scalar(q, total / n, G / n)


def _emit_scalar(x: Tensor, value: float, grad: np.ndarray) -> Tensor:
    out = np.array(value)
    if x.tape is None:
        return Tensor(out)
    return x.tape.record(out, (x,), lambda g: (g * grad,))
