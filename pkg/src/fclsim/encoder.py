"""Flat parameter vectors, the MLP encoder/predictor, EMA and l1 distance."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from fclsim.numerics import GradTape, ShapeError, Tensor, affine, l2_normalize, relu

HIDDEN = 64
D_FEAT = 32
WIRE_BYTES = 4
INPUT_CENTRE = 0.5  # pixel values in [0, 1] are shifted to [-0.5, 0.5]
_MAGIC = b"PVEC"

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class LayoutMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameters plus the (name, shape) layout they unpack into."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "layout", tuple((n, tuple(s)) for n, s in self.layout))
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if vals.size != expected:
            raise ShapeError(f"ParamVector has {vals.size} values but layout needs {expected}")

    def __len__(self) -> int:
        return self.values.size

    @property
    def n_bytes(self) -> int:
        """Wire payload size (float32 per value, header excluded)."""
        return WIRE_BYTES * self.values.size

    def arrays(self) -> dict[str, np.ndarray]:
        out, i = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[i : i + n].reshape(shape)
            i += n
        return out

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.layout)

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout)

    @classmethod
    def from_arrays(cls, named: Iterable[tuple[str, np.ndarray]]) -> ParamVector:
        named = list(named)
        layout = tuple((n, tuple(np.shape(a))) for n, a in named)
        flat = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for _, a in named])
        return cls(flat, layout)

    def to_bytes(self) -> bytes:
        head = [_MAGIC, struct.pack("<I", len(self.layout))]
        for name, shape in self.layout:
            raw = name.encode("utf-8")
            head.append(struct.pack("<H", len(raw)) + raw)
            head.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        return b"".join(head) + self.values.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> ParamVector:
        if blob[:4] != _MAGIC:
            raise ValueError("not a ParamVector blob")
        (n_layers,) = struct.unpack_from("<I", blob, 4)
        pos, layout = 8, []
        for _ in range(n_layers):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            layout.append((name, tuple(shape)))
        values = np.frombuffer(blob, dtype="<f4", offset=pos).astype(np.float64)
        return cls(values, tuple(layout))


def _check_compatible(a: ParamVector, b: ParamVector) -> None:
    if a.layout != b.layout:
        raise LayoutMismatchError("parameter layouts differ")


def _he_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def init_encoder(rng: np.random.Generator, input_dim: int, hidden: int = HIDDEN, d_feat: int = D_FEAT) -> ParamVector:
    return ParamVector.from_arrays(
        [
            ("enc.w1", _he_init(rng, input_dim, hidden)),
            ("enc.b1", np.zeros(hidden)),
            ("enc.w2", _he_init(rng, hidden, d_feat)),
            ("enc.b2", np.zeros(d_feat)),
        ]
    )


def init_predictor(rng: np.random.Generator, d_feat: int = D_FEAT, hidden: int = D_FEAT) -> ParamVector:
    return ParamVector.from_arrays(
        [
            ("pred.w1", _he_init(rng, d_feat, hidden)),
            ("pred.b1", np.zeros(hidden)),
            ("pred.w2", _he_init(rng, hidden, d_feat)),
            ("pred.b2", np.zeros(d_feat)),
        ]
    )


def encoder_input_dim(encoder: ParamVector) -> int:
    return encoder.layout[0][1][0]


def watch_params(tape: GradTape, params: ParamVector) -> list[Tensor]:
    return [tape.watch(a) for a in params.arrays().values()]


def flatten_grads(grads: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.reshape(-1) for g in grads])


def _mlp(x, w1, b1, w2, b2) -> Tensor:
    return affine(relu(affine(x, w1, b1)), w2, b2)


def encode(weights, images) -> Tensor:
    """Unit-norm embeddings for a batch of images (``(B, H, W)`` or flattened).

    ``weights`` is either a ParamVector or its four layer tensors (as returned
    by :func:`watch_params`) when gradients are needed.
    """
    if isinstance(weights, ParamVector):
        weights = list(weights.arrays().values())
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    x = x.reshape(x.shape[0], -1) - INPUT_CENTRE
    n_in = weights[0].shape[0]
    if x.shape[1] != n_in:
        raise ShapeError(f"encoder expects {n_in} inputs, image has {x.shape[1]}")
    return l2_normalize(_mlp(x, *weights))


def predict(weights, features) -> Tensor:
    if isinstance(weights, ParamVector):
        weights = list(weights.arrays().values())
    return _mlp(features, *weights)


@dataclass(frozen=True)
class FeatureVector:
    embedding: np.ndarray
    client_id: int
    volume_id: int
    partition: int

    def __post_init__(self):
        emb = np.array(self.embedding, dtype=np.float64)
        if abs(np.linalg.norm(emb) - 1.0) > 1e-9:
            raise ValueError("FeatureVector embedding must have unit norm")
        emb.flags.writeable = False
        object.__setattr__(self, "embedding", emb)


def forward_embed(encoder: ParamVector, image, client_id: int = 0, volume_id: int = 0, partition: int = 0) -> FeatureVector:
    """Embed one 2D image and tag it with its metadata."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    emb = encode(encoder, img.reshape(1, -1)).data[0]
    return FeatureVector(emb, client_id, volume_id, partition)


@dataclass
class OnlineNetwork:
    encoder: ParamVector
    predictor: ParamVector | None = None

    def copy(self) -> OnlineNetwork:
        return OnlineNetwork(self.encoder.copy(), None if self.predictor is None else self.predictor.copy())


@dataclass
class TargetNetwork:
    encoder: ParamVector = field()


def ema_update(target: ParamVector, online: ParamVector, m: float) -> ParamVector:
    """``m * target + (1 - m) * online``."""
    _check_compatible(target, online)
    if not 0.0 < m <= 1.0:
        raise ValueError(f"momentum must be in (0, 1], got {m}")
    if m == 1.0:
        return target
    return target.with_values(m * target.values + (1.0 - m) * online.values)


def param_l1_distance(a: ParamVector, b: ParamVector) -> float:
    """Mean absolute difference over all parameters."""
    _check_compatible(a, b)
    return float(np.mean(np.abs(a.values - b.values)))
