"""Synthetic partitioned volumes, slice sampling and view augmentation.

Each volume is a stack of ``D`` slices split into ``S`` contiguous
partitions.  Partition ``s`` draws ``s + 1`` Gaussian blobs on a ring whose
radius and blob size are fixed functions of ``s``, and adds a small
partition-dependent brightness step.  Every subject carries its own pose
(centre shift and zoom) and intensity gain, and each slice gets fresh pixel
noise, so same-partition slices of different subjects correlate more than
slices of different partitions while raw pixels stay noisy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

_MAGIC = b"FCLV"
BACKGROUND = 0.1
PARTITION_STEP = 0.06  # brightness added per partition index
GAIN_RANGE = (0.5, 0.7)
POSE_SHIFT = 0.1  # fraction of the image size
POSE_ZOOM = 0.15
PIXEL_NOISE = 0.2


@dataclass(frozen=True)
class DataConfig:
    n_clients: int = 10
    volumes_per_client: int = 4
    D: int = 16
    H: int = 16
    W: int = 16
    S: int = 4
    seed: int = 0

    def validate(self) -> None:
        for f in fields(self):
            if f.name == "seed":
                continue
            if getattr(self, f.name) < (1 if f.name in ("n_clients", "volumes_per_client") else 2):
                raise ValueError(f"data.{f.name} too small: {getattr(self, f.name)}")
        if self.S < 2:
            raise ValueError("data.S must be >= 2")
        if self.S > self.D:
            raise ValueError("data.S must not exceed data.D")
        if not 0 <= self.seed < 2**64:
            raise ValueError("data.seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray  # (D, H, W) in [0, 1]
    subject_id: int
    client_id: int

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class SliceSample:
    image: np.ndarray
    volume_id: int
    partition: int
    client_id: int = 0
    slice_index: int = 0


def partition_of(slice_index: int, depth: int, S: int) -> int:
    return (slice_index * S) // depth


def partition_slices(depth: int, S: int, s: int) -> range:
    """Slice indices belonging to partition ``s`` (contiguous)."""
    lo = -(-s * depth // S)
    hi = -(-(s + 1) * depth // S)
    return range(lo, hi)


def _blob(yy, xx, cy, cx, radius):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2))


def _motif(yy, xx, s: int, S: int, H: int, W: int, cy: float, cx: float, zoom: float, phase: float) -> np.ndarray:
    """Partition ``s`` draws ``s + 1`` blobs on a ring around (cy, cx).

    Blob count, ring radius and blob size are fixed functions of ``s``; the
    first blob sits at the top so every motif is left-right symmetric.
    """
    size = min(H, W) * zoom
    n = s + 1
    ring = 0.0 if n == 1 else (0.16 + 0.10 * s / max(S - 1, 1)) * size
    radius = (0.20 - 0.09 * s / max(S - 1, 1)) * size * (1.0 + 0.1 * phase)
    img = np.zeros_like(yy)
    for k in range(n):
        ang = -np.pi / 2 + 2.0 * np.pi * k / n
        img += _blob(yy, xx, cy + ring * np.sin(ang), cx + ring * np.cos(ang), radius)
    return img


def _make_volume(cfg: DataConfig, rng: np.random.Generator, subject_id: int, client_id: int) -> Volume:
    D, H, W, S = cfg.D, cfg.H, cfg.W, cfg.S
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    # per-subject pose (shift and zoom, much like a crop) and intensity gain
    cy = (H - 1) / 2 + rng.uniform(-POSE_SHIFT, POSE_SHIFT) * H
    cx = (W - 1) / 2 + rng.uniform(-POSE_SHIFT, POSE_SHIFT) * W
    zoom = rng.uniform(1 - POSE_ZOOM, 1 + POSE_ZOOM)
    gain = rng.uniform(*GAIN_RANGE)
    vol = np.empty((D, H, W))
    for z in range(D):
        s = partition_of(z, D, S)
        span = partition_slices(D, S, s)
        phase = (z - span[0]) / max(len(span) - 1, 1) - 0.5
        img = _motif(yy, xx, s, S, H, W, cy, cx, zoom, phase)
        img = BACKGROUND + PARTITION_STEP * s + gain * img / max(img.max(), 1e-9) + rng.normal(0.0, PIXEL_NOISE, size=(H, W))
        vol[z] = np.clip(img, 0.0, 1.0)
    return Volume(vol, subject_id, client_id)


def generate_cohort(cfg: DataConfig) -> list[list[Volume]]:
    """Deterministic cohort: one list of volumes per client."""
    cfg.validate()
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_clients)
    cohort = []
    for c, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        cohort.append(
            [_make_volume(cfg, rng, c * cfg.volumes_per_client + v, c) for v in range(cfg.volumes_per_client)]
        )
    return cohort


def volume_slices(volume: Volume, S: int) -> list[SliceSample]:
    D = volume.depth
    return [
        SliceSample(volume.voxels[z], volume.subject_id, partition_of(z, D, S), volume.client_id, z)
        for z in range(D)
    ]


def sample_slice(volume: Volume, s: int, S: int, rng: np.random.Generator) -> SliceSample:
    idx = partition_slices(volume.depth, S, s)
    z = idx[int(rng.integers(len(idx)))]
    return SliceSample(volume.voxels[z], volume.subject_id, s, volume.client_id, z)


def sample_partition_pair(volumes: list[Volume], s: int, rng: np.random.Generator, S: int = 4):
    """Two slices from partition ``s`` of two different volumes."""
    if len(volumes) < 2:
        raise ValueError("sample_partition_pair needs at least 2 volumes")
    if not 0 <= s < S:
        raise ValueError(f"partition {s} out of range for S={S}")
    i, j = rng.choice(len(volumes), size=2, replace=False)
    return sample_slice(volumes[i], s, S, rng), sample_slice(volumes[j], s, S, rng)


@dataclass(frozen=True)
class AugmentConfig:
    min_scale: float = 0.6
    max_scale: float = 1.0
    flip_p: float = 0.5
    noise_sigma: float = 0.05
    min_size: int = 4


def _crop_resize(img: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    H, W = img.shape
    ch, cw = max(scale * H, 1.0), max(scale * W, 1.0)
    y0 = rng.uniform(0.0, H - ch) if ch < H else 0.0
    x0 = rng.uniform(0.0, W - cw) if cw < W else 0.0
    if ch >= H and cw >= W:
        return img.copy()
    # bilinear sample the crop window on the original HxW grid
    ys = y0 + (np.arange(H) + 0.5) * ch / H - 0.5
    xs = x0 + (np.arange(W) + 0.5) * cw / W - 0.5
    ys, xs = np.clip(ys, 0, H - 1), np.clip(xs, 0, W - 1)
    y_lo, x_lo = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y_hi, x_hi = np.minimum(y_lo + 1, H - 1), np.minimum(x_lo + 1, W - 1)
    wy, wx = (ys - y_lo)[:, None], (xs - x_lo)[None, :]
    top = img[y_lo][:, x_lo] * (1 - wx) + img[y_lo][:, x_hi] * wx
    bot = img[y_hi][:, x_lo] * (1 - wx) + img[y_hi][:, x_hi] * wx
    return top * (1 - wy) + bot * wy


def _view(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    scale = rng.uniform(cfg.min_scale, cfg.max_scale) if cfg.max_scale > cfg.min_scale else cfg.max_scale
    out = _crop_resize(img, scale, rng)
    if cfg.flip_p > 0 and rng.random() < cfg.flip_p:
        out = out[:, ::-1]
    if cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def augment(image, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Two independent random views (crop-resize, horizontal flip, noise)."""
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < cfg.min_size:
        raise ValueError(f"augment needs a 2D image of at least {cfg.min_size}x{cfg.min_size}, got {img.shape}")
    return _view(img, rng, cfg), _view(img, rng, cfg)


def dump_cohort(path, cohort: list[list[Volume]], cfg: DataConfig) -> None:
    """Flat binary dump: header (dims + seed) then float32 voxels, client-major."""
    head = _MAGIC + struct.pack("<6IQ", cfg.n_clients, cfg.volumes_per_client, cfg.D, cfg.H, cfg.W, cfg.S, cfg.seed)
    with open(path, "wb") as fh:
        fh.write(head)
        for vols in cohort:
            for v in vols:
                fh.write(v.voxels.astype("<f4").tobytes())


def load_cohort(path) -> tuple[DataConfig, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a cohort dump")
    n_c, vpc, D, H, W, S, seed = struct.unpack_from("<6IQ", blob, 4)
    cfg = DataConfig(n_c, vpc, D, H, W, S, seed)
    body = np.frombuffer(blob, dtype="<f4", offset=4 + struct.calcsize("<6IQ"))
    return cfg, body.reshape(n_c, vpc, D, H, W).astype(np.float64)
