"""BEV tensor encoding, synthetic segmentation noise, and observation-quality metrics.

A BEV tensor is a plain ``uint8`` array of shape (192, 192, 14) holding 0/1
occupancy per channel, in the channel order of :mod:`deskdrive.classes`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from deskdrive.classes import (
    EGO,
    N_CHANNELS,
    ROUTE,
    SEG_CLASSES,
    UNKNOWN,
    BevSemanticMap,
    SemanticImage,
)
from deskdrive.formats import write_csv

BEV_CELLS = 192
BEV_SHAPE = (BEV_CELLS, BEV_CELLS, N_CHANNELS)
_MAGIC = b"BEV1"

# label id -> one-hot row; UNKNOWN and out-of-table ids map to all zeros
_ONE_HOT = np.zeros((256, N_CHANNELS), dtype=np.uint8)
_ONE_HOT[np.arange(N_CHANNELS), np.arange(N_CHANNELS)] = 1


def empty_bev() -> np.ndarray:
    return np.zeros(BEV_SHAPE, dtype=np.uint8)


def check_bev(t: np.ndarray) -> None:
    if t.shape != BEV_SHAPE:
        raise ValueError(f"BEV tensor must have shape {BEV_SHAPE}, got {t.shape}")
    if t.dtype != np.uint8:
        raise ValueError(f"BEV tensor must be uint8, got {t.dtype}")


def encode(m: BevSemanticMap, route_mask: np.ndarray | None = None,
           ego_mask: np.ndarray | None = None) -> np.ndarray:
    """One-hot encode a label map; route and ego channels come from the optional masks."""
    if m.grid.cells != BEV_CELLS:
        raise ValueError(f"encode needs a {BEV_CELLS}-cell grid, got {m.grid.cells}")
    t = _ONE_HOT[m.labels]
    if route_mask is not None:
        t[:, :, ROUTE] = route_mask
    if ego_mask is not None:
        t[:, :, EGO] = ego_mask
    return t


# --- segmentation noise ----------------------------------------------------

@dataclass(frozen=True)
class SegNoiseModel:
    flip_rate: float = 0.0
    boundary_jitter: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_rate <= 1.0:
            raise ValueError("flip_rate must lie in [0, 1]")
        if self.boundary_jitter < 0 or int(self.boundary_jitter) != self.boundary_jitter:
            raise ValueError("boundary_jitter must be a nonnegative integer")

    @property
    def is_identity(self) -> bool:
        return self.flip_rate == 0 and self.boundary_jitter == 0


NO_NOISE = SegNoiseModel()
_N_SEG = len(SEG_CLASSES)


def noise_rng(noise: SegNoiseModel, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(noise.seed, spawn_key=(stream,)))


def flip_labels(labels: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    out = labels.copy()
    if rate <= 0:
        return out
    flat = out.reshape(-1)
    hit = np.nonzero(rng.random(flat.size) < rate)[0]
    u = rng.random(hit.size)
    old = flat[hit]
    known = old < _N_SEG
    pick = np.floor(u * np.where(known, _N_SEG - 1, _N_SEG)).astype(np.uint8)
    # skip over the original class so every flip changes the label
    flat[hit] = np.where(known, pick + (pick >= old), pick)
    return out


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    b = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:, :] != labels[:-1, :]
    dh = labels[:, 1:] != labels[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def jitter_boundaries(labels: np.ndarray, radius: int, rng: np.random.Generator) -> np.ndarray:
    if radius <= 0:
        return labels.copy()
    rows, cols = np.nonzero(boundary_mask(labels))
    dr = rng.integers(-radius, radius + 1, rows.size)
    dc = rng.integers(-radius, radius + 1, rows.size)
    h, w = labels.shape
    out = labels.copy()
    out[rows, cols] = labels[np.clip(rows + dr, 0, h - 1), np.clip(cols + dc, 0, w - 1)]
    return out


def corrupt(seg: SemanticImage, noise: SegNoiseModel, stream: int = 0) -> SemanticImage:
    """Inject segmentation error: independent label flips, then boundary jitter.

    ``stream`` selects an independent random stream under the same seed, so a
    sequence of frames can be corrupted reproducibly frame by frame.
    """
    if noise.is_identity:
        return seg
    rng = noise_rng(noise, stream)
    labels = flip_labels(seg.labels, noise.flip_rate, rng)
    labels = jitter_boundaries(labels, noise.boundary_jitter, rng)
    return SemanticImage(labels)


# --- metrics ---------------------------------------------------------------

def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1_bev_distance(a: np.ndarray, b: np.ndarray) -> int:
    _same_shape(a, b)
    return int(np.abs(a.astype(np.int16) - b.astype(np.int16)).sum())


class DomainInvariance(NamedTuple):
    epsilon: float
    std: float
    n: int


def estimate_domain_invariance(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> DomainInvariance:
    d = np.array([l1_bev_distance(a, b) for a, b in pairs], dtype=float)
    if d.size == 0:
        raise ValueError("need at least one scene-matched pair")
    std = float(d.std(ddof=1)) if d.size > 1 else 0.0
    return DomainInvariance(float(d.mean()), std, int(d.size))


def _channel(t: np.ndarray, c: int) -> np.ndarray:
    if not 0 <= c < t.shape[-1]:
        raise ValueError(f"channel {c} out of range")
    return t[..., c] != 0


def channel_iou(a: np.ndarray, b: np.ndarray, channel: int) -> float | None:
    """IoU of one channel's masks; None when both masks are empty."""
    _same_shape(a, b)
    ma, mb = _channel(a, channel), _channel(b, channel)
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return None
    return np.count_nonzero(ma & mb) / union


def activation_fraction(t: np.ndarray, channel: int) -> float:
    m = _channel(t, channel)
    return np.count_nonzero(m) / m.size


class TemporalConsistency(NamedTuple):
    mean_iou: float | None
    fraction_above: float | None
    pairs: int
    skipped: int


def temporal_consistency(seq: Sequence[np.ndarray], channel: int,
                         threshold: float = 0.9) -> TemporalConsistency:
    if len(seq) < 2:
        raise ValueError("need at least two frames")
    ious = [channel_iou(seq[k], seq[k + 1], channel) for k in range(len(seq) - 1)]
    defined = np.array([v for v in ious if v is not None])
    skipped = len(ious) - defined.size
    if defined.size == 0:
        return TemporalConsistency(None, None, 0, skipped)
    return TemporalConsistency(float(defined.mean()), float(np.mean(defined >= threshold)),
                               int(defined.size), skipped)


METRICS_HEADER = ("frame", "channel", "iou", "activation_a", "activation_b")


def frame_metrics(seq_a: Sequence[np.ndarray], seq_b: Sequence[np.ndarray],
                  channels: Iterable[int] = range(N_CHANNELS)):
    """Per-frame, per-channel rows comparing two aligned tensor sequences."""
    if len(seq_a) != len(seq_b):
        raise ValueError("sequences differ in length")
    channels = list(channels)
    for k, (a, b) in enumerate(zip(seq_a, seq_b)):
        for c in channels:
            iou = channel_iou(a, b, c)
            yield k, c, "" if iou is None else iou, activation_fraction(a, c), activation_fraction(b, c)


def write_frame_metrics(path, seq_a, seq_b, channels: Iterable[int] = range(N_CHANNELS)) -> None:
    write_csv(path, METRICS_HEADER, frame_metrics(seq_a, seq_b, channels))


# --- tensor dump -----------------------------------------------------------

def dump_bev(t: np.ndarray) -> bytes:
    if t.ndim != 3 or t.dtype != np.uint8 or np.any(t > 1):
        raise ValueError("expected a 3-D binary uint8 tensor")
    return _MAGIC + struct.pack("<3I", *t.shape) + np.ascontiguousarray(t).tobytes()


def load_bev(data: bytes) -> np.ndarray:
    if data[:4] != _MAGIC or len(data) < 16:
        raise ValueError("not a BEV1 dump")
    shape = struct.unpack("<3I", data[4:16])
    body = data[16:]
    if len(body) != int(np.prod(shape)):
        raise ValueError("BEV1 dump is truncated or has trailing bytes")
    t = np.frombuffer(body, dtype=np.uint8).reshape(shape).copy()
    if np.any(t > 1):
        raise ValueError("BEV1 dump holds non-binary bytes")
    return t


def unknown_fraction(m: BevSemanticMap) -> float:
    return float(np.mean(m.labels == UNKNOWN))
