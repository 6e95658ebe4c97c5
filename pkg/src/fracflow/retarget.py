"""Shape completion: invert a partial latent, mix in noise, then fine-tune the flow on the result.

A partial assembly is encoded, pushed back towards noise with a few reverse
Euler steps, blended with fresh Gaussian noise, and regenerated by a flow
that was fine-tuned on (blended inversion, complete-object latent) pairs.
"""
from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .flow import FlowError, FlowModel, TrainConfig, integrate, sample_reverse, train_on_pairs
from .geometry import PointCloud
from .latent import LatentError, ShapeCodec

log = logging.getLogger(__name__)

PAIR_MAGIC = b"JGRP"
PAIR_VERSION = 1


class RetargetError(RuntimeError):
    pass


@dataclass(frozen=True)
class RetargetConfig:
    n_steps: int = 100
    n_reverse: int = 4
    alpha: float = 0.5
    lr: float = 2e-5
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_reverse <= self.n_steps:
            raise RetargetError("need 1 <= n_reverse <= n_steps")
        if not 0.0 <= self.alpha <= 1.0:
            raise RetargetError("alpha must lie in [0, 1]")

    @property
    def k(self) -> float:
        return self.n_reverse / self.n_steps

    def with_k(self, k: float) -> "RetargetConfig":
        return replace(self, n_reverse=max(1, min(self.n_steps, int(round(k * self.n_steps)))))

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.lr,
                           scheduler="constant", seed=self.seed)


@dataclass(frozen=True)
class RetargetPair:
    x0: np.ndarray
    x1: np.ndarray

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=np.float32).reshape(-1)
        x1 = np.asarray(self.x1, dtype=np.float32).reshape(-1)
        if x0.shape != x1.shape:
            raise RetargetError("pair members differ in dimension")
        if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(x1))):
            raise RetargetError("non-finite pair entry")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "x1", x1)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def invert(model: FlowModel, partial: PointCloud, cfg: RetargetConfig, codec: ShapeCodec) -> np.ndarray:
    """Reverse-integrate the latent of ``partial`` (already normalized)."""
    x1_hat = codec.encode_flat(partial)
    return sample_reverse(model, x1_hat.astype(model.dtype), cfg.n_reverse)


def langevin_rescale(x0_hat: np.ndarray, alpha: float, seed=0) -> np.ndarray:
    """``alpha * x0_hat + sqrt(1 - alpha^2) * xi`` with ``xi ~ N(0, I)``."""
    if not 0.0 <= alpha <= 1.0:
        raise RetargetError("alpha must lie in [0, 1]")
    x0_hat = np.asarray(x0_hat)
    xi = _rng(seed).standard_normal(x0_hat.shape)
    if alpha == 1.0:
        return x0_hat.copy()
    return (alpha * x0_hat + np.sqrt(1.0 - alpha * alpha) * xi).astype(x0_hat.dtype)


def instance_seed(base: int, index: int, purpose: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(base), int(index), int(purpose)])


def build_retarget_pairs(instances: Sequence[tuple[PointCloud, PointCloud]], model: FlowModel,
                         cfg: RetargetConfig, codec: ShapeCodec) -> list[RetargetPair]:
    """One pair per (partial, complete) instance; both clouds share a frame."""
    if not instances:
        raise RetargetError("no instances to build pairs from")
    pairs = []
    failures = 0
    for i, (partial, complete) in enumerate(instances):
        try:
            x0_hat = invert(model, partial, cfg, codec)
            x0 = langevin_rescale(x0_hat, cfg.alpha, instance_seed(cfg.seed, i, 1))
            x1 = codec.encode_flat(complete)
            pairs.append(RetargetPair(x0, x1))
        except (LatentError, FlowError, ValueError) as exc:
            failures += 1
            log.warning("pair %d skipped: %s", i, exc)
    if not pairs:
        raise RetargetError(f"all {failures} instances failed while building pairs")
    return pairs


def finetune(model: FlowModel, pairs: Sequence[RetargetPair], cfg: RetargetConfig) -> FlowModel:
    """Fit a copy of ``model`` to the fixed pairs; the input model is not touched."""
    if not pairs:
        raise RetargetError("no pairs to fine-tune on")
    x0 = np.stack([p.x0 for p in pairs])
    x1 = np.stack([p.x1 for p in pairs])
    return train_on_pairs(model, x0, x1, cfg.train_config(), label="retarget")


def pair_loss(model: FlowModel, pairs: Sequence[RetargetPair], seed=0) -> float:
    """Flow-matching loss on the pairs at fixed uniform times (for before/after comparisons)."""
    from .flow import CouplingBatch, flow_loss

    x0 = np.stack([p.x0 for p in pairs])
    x1 = np.stack([p.x1 for p in pairs])
    t = _rng(seed).random(len(pairs))
    return flow_loss(model, CouplingBatch(x0, x1), t)


def generate_latents(model: FlowModel, x1_hat: np.ndarray, cfg: RetargetConfig,
                     seeds: Iterable) -> np.ndarray:
    """Batched invert -> rescale -> regenerate for stacked input latents."""
    x1_hat = np.atleast_2d(np.asarray(x1_hat)).astype(model.dtype)
    x0_hat = sample_reverse(model, x1_hat, cfg.n_reverse)
    x0 = np.stack([langevin_rescale(z, cfg.alpha, s) for z, s in zip(x0_hat, seeds)])
    return integrate(model, x0, cfg.n_steps)


def reconstruct(model_ft: FlowModel, partial: PointCloud, cfg: RetargetConfig, codec: ShapeCodec,
                seed=0) -> PointCloud:
    """Complete-shape estimate in the normalized frame of ``partial``."""
    rng = _rng(seed)
    x0 = langevin_rescale(invert(model_ft, partial, cfg, codec), cfg.alpha, rng)
    x1 = integrate(model_ft, x0, cfg.n_steps)
    return codec.decode_flat(x1, seed=rng)


def reconstruct_many(model_ft: FlowModel, partials: Sequence[PointCloud], cfg: RetargetConfig,
                     codec: ShapeCodec, seeds: Sequence) -> list[Optional[PointCloud]]:
    """Batched :func:`reconstruct`; ``None`` marks an empty decode."""
    x1_hat = np.stack([codec.encode_flat(p) for p in partials])
    rngs = [_rng(s) for s in seeds]
    x1 = generate_latents(model_ft, x1_hat, cfg, rngs)
    out: list[Optional[PointCloud]] = []
    for x, rng in zip(x1, rngs):
        try:
            out.append(codec.decode_flat(x, seed=rng))
        except LatentError:
            out.append(None)
    return out


# --------------------------------------------------------------------------
# pair cache

def pairs_to_bytes(pairs: Sequence[RetargetPair]) -> bytes:
    if not pairs:
        raise RetargetError("cannot serialise an empty pair list")
    dim = pairs[0].x0.size
    head = PAIR_MAGIC + struct.pack("<HII", PAIR_VERSION, dim, len(pairs))
    body = head + b"".join(p.x0.astype("<f4").tobytes() + p.x1.astype("<f4").tobytes() for p in pairs)
    return body + struct.pack("<I", zlib.crc32(body))


def pairs_from_bytes(data: bytes) -> list[RetargetPair]:
    hsize = 4 + struct.calcsize("<HII")
    if len(data) < hsize + 4:
        raise RetargetError("truncated pair cache")
    if data[:4] != PAIR_MAGIC:
        raise RetargetError(f"bad magic {data[:4]!r}, expected {PAIR_MAGIC!r}")
    version, dim, count = struct.unpack_from("<HII", data, 4)
    if version != PAIR_VERSION:
        raise RetargetError(f"unsupported version {version} (this build reads {PAIR_VERSION})")
    need = hsize + 8 * dim * count + 4
    if len(data) != need:
        raise RetargetError(f"pair cache has {len(data)} bytes, expected {need} (truncated or padded)")
    (crc,) = struct.unpack_from("<I", data, need - 4)
    if crc != zlib.crc32(data[:need - 4]):
        raise RetargetError("pair cache checksum mismatch")
    arr = np.frombuffer(data, dtype="<f4", count=2 * dim * count, offset=hsize).reshape(count, 2, dim)
    return [RetargetPair(a[0].astype(np.float32), a[1].astype(np.float32)) for a in arr]


def save_pairs(path, pairs: Sequence[RetargetPair]) -> None:
    with open(path, "wb") as fh:
        fh.write(pairs_to_bytes(pairs))


def load_pairs(path) -> list[RetargetPair]:
    with open(path, "rb") as fh:
        return pairs_from_bytes(fh.read())
