"""Poisson (Bernoulli-per-step) spike encoding of images.

Unsigned mode maps raw intensities in [0, 255] to rates in [0, max_rate].
Signed mode is used for contrast-normalised/whitened images: each pixel
drives an excitatory (+1) or inhibitory (-1) neuron at a rate proportional to
its magnitude, normalised by the image's largest absolute pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod


@dataclass(frozen=True)
class EncoderConfig:
    max_rate: float  # Hz
    dt_ms: float = 1.0
    duration_ms: float = 25.0
    signed: bool = False
    stream_id: int = rng_mod.ENCODE

    def __post_init__(self):
        if self.max_rate < 0 or self.dt_ms <= 0:
            raise ValueError("max_rate must be >= 0 and dt_ms > 0")
        if self.max_rate * self.dt_ms / 1000.0 > 1.0:
            raise ValueError("max_rate * dt exceeds one spike per step")
        steps = self.duration_ms / self.dt_ms
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("duration must be an integer multiple of dt")

    @property
    def steps(self) -> int:
        return int(round(self.duration_ms / self.dt_ms))


def pixel_rate(pixel, max_abs, config: EncoderConfig):
    """Firing rate (Hz) for ``pixel``; the sign is carried separately.

    ``max_abs`` is the image's largest absolute pixel and only matters in
    signed mode.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    if not config.signed:
        return np.clip(pixel, 0.0, 255.0) / 255.0 * config.max_rate
    max_abs = np.asarray(max_abs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where(max_abs > 0, np.abs(pixel) / np.where(max_abs > 0, max_abs, 1.0), 0.0)
    return rate * config.max_rate


def spike_probabilities(images: np.ndarray, config: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-step spike probability and spike sign for each pixel of a batch."""
    images = np.asarray(images, dtype=np.float64)
    if config.signed:
        max_abs = np.abs(images).reshape(len(images), -1).max(axis=1)
        max_abs = max_abs.reshape((-1,) + (1,) * (images.ndim - 1))
        rate = pixel_rate(images, max_abs, config)
        sign = np.sign(images).astype(np.int8)
    else:
        rate = pixel_rate(images, None, config)
        sign = np.ones(images.shape, dtype=np.int8)
    return rate * config.dt_ms / 1000.0, sign


def encode_image(image: np.ndarray, config: EncoderConfig, seed: int, index: int) -> np.ndarray:
    """Spike train (T x C x H x W, int8) for one image.

    The draws come from the stream keyed by ``(seed, stream_id, index)`` so
    the result depends only on the image index, not on batching.
    """
    prob, sign = spike_probabilities(image[None], config)
    gen = rng_mod.stream(seed, config.stream_id, index)
    u = gen.random((config.steps,) + image.shape)
    return ((u < prob[0]) * sign[0]).astype(np.int8)


def poisson_encode(images: np.ndarray, config: EncoderConfig, seed: int,
                   indices=None) -> np.ndarray:
    """Encode a batch into a T x B x C x H x W int8 tensor in {-1, 0, +1}.

    ``indices`` are the global image indices used to key the random streams
    (default ``0..B-1``).
    """
    images = np.asarray(images)
    if indices is None:
        indices = range(len(images))
    out = np.empty((config.steps,) + images.shape, dtype=np.int8)
    for b, idx in enumerate(indices):
        out[:, b] = encode_image(images[b], config, seed, int(idx))
    return out
