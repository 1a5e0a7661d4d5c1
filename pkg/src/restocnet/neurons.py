"""Discrete-time LIF (convolutional maps) and IF (pooling) neurons.

Time is in milliseconds throughout.  The homogeneous part of the membrane
equation is integrated exactly (``V * exp(-dt/tau)``) and the post-synaptic
current is added as an impulse every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class LifLayerState:
    v: np.ndarray  # (B, J, H, W)
    thresholds: np.ndarray  # (J,) float32, shared across a map
    tau_mem_ms: float = 9.5

    @classmethod
    def zeros(cls, shape, thresholds, tau_mem_ms=9.5, dtype=np.float64):
        return cls(np.zeros(shape, dtype=dtype),
                   np.asarray(thresholds, dtype=np.float32), tau_mem_ms)

    def clear(self):
        self.v[...] = 0.0


def lif_step(state: LifLayerState, current: np.ndarray, dt_ms: float = 1.0) -> np.ndarray:
    """Advance ``state`` one step in place and return the {0, 1} spike map."""
    if dt_ms <= 0:
        raise ValueError("dt must be positive")
    state.v *= math.exp(-dt_ms / state.tau_mem_ms)
    state.v += current
    shape = (1, -1) + (1,) * (state.v.ndim - 2)
    spikes = state.v > state.thresholds.reshape(shape)
    np.multiply(state.v, ~spikes, out=state.v)
    return spikes.view(np.int8)


@dataclass
class IfPoolState:
    v: np.ndarray
    theta: float = 0.80

    @classmethod
    def zeros(cls, shape, theta=0.80, dtype=np.float64):
        return cls(np.zeros(shape, dtype=dtype), theta)


def if_pool_step(state: IfPoolState, drive: np.ndarray) -> np.ndarray:
    """Integrate ``drive`` without leak; spike (+1) above ``theta`` and reset."""
    state.v += drive
    spikes = state.v > state.theta
    np.multiply(state.v, ~spikes, out=state.v)
    return spikes.view(np.int8)


def adapt_threshold(threshold, spike_count, map_size: int, beta: float):
    """Raise a map threshold by ``beta * spike_count / map_size``.

    ``spike_count`` is the map's spike total over the mini-batch (and all
    presentation steps); thresholds stay float32 so checkpoints store them
    exactly.
    """
    if map_size <= 0:
        raise ValueError("map size must be positive")
    if np.any(np.asarray(spike_count) < 0):
        raise ValueError("spike counts must be non-negative")
    delta = beta * np.asarray(spike_count, dtype=np.float64) / map_size
    return (np.asarray(threshold, dtype=np.float64) + delta).astype(np.float32)
