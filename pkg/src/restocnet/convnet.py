"""Residual binary convolutional SNN: topology, simulation and training.

Each convolutional layer correlates signed input spike maps with a bank of
binary kernels (valid padding, stride 1) and drives LIF neurons.  Deeper
layers may receive residual spike maps that are channel-replicated,
centre-cropped, added to the direct input and clamped back to {-1, 0, +1}.

For inference every layer's spike maps are average-pooled (2 x 2), passed
through IF neurons and low-pass filtered; the resulting activations are the
classifier features.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng as rng_mod
from .data_io import LayerRecord
from .encoding import EncoderConfig, poisson_encode
from .neurons import IfPoolState, LifLayerState, adapt_threshold, if_pool_step, lif_step
from .plasticity import (StdpWindowConfig, draw_map_dropout, minibatch_stdp_update,
                         minibatch_stdp_update_float, step_traces)

# Encoder stream ids: activation estimation, and one per trained layer.
ACTIVATION_STREAM = rng_mod.ENCODE
TRAIN_STREAM_BASE = 100


@dataclass(frozen=True)
class ResidualSource:
    source: int  # 0 = network input, l = output of conv layer l (1-based)
    invert: bool = False


@dataclass
class ConvLayerSpec:
    maps: int
    kernel: int = 3
    residuals: tuple = ()
    exc_window: StdpWindowConfig = field(default_factory=StdpWindowConfig)
    inh_window: StdpWindowConfig = field(
        default_factory=lambda: StdpWindowConfig(inhibitory=True))
    beta_thresh: float = 6e-4
    alpha_init: float = 75.0
    stdp_rate_hz: float = 200.0
    train_start: int = 0
    train_count: int = 2000
    batch_size: int = 200
    stride: int = 5
    p_drop: float = 0.5
    t_stdp_ms: float = 25.0
    tau_pre_ms: float = 1.45
    tau_mem_ms: float = 9.5
    full_precision: bool = False
    fp_learning_rate: float = 0.01
    fp_offset: Optional[float] = None  # default: dead-zone midpoint


@dataclass
class NetworkTopology:
    input_shape: tuple  # (C, H, W)
    layers: list
    signed_input: bool = False
    dt_ms: float = 1.0
    pool: int = 2
    theta_pool: float = 0.80
    t_sim_ms: float = 100.0
    tau_lpf_ms: float = 99.5
    activation_rate_hz: float = 500.0
    hidden: tuple = ()
    n_classes: int = 10
    feature_layers: Optional[tuple] = None  # 1-based; None = every layer
    w_low: float = -1.0
    w_high: float = 1.0

    def layer_shapes(self) -> list:
        """(input (C,H,W), output (J,H',W')) for every conv layer."""
        shapes = []
        c, h, w = self.input_shape
        for spec in self.layers:
            ho, wo = h - spec.kernel + 1, w - spec.kernel + 1
            if ho < 1 or wo < 1:
                raise ValueError("feature maps shrink below the kernel size")
            shapes.append(((c, h, w), (spec.maps, ho, wo)))
            c, h, w = spec.maps, ho, wo
        return shapes

    def features(self) -> tuple:
        return tuple(self.feature_layers or range(1, len(self.layers) + 1))

    def feature_length(self) -> int:
        shapes = self.layer_shapes()
        total = 0
        for l in self.features():
            j, h, w = shapes[l - 1][1]
            total += j * (h // self.pool) * (w // self.pool)
        return total

    def validate(self):
        for l, spec in enumerate(self.layers, start=1):
            for r in spec.residuals:
                if not 0 <= r.source <= l - 2:
                    raise ValueError(
                        f"layer {l}: residual source {r.source} must precede its direct input")
        for l in self.features():
            if not 1 <= l <= len(self.layers):
                raise ValueError(f"feature layer {l} does not exist")


# --------------------------------------------------------------------------
# Building blocks


def binary_conv2d(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Valid, stride-1 correlation: B x I x H x W with J x I x k x k."""
    x = np.asarray(x, dtype=np.float32)
    kernels = np.asarray(kernels, dtype=np.float32)
    b, n_in, h, w = x.shape
    n_out, n_in_k, kh, kw = kernels.shape
    if n_in != n_in_k:
        raise ValueError(f"input has {n_in} maps, kernels expect {n_in_k}")
    ho, wo = h - kh + 1, w - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError("input smaller than kernel")
    if n_in * kh * kw <= 64:
        # im2col: one GEMM is faster when the patch is short.
        patches = sliding_window_view(x, (kh, kw), axis=(2, 3))
        cols = np.ascontiguousarray(patches.transpose(1, 4, 5, 0, 2, 3))
        out = kernels.reshape(n_out, -1) @ cols.reshape(n_in * kh * kw, -1)
        return out.reshape(n_out, b, ho, wo).transpose(1, 0, 2, 3)
    out = np.zeros((n_out, b, ho, wo), dtype=np.float32)
    for dy in range(kh):
        for dx in range(kw):
            out += np.tensordot(kernels[:, :, dy, dx], x[:, :, dy:dy + ho, dx:dx + wo],
                                axes=([1], [1]))
    return out.transpose(1, 0, 2, 3)


def centre_crop(maps: np.ndarray, h: int, w: int) -> np.ndarray:
    hs, ws = maps.shape[-2:]
    if hs < h or ws < w:
        raise ValueError(f"residual maps {hs}x{ws} smaller than direct path {h}x{w}")
    top, left = (hs - h) // 2, (ws - w) // 2
    return maps[..., top:top + h, left:left + w]


def residual_combine(direct: np.ndarray, sources: Sequence[tuple]) -> np.ndarray:
    """Add residual spike maps to the direct path and clamp to {-1, 0, +1}.

    ``sources`` holds ``(maps, invert)`` pairs.  Residual maps with fewer
    channels than the direct path are replicated cyclically (channel ``j``
    takes source channel ``j mod c``).
    """
    if not sources:
        return direct
    total = direct.astype(np.int16)
    n_direct = direct.shape[1]
    h, w = direct.shape[-2:]
    for maps, invert in sources:
        c = maps.shape[1]
        if c > n_direct:
            raise ValueError(f"residual has {c} maps, more than the direct path's {n_direct}")
        if c < n_direct:
            maps = maps[:, np.arange(n_direct) % c]
        maps = centre_crop(maps, h, w).astype(np.int16)
        total = total - maps if invert else total + maps
    return np.sign(total).astype(np.int8)


def avg_pool_input(spikes: np.ndarray, size: int = 2) -> np.ndarray:
    """Non-overlapping ``size`` x ``size`` window mean; odd edges are dropped."""
    h, w = spikes.shape[-2:]
    hp, wp = h // size, w // size
    total = np.zeros(spikes.shape[:-2] + (hp, wp), dtype=np.float32)
    for dy in range(size):
        for dx in range(size):
            total += spikes[..., dy:hp * size:size, dx:wp * size:size]
    return total / np.float32(size * size)


def lpf_activation(spike_train: np.ndarray, dt_ms: float = 1.0, tau_ms: float = 99.5) -> np.ndarray:
    """Low-pass filtered spike count divided by the period (per ms).

    ``spike_train`` has time on axis 0.
    """
    decay = math.exp(-dt_ms / tau_ms)
    lpf = np.zeros(spike_train.shape[1:], dtype=np.float64)
    for t in range(spike_train.shape[0]):
        lpf = decay * lpf + spike_train[t]
    return lpf / (spike_train.shape[0] * dt_ms)


def p_high(alpha: float, in_maps: int, out_maps: int, kernel: int) -> float:
    """Initial probability of the high state; fans count kernel area."""
    return math.sqrt(alpha / (in_maps * kernel * kernel + out_maps * kernel * kernel))


def init_kernels(spec: ConvLayerSpec, in_maps: int, gen: np.random.Generator) -> np.ndarray:
    """Random binary bank (bits, True = w_high) with P(high) = p_high."""
    if spec.alpha_init < 0:
        raise ValueError("alpha must be non-negative")
    p = p_high(spec.alpha_init, in_maps, spec.maps, spec.kernel)
    if p > 1:
        raise ValueError(f"p_high = {p:.3f} > 1; alpha too large for this layer")
    return gen.random((spec.maps, in_maps, spec.kernel, spec.kernel)) < p


# --------------------------------------------------------------------------
# Simulation


class _FrozenStack:
    """Step-by-step simulation of trained layers for one batch."""

    def __init__(self, topology: NetworkTopology, layers: Sequence[LayerRecord], batch: int):
        self.topology = topology
        self.specs = topology.layers[:len(layers)]
        self.weights = [rec.weights() for rec in layers]
        shapes = topology.layer_shapes()
        self.states = [LifLayerState.zeros((batch,) + shapes[l][1], rec.thresholds,
                                           self.specs[l].tau_mem_ms, np.float32)
                       for l, rec in enumerate(layers)]

    def layer_input(self, x: np.ndarray, outs: list, layer: int) -> np.ndarray:
        """Input maps of 0-based ``layer`` given this step's earlier outputs."""
        if layer == 0:
            return x
        spec = self.topology.layers[layer]
        sources = [(x if r.source == 0 else outs[r.source - 1], r.invert) for r in spec.residuals]
        return residual_combine(outs[layer - 1], sources)

    def step(self, x: np.ndarray) -> list:
        outs = []
        for l, (w, state) in enumerate(zip(self.weights, self.states)):
            current = binary_conv2d(self.layer_input(x, outs, l), w)
            outs.append(lif_step(state, current, self.topology.dt_ms))
        return outs


def _check_trained(topology: NetworkTopology, layers: Sequence[LayerRecord], needed: int):
    if len(layers) < needed:
        raise ValueError(f"layer {len(layers) + 1} is untrained")
    shapes = topology.layer_shapes()
    for l in range(needed):
        expected = (topology.layers[l].maps, shapes[l][0][0],
                    topology.layers[l].kernel, topology.layers[l].kernel)
        if tuple(layers[l].shape) != expected:
            raise ValueError(f"layer {l + 1} kernels {layers[l].shape} != topology {expected}")


def _chunks(n: int, workers: int) -> list:
    workers = max(1, min(workers, n)) if n else 1
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [(bounds[i], bounds[i + 1]) for i in range(workers) if bounds[i + 1] > bounds[i]]


def _map_chunks(fn, n: int, workers: int, args: tuple) -> list:
    chunks = _chunks(n, workers)
    if workers <= 1 or len(chunks) <= 1:
        return [fn(*args, lo, hi) for lo, hi in chunks]
    with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
        futures = [pool.submit(fn, *args, lo, hi) for lo, hi in chunks]
        return [f.result() for f in futures]


def _forward_chunk(topology, layers, images, indices, seed, lo, hi):
    config = EncoderConfig(topology.activation_rate_hz, topology.dt_ms, topology.t_sim_ms,
                           topology.signed_input, ACTIVATION_STREAM)
    batch = hi - lo
    spikes_in = poisson_encode(images[lo:hi], config, seed, indices[lo:hi])
    stack = _FrozenStack(topology, layers, batch)
    shapes = topology.layer_shapes()
    features = topology.features()
    pools, lpfs = {}, {}
    for l in features:
        j, h, w = shapes[l - 1][1]
        pshape = (batch, j, h // topology.pool, w // topology.pool)
        pools[l] = IfPoolState.zeros(pshape, topology.theta_pool, np.float32)
        lpfs[l] = np.zeros(pshape)
    decay = math.exp(-topology.dt_ms / topology.tau_lpf_ms)
    for t in range(config.steps):
        outs = stack.step(spikes_in[t])
        for l in features:
            pooled = if_pool_step(pools[l], avg_pool_input(outs[l - 1], topology.pool))
            lpfs[l] = decay * lpfs[l] + pooled
    period = config.steps * topology.dt_ms
    return np.concatenate([lpfs[l].reshape(batch, -1) / period for l in features], axis=1)


def forward_activations(topology: NetworkTopology, layers: Sequence[LayerRecord],
                        images: np.ndarray, seed: int, indices=None,
                        workers: int = 1, chunk: int = 256) -> np.ndarray:
    """Pooled, low-pass filtered spiking activations (N x features, per ms).

    Images are processed in chunks of ``chunk``; each image's spike train is
    keyed by its index so the output is independent of ``workers``.
    """
    _check_trained(topology, layers, max(topology.features()))
    images = np.asarray(images)
    indices = np.arange(len(images)) if indices is None else np.asarray(indices)
    needed = max(topology.features())
    layers = list(layers[:needed])
    topo = _truncate(topology, needed)
    out = np.zeros((len(images), topology.feature_length()), dtype=np.float64)
    for start in range(0, len(images), chunk * max(1, workers)):
        stop = min(len(images), start + chunk * max(1, workers))
        parts = _map_chunks(_forward_chunk, stop - start, workers,
                            (topo, layers, images[start:stop], indices[start:stop], seed))
        out[start:stop] = np.concatenate(parts, axis=0)
    return out


def forward_pass(topology, layers, image, seed, index=0) -> np.ndarray:
    """Activation vector of a single image."""
    return forward_activations(topology, layers, image[None], seed, [index])[0]


def _truncate(topology: NetworkTopology, n_layers: int) -> NetworkTopology:
    return replace(topology, layers=list(topology.layers[:n_layers]))


# --------------------------------------------------------------------------
# Layer-wise training


def _input_chunk(topology, layers, layer, config, images, indices, seed, lo, hi):
    """T x b x I x H x W input spikes of 0-based ``layer`` for images lo:hi."""
    spikes_in = poisson_encode(images[lo:hi], config, seed, indices[lo:hi])
    if layer == 0:
        return spikes_in
    stack = _FrozenStack(topology, layers, hi - lo)
    seq = []
    for t in range(config.steps):
        outs = stack.step(spikes_in[t])
        seq.append(stack.layer_input(spikes_in[t], outs, layer))
    return np.stack(seq)


def layer_input_sequence(topology, layers, layer, config, images, indices, seed, workers=1):
    parts = _map_chunks(_input_chunk, len(images), workers,
                        (topology, list(layers), layer, config, images, indices, seed))
    return np.concatenate(parts, axis=1)


def train_conv_layer(topology: NetworkTopology, layers: Sequence[LayerRecord], layer_id: int,
                     images: np.ndarray, seed: int, indices=None, workers: int = 1,
                     random_only: bool = False, progress=None) -> LayerRecord:
    """Train conv layer ``layer_id`` (1-based) on ``images`` with HB-STDP.

    ``layers`` are the already-trained records of layers ``1..layer_id-1``;
    they are never modified.  With ``random_only`` the initial kernels and
    zero thresholds are returned (the random-kernel ablation).
    """
    l = layer_id - 1
    if len(layers) != l:
        if len(layers) > l:
            raise ValueError(f"layer {layer_id} is already trained")
        raise ValueError(f"layer {len(layers) + 1} must be trained before layer {layer_id}")
    _check_trained(topology, layers, l)
    spec = topology.layers[l]
    (n_in, h, w), (n_out, ho, wo) = topology.layer_shapes()[l]
    bits = init_kernels(spec, n_in, rng_mod.stream(seed, rng_mod.INIT, layer_id))
    thresholds = np.zeros(n_out, dtype=np.float32)
    values = None
    if spec.full_precision:
        values = np.where(bits, 1.0, -1.0).astype(np.float32)
    record = lambda: LayerRecord(None if spec.full_precision else bits, thresholds,
                                 topology.w_low, topology.w_high, values)
    images = np.asarray(images)
    if random_only or len(images) == 0:
        return record()
    indices = np.arange(len(images)) if indices is None else np.asarray(indices)
    config = EncoderConfig(spec.stdp_rate_hz, topology.dt_ms, spec.t_stdp_ms,
                           topology.signed_input, TRAIN_STREAM_BASE + layer_id)
    offset = spec.fp_offset
    if offset is None:
        offset = 0.5 * (spec.exc_window.pre_hebb_pot + spec.exc_window.pre_antihebb_dep)
    n_iter = -(-len(images) // spec.batch_size)
    for it in range(n_iter):
        lo, hi = it * spec.batch_size, min(len(images), (it + 1) * spec.batch_size)
        keep = draw_map_dropout(n_out, spec.p_drop,
                                rng_mod.stream(seed, rng_mod.DROPOUT, layer_id, it))
        inputs = layer_input_sequence(topology, layers, l, config, images[lo:hi],
                                      indices[lo:hi], seed, workers)
        batch = hi - lo
        state = LifLayerState.zeros((batch, n_out, ho, wo), thresholds, spec.tau_mem_ms,
                                    np.float32)
        exc = np.zeros((batch, n_in, h, w))
        inh = np.zeros((batch, n_in, h, w))
        counts = np.zeros(n_out, dtype=np.int64)
        kernels = values if spec.full_precision else np.where(bits, topology.w_high, topology.w_low)
        for t in range(config.steps):
            x = inputs[t]
            exc = step_traces(exc, x > 0, topology.dt_ms, spec.tau_pre_ms)
            inh = step_traces(inh, x < 0, topology.dt_ms, spec.tau_pre_ms)
            spikes = lif_step(state, binary_conv2d(x, kernels), topology.dt_ms)
            spikes *= keep[None, :, None, None].astype(np.int8)
            counts += spikes.sum(axis=(0, 2, 3))
            if spec.full_precision:
                values = minibatch_stdp_update_float(values, exc, inh, spikes, spec.stride,
                                                     spec.fp_learning_rate, offset)
                kernels = values
            else:
                gen = rng_mod.stream(seed, rng_mod.STDP, layer_id, it, t)
                bits = minibatch_stdp_update(bits, exc, inh, spikes, spec.stride,
                                             spec.exc_window, spec.inh_window, gen)
                kernels = np.where(bits, topology.w_high, topology.w_low)
        thresholds = adapt_threshold(thresholds, counts, ho * wo, spec.beta_thresh)
        if progress is not None:
            progress(it + 1, n_iter, thresholds)
    return record()
