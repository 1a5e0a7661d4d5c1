"""Two-layer binary fully-connected SNN with lateral inhibition.

784 Poisson inputs feed N excitatory LIF neurons through binary {0, 1}
synapses.  Each excitatory neuron drives its own inhibitory partner, which on
the next step lowers the potential of every *other* excitatory neuron.
Adaptive thresholds (homeostasis) grow with each spike and decay very slowly.

Input-to-excitatory weights are learned with the excitatory HB-STDP rule
(or one of its two ablation layouts); after training, neurons are tagged
with the class they respond to most and test images are classified by the
tag group with the highest mean spike count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .encoding import EncoderConfig, spike_probabilities
from .plasticity import FAR, NEAR, Layout, StdpWindowConfig, positive_slot


def layout_window(layout: Layout | str = Layout.HB) -> StdpWindowConfig:
    return StdpWindowConfig(pre_hebb_pot=0.85, pre_antihebb_dep=0.10, p_hebb_pot=0.08,
                            p_antihebb_dep=0.06, post_hebb_dep=0.80, p_hebb_dep=0.005,
                            layout=Layout(layout))


@dataclass
class FcsnnConfig:
    n_neurons: int = 400
    n_inputs: int = 784
    tau_mem_ms: float = 100.0
    refractory_ms: float = 5.0
    v_rest: float = 0.0
    v_reset: float = 0.0
    threshold: float = 1.0
    theta_plus: float = 0.02
    tau_theta_ms: float = 1e7
    inhibition: float = 1.0
    input_gain: float = 0.02
    adaptive: bool = True
    window: StdpWindowConfig = field(default_factory=layout_window)
    tau_pre_ms: float = 20.0
    tau_post_ms: float = 20.0
    max_rate: float = 63.75
    dt_ms: float = 0.5
    duration_ms: float = 350.0
    p_init: float = 0.5
    rest_ms: float = 150.0
    train_count: int = 3500

    def __post_init__(self):
        if self.n_neurons <= 0:
            raise ValueError("n_neurons must be positive")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.max_rate, self.dt_ms, self.duration_ms, False,
                             rng_mod.FCSNN_ENCODE)


@dataclass
class FcsnnState:
    weights: np.ndarray  # (n_inputs, N) bool
    theta: np.ndarray  # (N,) adaptive threshold offsets
    v: np.ndarray = None
    refractory: np.ndarray = None
    pre_trace: np.ndarray = None
    post_trace: np.ndarray = None
    last_spikes: np.ndarray = None

    def reset_presentation(self, config: FcsnnConfig):
        """Clear neuron state; traces only decay over the rest period."""
        n = self.weights.shape[1]
        self.v = np.full(n, config.v_rest)
        self.refractory = np.zeros(n, dtype=np.int64)
        self.last_spikes = np.zeros(n, dtype=bool)
        if self.pre_trace is None:
            self.pre_trace = np.zeros(self.weights.shape[0])
            self.post_trace = np.zeros(n)
        else:
            self.pre_trace *= math.exp(-config.rest_ms / config.tau_pre_ms)
            self.post_trace *= math.exp(-config.rest_ms / config.tau_post_ms)


def init_state(config: FcsnnConfig, seed: int) -> FcsnnState:
    gen = rng_mod.stream(seed, rng_mod.FCSNN_INIT)
    weights = gen.random((config.n_inputs, config.n_neurons)) < config.p_init
    state = FcsnnState(weights, np.zeros(config.n_neurons))
    state.reset_presentation(config)
    return state


def simulate_step(state: FcsnnState, input_spikes: np.ndarray, config: FcsnnConfig,
                  learn: bool = False, gen: np.random.Generator | None = None) -> np.ndarray:
    """Advance one time step; returns the excitatory spike indicator (bool, N).

    With ``learn`` the STDP rule and threshold adaptation are active and
    ``gen`` supplies the switching draws.
    """
    window = config.window
    dt = config.dt_ms
    pre_idx = np.flatnonzero(input_spikes)
    state.pre_trace *= math.exp(-dt / config.tau_pre_ms)
    state.post_trace *= math.exp(-dt / config.tau_post_ms)

    # Negative window: a pre-spike after a recent post-spike depresses.
    if learn and window.p_hebb_dep > 0 and len(pre_idx):
        recent = np.flatnonzero(state.post_trace >= window.post_hebb_dep)
        if len(recent):
            u = gen.random((len(pre_idx), len(recent)))
            block = state.weights[np.ix_(pre_idx, recent)]
            state.weights[np.ix_(pre_idx, recent)] = block & ~(u < window.p_hebb_dep)
    state.pre_trace[pre_idx] = 1.0

    # Membrane update; inhibition from the previous step excludes the source.
    n_prev = int(state.last_spikes.sum())
    inhibition = config.inhibition * (n_prev - state.last_spikes)
    drive = state.weights[pre_idx].sum(axis=0) * config.input_gain if len(pre_idx) else 0.0
    decay = math.exp(-dt / config.tau_mem_ms)
    v = config.v_rest + (state.v - config.v_rest) * decay + drive - inhibition
    active = state.refractory <= 0
    state.v = np.where(active, v, config.v_reset)
    state.refractory -= 1

    if config.adaptive and learn:
        state.theta *= math.exp(-dt / config.tau_theta_ms)
    spikes = active & (state.v > config.threshold + state.theta)
    if spikes.any():
        state.v[spikes] = config.v_reset
        state.refractory[spikes] = int(round(config.refractory_ms / dt))
        if config.adaptive and learn:
            state.theta[spikes] += config.theta_plus
        if learn:
            post_idx = np.flatnonzero(spikes)
            slot = positive_slot(state.pre_trace, window)
            u = gen.random((config.n_inputs, len(post_idx)))
            cols = state.weights[:, post_idx]
            pot = (slot == NEAR)[:, None] & (u < window.p_hebb_pot)
            dep = (slot == FAR)[:, None] & (u < window.p_antihebb_dep)
            state.weights[:, post_idx] = (cols | pot) & ~dep
        state.post_trace[spikes] = 1.0
    state.last_spikes = spikes
    return spikes


def present(state: FcsnnState, image: np.ndarray, config: FcsnnConfig, seed: int, index: int,
            learn: bool = False) -> np.ndarray:
    """Present one 28 x 28 image for the full period; returns spike counts."""
    prob, _ = spike_probabilities(np.asarray(image, dtype=np.float64).reshape(1, -1),
                                  config.encoder)
    prob = prob[0]
    enc = rng_mod.stream(seed, rng_mod.FCSNN_ENCODE, index, int(learn))
    stdp = rng_mod.stream(seed, rng_mod.FCSNN_STDP, index) if learn else None
    state.reset_presentation(config)
    counts = np.zeros(state.weights.shape[1], dtype=np.int64)
    for _ in range(config.encoder.steps):
        spikes_in = enc.random(config.n_inputs) < prob
        counts += simulate_step(state, spikes_in, config, learn, stdp)
    return counts


def train_fcsnn(config: FcsnnConfig, images: np.ndarray, seed: int,
                progress=None) -> FcsnnState:
    """Unsupervised training: one presentation per pattern, in order."""
    state = init_state(config, seed)
    for i, image in enumerate(images):
        present(state, image, config, seed, i, learn=True)
        if progress is not None:
            progress(i + 1, len(images))
    return state


def _count_chunk(weights, theta, config, images, offset, seed, lo, hi):
    rows = []
    for i in range(lo, hi):
        # Fresh state per image: responses must not depend on chunking.
        state = FcsnnState(weights, theta.copy())
        rows.append(present(state, images[i], config, seed, offset + i))
    return np.stack(rows)


def response_counts(state: FcsnnState, config: FcsnnConfig, images: np.ndarray, seed: int,
                    offset: int = 0, workers: int = 1) -> np.ndarray:
    """Spike counts (images x N) with plasticity off; parallel over images."""
    n = len(images)
    if n == 0:
        return np.zeros((0, state.weights.shape[1]), dtype=np.int64)
    args = (state.weights, state.theta, config, images, offset, seed)
    if workers <= 1:
        return _count_chunk(*args, 0, n)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_count_chunk, *args, bounds[i], bounds[i + 1])
                   for i in range(workers) if bounds[i + 1] > bounds[i]]
        return np.concatenate([f.result() for f in futures])


@dataclass
class NeuronTagging:
    tags: np.ndarray  # (N,) class id, -1 for neurons that never spiked
    n_classes: int = 10

    def groups(self) -> dict:
        return {c: np.flatnonzero(self.tags == c) for c in range(self.n_classes)}


def tag_from_counts(counts: np.ndarray, labels: np.ndarray, n_classes: int = 10) -> NeuronTagging:
    """Tag each neuron with the class that made it spike most (lowest id on ties)."""
    per_class = np.zeros((n_classes, counts.shape[1]), dtype=np.int64)
    np.add.at(per_class, np.asarray(labels), counts)
    tags = per_class.argmax(axis=0)
    tags[per_class.sum(axis=0) == 0] = -1
    return NeuronTagging(tags, n_classes)


def tag_neurons(state, config, images, labels, seed, offset=0, workers=1) -> NeuronTagging:
    counts = response_counts(state, config, images, seed, offset, workers)
    return tag_from_counts(counts, labels)


def predict_from_counts(counts: np.ndarray, tagging: NeuronTagging) -> np.ndarray:
    """Class with the highest mean group spike count, per row of ``counts``.

    Untagged neurons are ignored; classes without neurons never win; rows
    with no spikes at all fall back to class 0.
    """
    counts = np.atleast_2d(counts)
    scores = np.full((len(counts), tagging.n_classes), -1.0)
    for c, members in tagging.groups().items():
        if len(members):
            scores[:, c] = counts[:, members].mean(axis=1)
    pred = scores.argmax(axis=1)
    pred[counts.sum(axis=1) == 0] = 0
    return pred


def predict(state, tagging, config, image, seed, index=0) -> int:
    counts = present(state, image, config, seed, index)
    return int(predict_from_counts(counts[None], tagging)[0])
