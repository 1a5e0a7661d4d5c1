"""Hybrid probabilistic STDP for binary synapses.

Spike-timing differences are never stored explicitly: each pre-neuron keeps
an exponentially decaying trace that is reset to 1 when it fires, and the
trace sampled at a post-spike stands in for the positive timing difference
(large trace = short lag).  Likewise post-traces sampled at pre-spikes encode
negative lags.

A window configuration splits the positive trace axis into a near
(Hebbian) slot, a far (anti-Hebbian) slot and, for layout ``HB``, a dead zone
in between.  Excitatory pre-neurons potentiate in the near slot and depress in
the far slot; inhibitory pre-neurons use the mirrored rule.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layout(str, enum.Enum):
    HB = "HB"
    HB2 = "HB2"  # dead zone replaced by a wider potentiation window
    HB3 = "HB3"  # dead zone replaced by a wider depression window


class Decision(enum.IntEnum):
    NO_UPDATE = 0
    HEBB_POTENTIATE = 1
    ANTIHEBB_DEPRESS = 2
    HEBB_DEPRESS = 3
    ANTIHEBB_POTENTIATE = 4


_MIRROR = {
    Decision.NO_UPDATE: Decision.NO_UPDATE,
    Decision.HEBB_POTENTIATE: Decision.HEBB_DEPRESS,
    Decision.HEBB_DEPRESS: Decision.HEBB_POTENTIATE,
    Decision.ANTIHEBB_DEPRESS: Decision.ANTIHEBB_POTENTIATE,
    Decision.ANTIHEBB_POTENTIATE: Decision.ANTIHEBB_DEPRESS,
}
_MIRROR_TABLE = np.array([_MIRROR[Decision(i)] for i in range(len(Decision))], dtype=np.int8)

POTENTIATING = (Decision.HEBB_POTENTIATE, Decision.ANTIHEBB_POTENTIATE)
DEPRESSING = (Decision.HEBB_DEPRESS, Decision.ANTIHEBB_DEPRESS)


@dataclass(frozen=True)
class StdpWindowConfig:
    """Trace thresholds and switching probabilities for one pre-polarity.

    Field names follow the excitatory rule.  For an inhibitory window the same
    fields describe the mirrored windows: ``p_hebb_pot`` is the probability
    used in the near slot (where an inhibitory synapse is *depressed*), and so
    on.
    """

    pre_hebb_pot: float = 0.05
    pre_antihebb_dep: float = 0.005
    p_hebb_pot: float = 0.01
    p_antihebb_dep: float = 0.01
    post_hebb_dep: float = 1.0
    p_hebb_dep: float = 0.0
    layout: Layout = Layout.HB
    inhibitory: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))
        for name in ("pre_hebb_pot", "pre_antihebb_dep", "post_hebb_dep"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        for name in ("p_hebb_pot", "p_antihebb_dep", "p_hebb_dep"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.layout is Layout.HB and not self.pre_antihebb_dep < self.pre_hebb_pot:
            raise ValueError("layout HB needs pre_antihebb_dep < pre_hebb_pot")

    def mirrored(self) -> "StdpWindowConfig":
        return replace(self, inhibitory=not self.inhibitory)


# Window slots, independent of polarity.
NEAR, FAR, NEGATIVE, NONE = 1, 2, 3, 0


def positive_slot(trace, window: StdpWindowConfig):
    """Slot (NEAR/FAR/NONE) of pre-traces sampled at a post-spike."""
    t = np.asarray(trace, dtype=np.float64)
    if window.layout is Layout.HB:
        near = t >= window.pre_hebb_pot
        far = (t > 0) & (t <= window.pre_antihebb_dep)
    elif window.layout is Layout.HB2:
        near = t > window.pre_antihebb_dep
        far = (t > 0) & (t <= window.pre_antihebb_dep)
    else:
        near = t >= window.pre_hebb_pot
        far = (t > 0) & (t < window.pre_hebb_pot)
    return np.where(near, NEAR, np.where(far, FAR, NONE)).astype(np.int8)


def _slot_to_decision(slot, inhibitory: bool):
    table = np.array([Decision.NO_UPDATE, Decision.HEBB_POTENTIATE,
                      Decision.ANTIHEBB_DEPRESS, Decision.HEBB_DEPRESS], dtype=np.int8)
    decision = table[slot]
    return _MIRROR_TABLE[decision] if inhibitory else decision


def classify_excitatory(trace, window: StdpWindowConfig):
    """Decision for pre-traces sampled at a post-spike (positive lag)."""
    decision = _slot_to_decision(positive_slot(trace, window), False)
    return Decision(int(decision)) if np.ndim(decision) == 0 else decision


def classify_negative_window(trace, window: StdpWindowConfig):
    """Decision for post-traces sampled at a pre-spike (negative lag).

    Always NO_UPDATE when the negative window is disabled (``p_hebb_dep == 0``).
    """
    t = np.asarray(trace, dtype=np.float64)
    if window.p_hebb_dep == 0:
        slot = np.zeros(t.shape, dtype=np.int8)
    else:
        slot = np.where(t >= window.post_hebb_dep, NEGATIVE, NONE).astype(np.int8)
    decision = _slot_to_decision(slot, False)
    return Decision(int(decision)) if np.ndim(decision) == 0 else decision


def mirror_for_inhibitory(decision):
    """Swap potentiation and depression outcomes."""
    if isinstance(decision, Decision) or np.ndim(decision) == 0:
        return _MIRROR[Decision(int(decision))]
    return _MIRROR_TABLE[np.asarray(decision)]


def classify(trace, window: StdpWindowConfig):
    """Positive-lag decision with the window's polarity applied."""
    decision = _slot_to_decision(positive_slot(trace, window), window.inhibitory)
    return Decision(int(decision)) if np.ndim(decision) == 0 else decision


def switch_probability(decision, window: StdpWindowConfig):
    """Probability attached to ``decision`` under ``window``.

    For an inhibitory window the probability belongs to the (mirrored)
    timing slot, not to the decision label.
    """
    decision = np.asarray(decision)
    if window.inhibitory:
        decision = _MIRROR_TABLE[decision]
    table = np.array([0.0, window.p_hebb_pot, window.p_antihebb_dep,
                      window.p_hebb_dep, 0.0])
    return table[decision]


def stochastic_switch(bits, decision, window: StdpWindowConfig, uniforms):
    """Apply decisions to binary weights stored as bits (True = w_high).

    ``uniforms`` are draws in [0, 1), one per weight.  Potentiation sets the
    bit with the decision's probability, depression clears it.
    """
    bits = np.asarray(bits, dtype=bool)
    decision = np.asarray(decision)
    fire = np.asarray(uniforms) < switch_probability(decision, window)
    pot = fire & ((decision == Decision.HEBB_POTENTIATE) | (decision == Decision.ANTIHEBB_POTENTIATE))
    dep = fire & ((decision == Decision.HEBB_DEPRESS) | (decision == Decision.ANTIHEBB_DEPRESS))
    return (bits | pot) & ~dep


def step_traces(traces: np.ndarray, spikes: np.ndarray, dt_ms: float, tau_ms: float) -> np.ndarray:
    """Decay traces by ``exp(-dt/tau)`` then reset to 1 where the owner spiked."""
    if dt_ms <= 0:
        raise ValueError("dt must be positive")
    traces = traces * math.exp(-dt_ms / tau_ms)
    traces[np.asarray(spikes) != 0] = 1.0
    return traces


def split_polarity(spikes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Excitatory and inhibitory spike indicator planes of a signed map."""
    return spikes > 0, spikes < 0


def draw_map_dropout(n_maps: int, p_drop: float, gen: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask: True for maps that stay active this iteration."""
    if not 0 <= p_drop < 1:
        raise ValueError("p_drop must lie in [0, 1)")
    return gen.random(n_maps) >= p_drop


# --------------------------------------------------------------------------
# Mini-batch kernel update


def stride_grid(size: int, stride: int) -> np.ndarray:
    if stride < 1:
        raise ValueError("STDP stride must be >= 1")
    return np.arange(0, size, stride)


def averaged_pre_traces(pre_traces: np.ndarray, post_spikes: np.ndarray,
                        kernel: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean pre-trace patch seen by the spiking post-neurons of each map.

    ``pre_traces`` is B x I x H x W, ``post_spikes`` is B x J x (H-k+1) x
    (W-k+1).  Only post-neurons on the ``stride`` grid are considered.
    Patches are averaged over the spiking neurons of each (image, map), then
    over the images whose map had at least one such neuron.

    Returns the J x I x k x k averages and a (J,) mask of maps that had any
    spiking grid neuron (other rows are zero).
    """
    b, n_in, h, w = pre_traces.shape
    bj, n_out, ho, wo = post_spikes.shape
    if bj != b or ho != h - kernel + 1 or wo != w - kernel + 1:
        raise ValueError(
            f"shape mismatch: traces {pre_traces.shape}, spikes {post_spikes.shape}, k={kernel}")
    ys, xs = stride_grid(ho, stride), stride_grid(wo, stride)
    grid = post_spikes[:, :, ys][:, :, :, xs] != 0  # (B, J, gy, gx)
    counts = grid.sum(axis=(2, 3))  # (B, J)
    active = counts > 0
    n_active = active.sum(axis=0)  # (J,)
    out = np.zeros((n_out, n_in, kernel, kernel))
    if not n_active.any():
        return out, n_active > 0
    windows = sliding_window_view(pre_traces, (kernel, kernel), axis=(2, 3))
    # Patch sums accumulate in raster order over the grid, so the result is
    # bit-identical to a plain loop over spiking neurons.
    sums = np.zeros((b, n_out, n_in, kernel, kernel))
    for gy, y in enumerate(ys):
        for gx, x in enumerate(xs):
            bs, js = np.nonzero(grid[:, :, gy, gx])
            if len(bs):
                sums[bs, js] += windows[bs, :, y, x]
    means = sums / np.where(active, counts, 1)[:, :, None, None, None]
    for i in range(b):  # image-index order keeps the reduction deterministic
        out += np.where(active[i][:, None, None, None], means[i], 0.0)
    out /= np.maximum(n_active, 1)[:, None, None, None]
    return out, n_active > 0


def minibatch_stdp_update(bits: np.ndarray, exc_traces: np.ndarray, inh_traces: np.ndarray,
                          post_spikes: np.ndarray, stride: int,
                          exc_window: StdpWindowConfig, inh_window: StdpWindowConfig,
                          gen: np.random.Generator, keep=None) -> np.ndarray:
    """One HB-STDP update of a binary kernel bank (J x I x k x k bits).

    ``exc_traces``/``inh_traces`` are the pre-trace planes of excitatory and
    inhibitory pre-neurons; ``keep`` is the dropout keep-mask over output maps.
    Two uniform draws are taken per weight (excitatory plane first), always,
    so the stream position never depends on the data.
    """
    n_out, n_in, k, _ = bits.shape
    if keep is not None:
        post_spikes = post_spikes * np.asarray(keep, dtype=post_spikes.dtype)[None, :, None, None]
    uniforms = gen.random((2,) + bits.shape)
    if not post_spikes.any():
        return bits
    if exc_traces.shape[1] != n_in:
        raise ValueError("trace channels do not match kernel input maps")
    bits = bits.copy()
    for plane, (traces, window) in enumerate(((exc_traces, exc_window), (inh_traces, inh_window))):
        if not traces.any():
            continue
        avg, active = averaged_pre_traces(traces, post_spikes, k, stride)
        decision = classify(avg, window)
        decision[~active] = Decision.NO_UPDATE
        bits = stochastic_switch(bits, decision, window, uniforms[plane])
    return bits


def minibatch_stdp_update_float(values: np.ndarray, exc_traces: np.ndarray, inh_traces: np.ndarray,
                                post_spikes: np.ndarray, stride: int, learning_rate: float,
                                offset: float, keep=None) -> np.ndarray:
    """Additive trace STDP for the full-precision ablation.

    ``dw = lr * (avg_trace - offset)`` for excitatory pre-traces and the
    negation for inhibitory ones, only where a trace exists; clipped to
    [-1, 1].
    """
    k = values.shape[2]
    if keep is not None:
        post_spikes = post_spikes * np.asarray(keep, dtype=post_spikes.dtype)[None, :, None, None]
    if not post_spikes.any():
        return values
    values = values.astype(np.float64)
    for traces, sign in ((exc_traces, 1.0), (inh_traces, -1.0)):
        if not traces.any():
            continue
        avg, active = averaged_pre_traces(traces, post_spikes, k, stride)
        delta = np.where(avg > 0, sign * learning_rate * (avg - offset), 0.0)
        delta[~active] = 0.0
        values = values + delta
    return np.clip(values, -1.0, 1.0).astype(np.float32)
