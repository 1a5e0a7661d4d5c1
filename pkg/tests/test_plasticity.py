import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restocnet.plasticity import (
    Decision,
    Layout,
    StdpWindowConfig,
    averaged_pre_traces,
    classify,
    classify_excitatory,
    classify_negative_window,
    draw_map_dropout,
    minibatch_stdp_update,
    minibatch_stdp_update_float,
    mirror_for_inhibitory,
    split_polarity,
    step_traces,
    stochastic_switch,
    switch_probability,
)

TAU = 1.45
EXC = StdpWindowConfig(pre_hebb_pot=0.05, pre_antihebb_dep=0.005, p_hebb_pot=0.06, p_antihebb_dep=0.08)


def trace_after(lag_steps, dt=1.0, tau=TAU):
    """Pre-trace seen by a post-spike ``lag_steps`` steps after the pre-spike."""
    trace = np.zeros(1)
    trace = step_traces(trace, np.array([1]), dt, tau)
    for _ in range(lag_steps):
        trace = step_traces(trace, np.array([0]), dt, tau)
    return float(trace[0])


def brute_average(traces, post, k, stride):
    """Loop-by-loop enumeration of spiking grid neurons and their patches."""
    b, n_in, _, _ = traces.shape
    _, n_out, ho, wo = post.shape
    out = np.zeros((n_out, n_in, k, k))
    active = np.zeros(n_out, dtype=bool)
    for j in range(n_out):
        means = []
        for i in range(b):
            total, count = np.zeros((n_in, k, k)), 0
            for y in range(0, ho, stride):
                for x in range(0, wo, stride):
                    if post[i, j, y, x]:
                        total = total + traces[i, :, y:y + k, x:x + k]
                        count += 1
            if count:
                means.append(total / count)
        if means:
            acc = np.zeros((n_in, k, k))
            for m in means:
                acc = acc + m
            out[j] = acc / len(means)
            active[j] = True
    return out, active


class TestTraces:
    def test_reset_and_decay(self):
        t = step_traces(np.zeros(3), np.array([1, 0, 0]), 1.0, TAU)
        assert t.tolist() == [1.0, 0.0, 0.0]
        t = step_traces(t, np.array([0, 0, 1]), 1.0, TAU)
        assert t[0] == pytest.approx(math.exp(-1 / TAU), abs=1e-15)
        assert t[2] == 1.0

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            step_traces(np.zeros(1), np.zeros(1), 0.0, TAU)

    def test_split_polarity(self):
        exc, inh = split_polarity(np.array([1, 0, -1]))
        assert exc.tolist() == [True, False, False]
        assert inh.tolist() == [False, False, True]


class TestClassification:
    @pytest.mark.parametrize("trace,expected", [
        (1.0, Decision.HEBB_POTENTIATE),
        (0.05, Decision.HEBB_POTENTIATE),
        (0.02, Decision.NO_UPDATE),
        (0.005, Decision.ANTIHEBB_DEPRESS),
        (1e-6, Decision.ANTIHEBB_DEPRESS),
        (0.0, Decision.NO_UPDATE),
    ])
    def test_hb_windows(self, trace, expected):
        assert classify_excitatory(trace, EXC) == expected

    def test_hb2_fills_dead_zone_with_potentiation(self):
        w = StdpWindowConfig(layout=Layout.HB2)
        assert classify(0.02, w) == Decision.HEBB_POTENTIATE
        assert classify(0.004, w) == Decision.ANTIHEBB_DEPRESS

    def test_hb3_fills_dead_zone_with_depression(self):
        w = StdpWindowConfig(layout=Layout.HB3)
        assert classify(0.02, w) == Decision.ANTIHEBB_DEPRESS
        assert classify(0.06, w) == Decision.HEBB_POTENTIATE

    def test_negative_window(self):
        on = StdpWindowConfig(post_hebb_dep=0.8, p_hebb_dep=0.005)
        assert classify_negative_window(0.85, on) == Decision.HEBB_DEPRESS
        assert classify_negative_window(0.5, on) == Decision.NO_UPDATE
        off = StdpWindowConfig(post_hebb_dep=0.8, p_hebb_dep=0.0)
        assert classify_negative_window(0.85, off) == Decision.NO_UPDATE

    def test_inhibitory_mirror(self):
        inh = EXC.mirrored()
        assert classify(0.9, inh) == Decision.HEBB_DEPRESS
        assert classify(0.001, inh) == Decision.ANTIHEBB_POTENTIATE
        assert classify(0.02, inh) == Decision.NO_UPDATE
        # The probability stays with the timing slot.
        assert switch_probability(Decision.HEBB_DEPRESS, inh) == EXC.p_hebb_pot
        assert switch_probability(Decision.ANTIHEBB_POTENTIATE, inh) == EXC.p_antihebb_dep

    @given(st.floats(0.0, 1.0), st.sampled_from(list(Layout)))
    def test_mirror_is_involution(self, trace, layout):
        w = StdpWindowConfig(layout=layout)
        d = classify(trace, w)
        assert mirror_for_inhibitory(mirror_for_inhibitory(d)) == d
        assert classify(trace, w.mirrored()) == mirror_for_inhibitory(d)

    @pytest.mark.parametrize("kwargs", [
        {"pre_hebb_pot": 0.0},
        {"pre_hebb_pot": 1.5},
        {"p_hebb_pot": -0.1},
        {"p_antihebb_dep": 1.1},
        {"pre_hebb_pot": 0.01, "pre_antihebb_dep": 0.02},
    ])
    def test_invalid_windows(self, kwargs):
        with pytest.raises(ValueError):
            StdpWindowConfig(**kwargs)


class TestLagWindows:
    @pytest.mark.parametrize("lag", range(1, 26))
    def test_lag_classification(self, lag):
        d = classify_excitatory(trace_after(lag), EXC)
        if lag <= 4:
            assert d == Decision.HEBB_POTENTIATE
        elif lag >= 8:
            assert d == Decision.ANTIHEBB_DEPRESS
        else:
            assert d == Decision.NO_UPDATE

    @pytest.mark.parametrize("lag", [5, 6, 7])
    def test_dead_zone_never_switches(self, lag):
        rng = np.random.default_rng(lag)
        w = StdpWindowConfig(p_hebb_pot=1.0, p_antihebb_dep=1.0)
        bits = rng.random(1000) < 0.5
        for window in (w, w.mirrored()):
            d = classify(np.full(1000, trace_after(lag)), window)
            assert np.array_equal(stochastic_switch(bits, d, window, rng.random(1000)), bits)


class TestSwitching:
    def test_certain_switch(self):
        w = StdpWindowConfig(p_hebb_pot=1.0, p_antihebb_dep=1.0)
        bits = np.array([False, True, False, True])
        d = np.array([Decision.HEBB_POTENTIATE, Decision.HEBB_POTENTIATE,
                      Decision.ANTIHEBB_DEPRESS, Decision.ANTIHEBB_DEPRESS])
        out = stochastic_switch(bits, d, w, np.full(4, 0.999))
        assert out.tolist() == [True, True, False, False]

    def test_zero_probability_is_inert(self):
        w = StdpWindowConfig(p_hebb_pot=0.0, p_antihebb_dep=0.0)
        bits = np.array([False, True])
        d = np.array([Decision.HEBB_POTENTIATE, Decision.ANTIHEBB_DEPRESS])
        assert stochastic_switch(bits, d, w, np.zeros(2)).tolist() == [False, True]

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50)
    def test_closure(self, seed):
        rng = np.random.default_rng(seed)
        w = StdpWindowConfig(p_hebb_pot=rng.random(), p_antihebb_dep=rng.random(),
                             inhibitory=bool(rng.integers(2)))
        bits = rng.random(200) < 0.5
        d = classify(rng.random(200) ** 4, w)
        out = stochastic_switch(bits, d, w, rng.random(200))
        assert out.dtype == bool and out.shape == bits.shape

    @pytest.mark.parametrize("p", [0.005, 0.06])
    def test_switch_rate(self, p):
        n = 100_000
        w = StdpWindowConfig(p_hebb_pot=p)
        out = stochastic_switch(np.zeros(n, bool), np.full(n, Decision.HEBB_POTENTIATE), w,
                                np.random.default_rng(7).random(n))
        assert abs(out.mean() - p) <= 3 * math.sqrt(p * (1 - p) / n)


class TestDropout:
    def test_no_dropout(self):
        assert draw_map_dropout(10, 0.0, np.random.default_rng(0)).all()

    def test_rate(self):
        keep = draw_map_dropout(10_000, 0.5, np.random.default_rng(1))
        assert abs(keep.mean() - 0.5) <= 3 * math.sqrt(0.25 / 10_000)

    def test_rejects_bad_probability(self):
        with pytest.raises(ValueError):
            draw_map_dropout(4, 1.0, np.random.default_rng(0))


def random_instance(rng, dyadic=True):
    b = int(rng.integers(1, 3))
    n_in, n_out, k = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
    h = w = int(rng.integers(k, 7))
    if dyadic:
        traces = rng.integers(0, 1025, size=(b, n_in, h, w)) / 1024.0
    else:
        traces = rng.random((b, n_in, h, w))
    post = (rng.random((b, n_out, h - k + 1, w - k + 1)) < 0.3).astype(np.int8)
    return traces, post, k, int(rng.integers(1, 4))


class TestMinibatchAverage:
    @pytest.mark.parametrize("seed", range(100))
    @pytest.mark.parametrize("dyadic", [True, False])
    def test_matches_enumeration_exactly(self, seed, dyadic):
        traces, post, k, stride = random_instance(np.random.default_rng(seed), dyadic)
        got, active = averaged_pre_traces(traces, post, k, stride)
        want, want_active = brute_average(traces, post, k, stride)
        assert np.array_equal(active, want_active)
        assert np.array_equal(got, want)

    def test_single_spike_copies_patch(self):
        traces = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        post = np.zeros((1, 1, 2, 2), np.int8)
        post[0, 0, 1, 0] = 1
        got, active = averaged_pre_traces(traces, post, 3, 1)
        assert active.tolist() == [True]
        assert np.array_equal(got[0, 0], traces[0, 0, 1:4, 0:3])

    def test_off_grid_spikes_ignored(self):
        traces = np.ones((1, 1, 4, 4))
        post = np.zeros((1, 1, 2, 2), np.int8)
        post[0, 0, 1, 1] = 1
        _, active = averaged_pre_traces(traces, post, 3, 2)
        assert not active.any()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            averaged_pre_traces(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), 3, 1)


class TestMinibatchUpdate:
    def test_no_spikes_leaves_bits(self):
        rng = np.random.default_rng(0)
        bits = rng.random((2, 1, 3, 3)) < 0.5
        traces = rng.random((1, 1, 5, 5))
        out = minibatch_stdp_update(bits, traces, np.zeros_like(traces), np.zeros((1, 2, 3, 3)),
                                    1, EXC, EXC.mirrored(), rng)
        assert np.array_equal(out, bits)

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_per_weight_oracle(self, seed):
        rng = np.random.default_rng(seed)
        traces, post, k, stride = random_instance(rng)
        exc = traces * (rng.random(traces.shape) < 0.7)
        inh = traces * (rng.random(traces.shape) < 0.3)
        n_out, n_in = post.shape[1], traces.shape[1]
        bits = rng.random((n_out, n_in, k, k)) < 0.5
        keep = rng.random(n_out) < 0.7
        exc_w = StdpWindowConfig(p_hebb_pot=0.5, p_antihebb_dep=0.5)
        inh_w = StdpWindowConfig(p_hebb_pot=0.4, p_antihebb_dep=0.3, inhibitory=True)
        got = minibatch_stdp_update(bits, exc, inh, post, stride, exc_w, inh_w,
                                    np.random.default_rng(99), keep=keep)

        u = np.random.default_rng(99).random((2,) + bits.shape)
        want = bits.copy()
        masked = post * keep[None, :, None, None]
        for plane, (tr, w) in enumerate(((exc, exc_w), (inh, inh_w))):
            if not tr.any() or not masked.any():
                continue
            avg, active = brute_average(tr, masked, k, stride)
            for idx in np.ndindex(bits.shape):
                if not active[idx[0]]:
                    continue
                d = classify(float(avg[idx]), w)
                if u[plane][idx] < switch_probability(d, w):
                    if d in (Decision.HEBB_POTENTIATE, Decision.ANTIHEBB_POTENTIATE):
                        want[idx] = True
                    elif d in (Decision.HEBB_DEPRESS, Decision.ANTIHEBB_DEPRESS):
                        want[idx] = False
        assert np.array_equal(got, want)

    def test_dropped_maps_unchanged(self):
        rng = np.random.default_rng(3)
        bits = rng.random((3, 1, 3, 3)) < 0.5
        traces = np.full((1, 1, 5, 5), 0.9)
        post = np.ones((1, 3, 3, 3), np.int8)
        w = StdpWindowConfig(p_hebb_pot=1.0, p_antihebb_dep=1.0)
        out = minibatch_stdp_update(bits, traces, np.zeros_like(traces), post, 1, w, w.mirrored(),
                                    rng, keep=np.array([True, False, True]))
        assert out[0].all() and out[2].all()
        assert np.array_equal(out[1], bits[1])

    def test_stream_position_independent_of_spikes(self):
        bits = np.zeros((2, 1, 3, 3), bool)
        traces = np.zeros((1, 1, 5, 5))
        g1, g2 = np.random.default_rng(5), np.random.default_rng(5)
        minibatch_stdp_update(bits, traces, traces, np.zeros((1, 2, 3, 3)), 1, EXC, EXC.mirrored(), g1)
        minibatch_stdp_update(bits, traces, traces, np.ones((1, 2, 3, 3)), 1, EXC, EXC.mirrored(), g2)
        assert g1.random() == g2.random()


class TestFloatAblation:
    def test_clipped_and_signed(self):
        values = np.zeros((1, 2, 1, 1), np.float32)
        exc = np.zeros((1, 2, 1, 1))
        inh = np.zeros((1, 2, 1, 1))
        exc[0, 0] = 1.0
        inh[0, 1] = 1.0
        post = np.ones((1, 1, 1, 1), np.int8)
        out = minibatch_stdp_update_float(values, exc, inh, post, 1, 10.0, 0.0275)
        assert out[0, 0, 0, 0] == 1.0 and out[0, 1, 0, 0] == -1.0

    def test_no_spikes(self):
        values = np.full((1, 1, 1, 1), 0.25, np.float32)
        out = minibatch_stdp_update_float(values, np.ones((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)),
                                          np.zeros((1, 1, 1, 1)), 1, 0.1, 0.0)
        assert np.array_equal(out, values)
