import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restocnet.convnet import (
    ConvLayerSpec,
    NetworkTopology,
    ResidualSource,
    avg_pool_input,
    binary_conv2d,
    centre_crop,
    forward_activations,
    forward_pass,
    init_kernels,
    lpf_activation,
    p_high,
    residual_combine,
    train_conv_layer,
)
from restocnet.data_io import LayerRecord


def brute_conv(x, kernels):
    b, n_in, h, w = x.shape
    n_out, _, k, _ = kernels.shape
    out = np.zeros((b, n_out, h - k + 1, w - k + 1))
    for i in range(b):
        for j in range(n_out):
            for y in range(h - k + 1):
                for xx in range(w - k + 1):
                    s = 0.0
                    for c in range(n_in):
                        for dy in range(k):
                            for dx in range(k):
                                s += x[i, c, y + dy, xx + dx] * kernels[j, c, dy, dx]
                    out[i, j, y, xx] = s
    return out


def signed_maps(rng, shape):
    return rng.integers(-1, 2, size=shape).astype(np.int8)


def pm_kernels(rng, shape):
    return np.where(rng.random(shape) < 0.5, 1.0, -1.0)


class TestConvolution:
    def test_zero_input(self):
        out = binary_conv2d(np.zeros((1, 1, 5, 5)), np.ones((2, 1, 3, 3)))
        assert out.shape == (1, 2, 3, 3) and not out.any()

    def test_degenerate_sum(self):
        assert binary_conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))[0, 0, 0, 0] == 9

    def test_output_size(self):
        assert binary_conv2d(np.zeros((1, 3, 32, 32)), np.ones((4, 3, 3, 3))).shape == (1, 4, 30, 30)

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force_example(self, seed):
        rng = np.random.default_rng(seed)
        x, k = signed_maps(rng, (1, 2, 5, 5)), pm_kernels(rng, (4, 2, 3, 3))
        assert np.array_equal(binary_conv2d(x, k), brute_conv(x, k))

    def test_long_patch_path(self):
        # More than 64 taps per output takes the shifted-sum branch.
        rng = np.random.default_rng(1)
        x, k = signed_maps(rng, (2, 8, 6, 6)), pm_kernels(rng, (3, 8, 3, 3))
        assert np.array_equal(binary_conv2d(x, k), brute_conv(x, k))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_distributes_over_map_concatenation(self, seed):
        rng = np.random.default_rng(seed)
        a, b = signed_maps(rng, (1, 2, 6, 6)), signed_maps(rng, (1, 3, 6, 6))
        ka, kb = pm_kernels(rng, (2, 2, 3, 3)), pm_kernels(rng, (2, 3, 3, 3))
        whole = binary_conv2d(np.concatenate([a, b], 1), np.concatenate([ka, kb], 1))
        assert np.array_equal(whole, binary_conv2d(a, ka) + binary_conv2d(b, kb))

    def test_errors(self):
        with pytest.raises(ValueError):
            binary_conv2d(np.zeros((1, 2, 5, 5)), np.ones((1, 1, 3, 3)))
        with pytest.raises(ValueError):
            binary_conv2d(np.zeros((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


class TestResidual:
    def test_saturation_and_cancellation(self):
        one = np.ones((1, 1, 2, 2), np.int8)
        assert residual_combine(one, [(one, False)]).max() == 1
        assert not residual_combine(one, [(-one, False)]).any()

    def test_inversion(self):
        direct = np.zeros((1, 1, 2, 2), np.int8)
        res = np.array([[[[1, -1], [0, 1]]]], np.int8)
        assert np.array_equal(residual_combine(direct, [(res, True)]), -res)

    def test_cyclic_replication(self):
        rng = np.random.default_rng(0)
        res = signed_maps(rng, (1, 3, 4, 4))
        out = residual_combine(np.zeros((1, 36, 4, 4), np.int8), [(res, False)])
        for j in range(36):
            assert np.array_equal(out[0, j], res[0, j % 3])

    def test_centre_crop(self):
        maps = np.arange(36).reshape(1, 1, 6, 6)
        assert np.array_equal(centre_crop(maps, 4, 4)[0, 0], maps[0, 0, 1:5, 1:5])
        res = np.zeros((1, 1, 32, 32), np.int8)
        res[0, 0, 1, 1] = 1
        out = residual_combine(np.zeros((1, 1, 30, 30), np.int8), [(res, False)])
        assert out[0, 0, 0, 0] == 1 and out.sum() == 1

    def test_errors(self):
        with pytest.raises(ValueError):
            residual_combine(np.zeros((1, 1, 4, 4)), [(np.zeros((1, 1, 3, 3)), False)])
        with pytest.raises(ValueError):
            residual_combine(np.zeros((1, 1, 4, 4)), [(np.zeros((1, 2, 4, 4)), False)])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50)
    def test_zero_residual_is_identity_and_output_is_ternary(self, seed):
        rng = np.random.default_rng(seed)
        direct = signed_maps(rng, (2, 4, 5, 5))
        zero = np.zeros((2, 2, 7, 7), np.int8)
        assert np.array_equal(residual_combine(direct, [(zero, False), (zero, True)]), direct)
        out = residual_combine(direct, [(signed_maps(rng, (2, 2, 7, 7)), bool(rng.integers(2)))])
        assert set(np.unique(out)) <= {-1, 0, 1}


class TestPoolingAndActivation:
    def test_pool_windows(self):
        x = np.array([[1, 1, 1, 0], [1, 1, 1, 0], [0, 0, 0, 0], [0, 0, 0, 0]], np.int8)
        out = avg_pool_input(x[None, None])
        assert out[0, 0].tolist() == [[1.0, 0.5], [0.0, 0.0]]

    def test_pool_truncates_odd_edge(self):
        assert avg_pool_input(np.ones((1, 1, 5, 5))).shape == (1, 1, 2, 2)

    def test_lpf_examples(self):
        assert lpf_activation(np.zeros((100, 3))).tolist() == [0.0, 0.0, 0.0]
        last = np.zeros((100, 1))
        last[-1] = 1
        assert lpf_activation(last)[0] == pytest.approx(1 / 100, abs=1e-15)

    def test_lpf_geometric_series(self):
        closed = (1 - math.exp(-100 / 99.5)) / (1 - math.exp(-1 / 99.5))
        got = lpf_activation(np.ones((100, 1)))[0] * 100
        assert got == pytest.approx(closed, abs=1e-9)
        assert round(got, 2) == 63.40

    @given(st.lists(st.booleans(), min_size=1, max_size=150))
    def test_lpf_closed_form_sum(self, train):
        train = np.array(train, dtype=float)
        n = len(train)
        want = sum(s * math.exp(-(n - 1 - k) / 99.5) for k, s in enumerate(train)) / n
        assert lpf_activation(train[:, None])[0] == pytest.approx(want, abs=1e-9)


class TestInitialisation:
    def test_p_high_uses_kernel_area(self):
        assert p_high(75, 1, 16, 3) == pytest.approx(math.sqrt(75 / (9 + 144)), abs=1e-15)

    def test_alpha_zero(self):
        bits = init_kernels(ConvLayerSpec(4, alpha_init=0.0), 2, np.random.default_rng(0))
        assert not bits.any()

    def test_high_fraction(self):
        spec = ConvLayerSpec(100, alpha_init=75)
        bits = init_kernels(spec, 12, np.random.default_rng(0))  # 10800 weights
        for _ in range(9):
            bits = np.concatenate([bits, init_kernels(spec, 12, np.random.default_rng(_ + 1))])
        p, n = p_high(75, 12, 100, 3), bits.size
        assert abs(bits.mean() - p) <= 3 * math.sqrt(p * (1 - p) / n)

    def test_too_large_alpha(self):
        with pytest.raises(ValueError):
            init_kernels(ConvLayerSpec(1, alpha_init=1000), 1, np.random.default_rng(0))


def small_topology(**kw):
    layers = [ConvLayerSpec(4, batch_size=5, stride=1, t_stdp_ms=10.0, alpha_init=5.0,
                            exc_window=ConvLayerSpec(1).exc_window),
              ConvLayerSpec(4, batch_size=5, stride=1, t_stdp_ms=10.0, alpha_init=5.0,
                            residuals=(ResidualSource(0, False),))]
    return NetworkTopology((1, 10, 10), layers, t_sim_ms=20.0, **kw)


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).integers(0, 256, size=(10, 1, 10, 10)).astype(np.uint8)


class TestNetwork:
    def test_feature_lengths(self):
        mnist = NetworkTopology((1, 28, 28), [ConvLayerSpec(36)])
        assert mnist.feature_length() == 6084
        cifar = NetworkTopology((3, 32, 32), [ConvLayerSpec(36), ConvLayerSpec(36)])
        assert cifar.feature_length() == 15156

    def test_validate_residual_source(self):
        topo = NetworkTopology((1, 10, 10), [ConvLayerSpec(2, residuals=(ResidualSource(0),))])
        with pytest.raises(ValueError):
            topo.validate()

    def test_zero_images_keep_initialisation(self):
        topo = small_topology()
        rec = train_conv_layer(topo, [], 1, np.zeros((0, 1, 10, 10)), seed=3)
        again = train_conv_layer(topo, [], 1, np.zeros((0, 1, 10, 10)), seed=3)
        assert np.array_equal(rec.bits, again.bits) and not rec.thresholds.any()

    def test_training_changes_kernels_and_thresholds(self, images):
        topo = small_topology()
        init = train_conv_layer(topo, [], 1, images, seed=3, random_only=True)
        rec = train_conv_layer(topo, [], 1, images, seed=3)
        assert not np.array_equal(rec.bits, init.bits)
        assert (rec.thresholds > 0).all()

    def test_determinism_and_prefix_stability(self, images):
        topo = small_topology()
        l1 = train_conv_layer(topo, [], 1, images, seed=3)
        snapshot = (l1.bits.copy(), l1.thresholds.copy())
        l2a = train_conv_layer(topo, [l1], 2, images, seed=3)
        l2b = train_conv_layer(topo, [l1], 2, images, seed=3, workers=2)
        assert np.array_equal(l1.bits, snapshot[0]) and np.array_equal(l1.thresholds, snapshot[1])
        assert np.array_equal(l2a.bits, l2b.bits)
        assert np.array_equal(l2a.thresholds, l2b.thresholds)

    def test_order_errors(self, images):
        topo = small_topology()
        l1 = train_conv_layer(topo, [], 1, images[:0], seed=0)
        with pytest.raises(ValueError):
            train_conv_layer(topo, [], 2, images, seed=0)
        with pytest.raises(ValueError):
            train_conv_layer(topo, [l1], 1, images, seed=0)

    def test_forward(self, images):
        topo = small_topology()
        l1 = train_conv_layer(topo, [], 1, images, seed=3)
        l2 = train_conv_layer(topo, [l1], 2, images, seed=3)
        acts = forward_activations(topo, [l1, l2], images, seed=1)
        assert acts.shape == (10, topo.feature_length())
        assert (acts >= 0).all()
        split = forward_activations(topo, [l1, l2], images, seed=1, workers=2, chunk=3)
        assert np.array_equal(acts, split)
        single = forward_pass(topo, [l1, l2], images[4], seed=1, index=4)
        assert np.array_equal(single, acts[4])
        zero = forward_pass(topo, [l1, l2], np.zeros((1, 10, 10), np.uint8), seed=1)
        assert not zero.any()

    def test_forward_needs_trained_layers(self, images):
        topo = small_topology()
        l1 = train_conv_layer(topo, [], 1, images[:0], seed=0)
        with pytest.raises(ValueError):
            forward_activations(topo, [l1], images, seed=0)

    def test_full_precision_ablation(self, images):
        base = small_topology()
        spec = base.layers[0]
        spec = type(spec)(**{**spec.__dict__, "full_precision": True})
        topo = NetworkTopology((1, 10, 10), [spec], t_sim_ms=20.0)
        rec = train_conv_layer(topo, [], 1, images, seed=2)
        assert rec.bits is None and rec.values.dtype == np.float32
        assert np.abs(rec.values).max() <= 1.0
        assert isinstance(rec, LayerRecord)
