import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedgraph.errors import ShapeError, TruncatedPayloadError
from fedgraph.features import (
    BN_EPS,
    LAYER_SPECS,
    ConvPipelineWeights,
    FeatureExtractor,
    conv_forward,
    conv_trace,
    decode_conv_weights,
    encode_conv_weights,
    extract_all,
    stat_features,
)
from fedgraph.numerics import RngStream
from fedgraph.signal_ingest import Recording

SHAPE_ROWS = [
    ("input", "Input", (3000, 1)),
    ("small", "Conv1D+BN", (492, 32)),
    ("small", "MaxPool1D", (30, 32)),
    ("small", "Dropout", (30, 32)),
    ("small", "Conv1D+BN", (30, 64)),
    ("small", "Conv1D+BN", (30, 64)),
    ("small", "Conv1D+BN", (30, 64)),
    ("small", "MaxPool1D", (3, 64)),
    ("small", "Flatten", (192,)),
    ("large", "Conv1D+BN", (53, 64)),
    ("large", "MaxPool1D", (6, 64)),
    ("large", "Dropout", (6, 64)),
    ("large", "Conv1D+BN", (6, 64)),
    ("large", "Conv1D+BN", (6, 64)),
    ("large", "Conv1D+BN", (6, 64)),
    ("large", "MaxPool1D", (1, 64)),
    ("large", "Flatten", (64,)),
    ("concat", "Concatenate", (256,)),
]


class TestStatFeatures:
    def test_constant_epoch(self):
        np.testing.assert_allclose(stat_features([5, 5, 5, 5], 1), [5, 0, 5, 5, 5, 0, 0], atol=1e-12)

    def test_alternating_zero_crossing(self):
        assert stat_features([1, -1, 1, -1], 1)[5] == 1.0

    def test_cosine_energy_in_first_band(self):
        k = np.arange(8)
        f = stat_features(np.cos(2 * np.pi * k / 8), 2)
        # |X_1|^2 / D = (8/2)^2 / 8
        assert f[6] == pytest.approx(2.0, abs=1e-12)
        assert abs(f[7]) < 1e-12

    def test_against_numpy_fft(self):
        x = np.random.default_rng(0).normal(size=50)
        f = stat_features(x, 5)
        power = np.abs(np.fft.fft(x)) ** 2 / 50
        bands = [power[1:6], power[6:11], power[11:16], power[16:21], power[21:26]]
        np.testing.assert_allclose(f[6:], [b.sum() for b in bands], rtol=1e-10)
        np.testing.assert_allclose(f[:5], [x.mean(), x.std(), x.min(), x.max(), np.sqrt(np.mean(x**2))])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(4, 120), elements=st.floats(-100, 100)), st.integers(1, 2))
    def test_parseval_on_positive_bins(self, x, b):
        f = stat_features(x, b)
        assert np.all(f[6:] >= 0)
        total = np.sum(np.abs(np.fft.fft(x)[1 : x.size // 2 + 1]) ** 2) / x.size
        assert abs(f[6:].sum() - total) <= 1e-9 * max(1.0, total)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            stat_features([1.0, np.nan, 2.0], 1)


def correlate_oracle(x, kernel, stride, pad_l, pad_r):
    """Per-channel np.correlate; independent of the vectorised path."""
    x = np.pad(x, ((pad_l, pad_r), (0, 0)))
    out_ch, in_ch, k = kernel.shape
    length = (x.shape[0] - k) // stride + 1
    out = np.zeros((length, out_ch))
    for o in range(out_ch):
        acc = np.zeros(x.shape[0] - k + 1)
        for i in range(in_ch):
            acc += np.correlate(x[:, i], kernel[o, i], mode="valid")
        out[:, o] = acc[::stride][:length]
    return out


def forward_oracle(epoch, w):
    def block(h, layer, spec):
        y = correlate_oracle(h, layer.kernel, spec.stride, spec.pad_left, spec.pad_right) + layer.bias
        y = layer.bn_scale * (y - layer.bn_mean) / np.sqrt(layer.bn_var + BN_EPS) + layer.bn_shift
        return np.maximum(y, 0)

    def pool(h, s):
        return np.array([h[i * s : (i + 1) * s].max(axis=0) for i in range(h.shape[0] // s)])

    outs = []
    for layers, specs, p1, p2 in ((w.layers[:4], LAYER_SPECS[:4], 16, 10), (w.layers[4:], LAYER_SPECS[4:], 8, 6)):
        h = pool(block(epoch[:, None], layers[0], specs[0]), p1)
        for layer, spec in zip(layers[1:], specs[1:]):
            h = block(h, layer, spec)
        outs.append(pool(h, p2).reshape(-1))
    return np.concatenate(outs)


@pytest.fixture(scope="module")
def weights():
    return ConvPipelineWeights.random(RngStream(11))


class TestConvPipeline:
    def test_shape_chain(self, weights):
        epoch = RngStream(1).normal(size=3000)
        out, trace = conv_trace(epoch, weights)
        assert trace == SHAPE_ROWS
        assert out.shape == (256,)

    def test_matches_loop_oracle(self, weights):
        epoch = RngStream(2).normal(size=3000)
        np.testing.assert_allclose(conv_forward(epoch, weights), forward_oracle(epoch, weights), rtol=1e-10, atol=1e-10)

    def test_zero_epoch_zero_output(self):
        w = ConvPipelineWeights.identity_bn(RngStream(3))
        assert np.array_equal(conv_forward(np.zeros(3000), w), np.zeros(256))

    def test_deterministic(self, weights):
        epoch = RngStream(4).normal(size=3000)
        a = conv_forward(epoch, ConvPipelineWeights.random(RngStream(11)))
        assert a.tobytes() == conv_forward(epoch, weights).tobytes()

    def test_wrong_length(self, weights):
        with pytest.raises(ShapeError):
            conv_forward(np.zeros(2999), weights)

    def test_weight_shape_validation(self, weights):
        layers = list(weights.layers)
        bad = ConvPipelineWeights.random(RngStream(5)).layers[0]
        bad.kernel = bad.kernel[:, :, :-1]
        with pytest.raises(ShapeError):
            ConvPipelineWeights([bad] + layers[1:])

    def test_cpw_round_trip(self, weights):
        blob = encode_conv_weights(weights)
        assert blob[:4] == b"CPW1"
        back = decode_conv_weights(blob)
        for a, b in zip(weights.layers, back.layers):
            for ta, tb in zip(a.tensors(), b.tensors()):
                np.testing.assert_array_equal(ta.astype(np.float32), tb)
        assert encode_conv_weights(back) == blob
        with pytest.raises(TruncatedPayloadError):
            decode_conv_weights(blob[:-10])


class TestExtractAll:
    def rec(self, d=40):
        vals = RngStream(0).normal(size=(2, 3, d))
        return Recording(vals, 10.0, ["a", "b"])

    def test_stat_shape(self):
        out = extract_all(self.rec(), FeatureExtractor("stat", n_bands=10))
        assert out.shape == (3, 2, 16)
        rec = self.rec()
        np.testing.assert_array_equal(out[2, 1], stat_features(rec.values[1, 2], 10))

    def test_repeatable_and_worker_independent(self):
        ex = FeatureExtractor("stat", n_bands=4)
        a = extract_all(self.rec(), ex)
        b = extract_all(self.rec(), ex, workers=3)
        assert a.tobytes() == b.tobytes()

    def test_conv_needs_3000_samples(self):
        ex = FeatureExtractor("conv", weights=ConvPipelineWeights.random(RngStream(1)))
        with pytest.raises(ShapeError):
            extract_all(self.rec(), ex)
