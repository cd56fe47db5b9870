"""Per-epoch node feature extraction.

Two extractors turn one channel's epoch of ``D`` raw samples into a feature
vector of length ``d``:

* ``stat`` -- summary statistics plus ``B`` spectral band energies
  (``d = 6 + B``). This is the default.
* ``conv`` -- a frozen two-branch 1-D CNN applied in inference mode to
  3000-sample epochs, producing 192 + 64 = 256 features. Its weights come
  from a ``.cpw`` file.

Conv branch geometry (input 3000 samples)::

    small: conv k=54 s=6 -> 492x32, pool 16 -> 30x32, dropout,
           3 x conv k=8 same -> 30x64, pool 10 -> 3x64, flatten 192
    large: conv k=400 s=50 -> 53x64, pool 8 -> 6x64, dropout,
           3 x conv k=8 same -> 6x64, pool 6 -> 1x64, flatten 64

``same`` padding for k=8 pads 3 samples on the left and 4 on the right.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadMagicError, ConfigError, ContainerError, NonFiniteError, ShapeError, TruncatedPayloadError
from .numerics import RngStream, dft
from .signal_ingest import Recording

CONV_INPUT_LENGTH = 3000
BN_EPS = 1e-5


# --------------------------------------------------------------------------
# Statistical extractor
# --------------------------------------------------------------------------

def band_edges(d: int, n_bands: int) -> list[np.ndarray]:
    """Split DFT bins ``1..d//2`` into ``n_bands`` contiguous groups."""
    bins = np.arange(1, d // 2 + 1)
    return np.array_split(bins, n_bands)


def stat_features(epoch, n_bands: int = 10) -> np.ndarray:
    """Summary statistics and band energies of one epoch.

    Returns ``[mean, std, min, max, rms, zero_crossing_rate, e_1 .. e_B]``
    where ``std`` is the population standard deviation, the crossing rate
    counts strict sign changes divided by ``D - 1`` and ``e_b`` is the sum of
    ``|X_k|^2 / D`` over the ``b``-th contiguous block of bins ``1..D//2``.
    """
    x = np.asarray(epoch, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"epoch must be a vector, got shape {x.shape}")
    d = x.size
    if d < 2:
        raise ShapeError(f"epoch needs at least 2 samples, got {d}")
    if n_bands < 1 or n_bands > d // 2:
        raise ConfigError(f"n_bands must be in [1, {d // 2}] for D={d}, got {n_bands}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("epoch contains non-finite values")

    power = np.abs(dft(x)) ** 2 / d
    energies = [power[b].sum() for b in band_edges(d, n_bands)]
    crossings = np.count_nonzero(x[:-1] * x[1:] < 0)
    head = [
        x.mean(),
        x.std(),
        x.min(),
        x.max(),
        np.sqrt(np.mean(x * x)),
        crossings / (d - 1),
    ]
    return np.array(head + energies, dtype=np.float64)


# --------------------------------------------------------------------------
# Convolutional extractor
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    pad_left: int = 0
    pad_right: int = 0


# (conv specs, pool after first conv, pool after last conv)
SMALL_BRANCH = (
    (ConvSpec(1, 32, 54, 6), ConvSpec(32, 64, 8, 1, 3, 4), ConvSpec(64, 64, 8, 1, 3, 4), ConvSpec(64, 64, 8, 1, 3, 4)),
    16,
    10,
)
LARGE_BRANCH = (
    (ConvSpec(1, 64, 400, 50), ConvSpec(64, 64, 8, 1, 3, 4), ConvSpec(64, 64, 8, 1, 3, 4), ConvSpec(64, 64, 8, 1, 3, 4)),
    8,
    6,
)
LAYER_SPECS: tuple[ConvSpec, ...] = SMALL_BRANCH[0] + LARGE_BRANCH[0]
TENSOR_NAMES = ("kernel", "bias", "bn_scale", "bn_shift", "bn_mean", "bn_var")


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (out, in, k)
    bias: np.ndarray
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in TENSOR_NAMES]


@dataclass
class ConvPipelineWeights:
    """Eight Conv1D+BN layers: four for the small-kernel branch, then four
    for the large-kernel branch."""

    layers: list[ConvLayer]

    def __post_init__(self):
        if len(self.layers) != len(LAYER_SPECS):
            raise ShapeError(f"expected {len(LAYER_SPECS)} conv layers, got {len(self.layers)}")
        for i, (layer, spec) in enumerate(zip(self.layers, LAYER_SPECS)):
            want = {
                "kernel": (spec.out_channels, spec.in_channels, spec.kernel),
                "bias": (spec.out_channels,),
                "bn_scale": (spec.out_channels,),
                "bn_shift": (spec.out_channels,),
                "bn_mean": (spec.out_channels,),
                "bn_var": (spec.out_channels,),
            }
            for name, shape in want.items():
                arr = np.asarray(getattr(layer, name), dtype=np.float64)
                if arr.shape != shape:
                    raise ShapeError(f"layer {i} {name}: expected {shape}, got {arr.shape}")
                if not np.all(np.isfinite(arr)):
                    raise NonFiniteError(f"layer {i} {name} has non-finite entries")
                setattr(layer, name, arr)
            if np.any(layer.bn_var <= 0):
                raise ShapeError(f"layer {i} bn_var must be strictly positive")

    @classmethod
    def random(cls, rng: RngStream, zero_bias: bool = False) -> "ConvPipelineWeights":
        layers = []
        for spec in LAYER_SPECS:
            fan_in = spec.in_channels * spec.kernel
            out = spec.out_channels
            layers.append(
                ConvLayer(
                    kernel=rng.normal(0.0, np.sqrt(2.0 / fan_in), (out, spec.in_channels, spec.kernel)),
                    bias=np.zeros(out) if zero_bias else rng.normal(0.0, 0.01, out),
                    bn_scale=rng.uniform(0.5, 1.5, out),
                    bn_shift=np.zeros(out) if zero_bias else rng.normal(0.0, 0.1, out),
                    bn_mean=np.zeros(out) if zero_bias else rng.normal(0.0, 0.1, out),
                    bn_var=rng.uniform(0.5, 2.0, out),
                )
            )
        return cls(layers)

    @classmethod
    def identity_bn(cls, rng: RngStream) -> "ConvPipelineWeights":
        """Random kernels, zero biases and identity batch-norm."""
        layers = []
        for spec in LAYER_SPECS:
            out = spec.out_channels
            layers.append(
                ConvLayer(
                    kernel=rng.normal(0.0, 0.1, (out, spec.in_channels, spec.kernel)),
                    bias=np.zeros(out),
                    bn_scale=np.ones(out),
                    bn_shift=np.zeros(out),
                    bn_mean=np.zeros(out),
                    bn_var=np.full(out, 1.0 - BN_EPS),
                )
            )
        return cls(layers)


def _conv1d(x: np.ndarray, layer: ConvLayer, spec: ConvSpec) -> np.ndarray:
    # x: (length, in_channels) -> (out_length, out_channels)
    if spec.pad_left or spec.pad_right:
        x = np.pad(x, ((spec.pad_left, spec.pad_right), (0, 0)))
    windows = sliding_window_view(x, spec.kernel, axis=0)[:: spec.stride]  # (L, in, k)
    y = np.tensordot(windows, layer.kernel, axes=([1, 2], [1, 2])) + layer.bias
    y = layer.bn_scale * (y - layer.bn_mean) / np.sqrt(layer.bn_var + BN_EPS) + layer.bn_shift
    return np.maximum(y, 0.0)


def _maxpool(x: np.ndarray, size: int) -> np.ndarray:
    n = x.shape[0] // size
    return x[: n * size].reshape(n, size, x.shape[1]).max(axis=1)


def _branch(x, layers, branch, name, trace):
    specs, pool_first, pool_last = branch
    h = _conv1d(x, layers[0], specs[0])
    trace.append((name, "Conv1D+BN", h.shape))
    h = _maxpool(h, pool_first)
    trace.append((name, "MaxPool1D", h.shape))
    trace.append((name, "Dropout", h.shape))  # inference mode: identity
    for layer, spec in zip(layers[1:], specs[1:]):
        h = _conv1d(h, layer, spec)
        trace.append((name, "Conv1D+BN", h.shape))
    h = _maxpool(h, pool_last)
    trace.append((name, "MaxPool1D", h.shape))
    h = h.reshape(-1)
    trace.append((name, "Flatten", h.shape))
    return h


def conv_trace(epoch, weights: ConvPipelineWeights) -> tuple[np.ndarray, list[tuple[str, str, tuple]]]:
    """Forward pass returning the 256 features and every intermediate shape
    as ``(branch, row, shape)`` tuples."""
    x = np.asarray(epoch, dtype=np.float64)
    if x.shape != (CONV_INPUT_LENGTH,):
        raise ShapeError(f"conv extractor needs a {CONV_INPUT_LENGTH}-sample epoch, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("epoch contains non-finite values")
    trace: list[tuple[str, str, tuple]] = [("input", "Input", (CONV_INPUT_LENGTH, 1))]
    x = x[:, None]
    small = _branch(x, weights.layers[:4], SMALL_BRANCH, "small", trace)
    large = _branch(x, weights.layers[4:], LARGE_BRANCH, "large", trace)
    out = np.concatenate([small, large])
    trace.append(("concat", "Concatenate", out.shape))
    return out, trace


def conv_forward(epoch, weights: ConvPipelineWeights) -> np.ndarray:
    return conv_trace(epoch, weights)[0]


# --------------------------------------------------------------------------
# .cpw container
# --------------------------------------------------------------------------

CPW_MAGIC = b"CPW1"


def encode_conv_weights(weights: ConvPipelineWeights) -> bytes:
    buf = io.BytesIO()
    buf.write(CPW_MAGIC)
    for layer in weights.layers:
        tensors = layer.tensors()
        buf.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            buf.write(struct.pack("<I", t.ndim))
            buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
            buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_conv_weights(data: bytes) -> ConvPipelineWeights:
    if data[:4] != CPW_MAGIC:
        raise BadMagicError("not a .cpw weights file (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise TruncatedPayloadError("weights file is truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    layers = []
    for _ in LAYER_SPECS:
        (count,) = take("<I")
        if count != len(TENSOR_NAMES):
            raise ContainerError(f"expected {len(TENSOR_NAMES)} tensors per layer, got {count}")
        tensors = []
        for _ in range(count):
            (rank,) = take("<I")
            dims = take(f"<{rank}I")
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(data):
                raise TruncatedPayloadError("weights file is truncated")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            tensors.append(arr.astype(np.float64))
        layers.append(ConvLayer(*tensors))
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} trailing bytes after last layer")
    return ConvPipelineWeights(layers)


def load_conv_weights(path) -> ConvPipelineWeights:
    return decode_conv_weights(Path(path).read_bytes())


def save_conv_weights(weights: ConvPipelineWeights, path) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, encode_conv_weights(weights))


# --------------------------------------------------------------------------
# Extractor facade
# --------------------------------------------------------------------------

@dataclass
class FeatureExtractor:
    kind: str = "stat"
    n_bands: int = 10
    weights: ConvPipelineWeights | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("stat", "conv"):
            raise ConfigError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "conv" and self.weights is None:
            raise ConfigError("conv extractor requires weights")
        if self.kind == "stat" and self.n_bands < 1:
            raise ConfigError("n_bands must be at least 1")

    @property
    def output_dim(self) -> int:
        return 256 if self.kind == "conv" else 6 + self.n_bands

    def extract(self, epoch) -> np.ndarray:
        if self.kind == "conv":
            return conv_forward(epoch, self.weights)
        return stat_features(epoch, self.n_bands)


def extract_all(rec: Recording, ex: FeatureExtractor, workers: int = 1) -> np.ndarray:
    """Feature tensor of shape ``(T, N, d)``."""
    n, t, d = rec.values.shape
    if ex.kind == "conv" and d != CONV_INPUT_LENGTH:
        raise ShapeError(f"conv extractor needs D={CONV_INPUT_LENGTH}, recording has D={d}")
    if ex.kind == "stat" and ex.n_bands > d // 2:
        raise ConfigError(f"n_bands={ex.n_bands} exceeds D//2={d // 2}")
    out = np.empty((t, n, ex.output_dim))

    def run_epoch(ti):
        for ni in range(n):
            out[ti, ni] = ex.extract(rec.values[ni, ti])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_epoch, range(t)))
    else:
        for ti in range(t):
            run_epoch(ti)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("feature extraction produced non-finite values")
    return out
