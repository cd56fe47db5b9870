"""Loading, validating and splitting raw multichannel recordings.

A recording is stored in the ``.sts`` container (little-endian)::

    magic "STSQ1" | u8 version=1 | u32 N | u32 T | u32 D | f64 sample_rate
    N x (u16 byte length + UTF-8 channel name)
    N*T*D f32 values ordered [channel][epoch][sample]

Labels live in ``labels.csv`` (``epoch,label``) and electrode coordinates in
``positions.csv`` (``channel,x,y,z``).
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    ContainerError,
    DataError,
    InvalidLabelError,
    NonFiniteError,
    TruncatedPayloadError,
)
from .numerics import RngStream

STS_MAGIC = b"STSQ1"
STS_VERSION = 1
_HEADER = struct.Struct("<5sBIIId")


@dataclass
class Recording:
    values: np.ndarray  # (N, T, D) float64
    sample_rate: float
    channel_names: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"recording values must be N x T x D, got {self.values.shape}")
        n, t, d = self.values.shape
        if n < 2:
            raise DataError(f"a recording needs at least 2 channels, got {n}")
        if d < 2:
            raise DataError(f"epochs need at least 2 samples, got {d}")
        if len(self.channel_names) != n:
            raise DataError(f"{len(self.channel_names)} channel names for {n} channels")
        bad = ~np.isfinite(self.values)
        if bad.any():
            ch, ep, _ = (int(i) for i in np.argwhere(bad)[0])
            raise NonFiniteError(
                f"non-finite value in channel {ch} ({self.channel_names[ch]!r}), epoch {ep}",
                channel=ch,
                epoch=ep,
            )

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_epochs(self) -> int:
        return self.values.shape[1]

    @property
    def samples_per_epoch(self) -> int:
        return self.values.shape[2]


@dataclass
class LabelSet:
    labels: np.ndarray
    n_classes: int = 5

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise InvalidLabelError("labels must be a vector")
        if self.n_classes < 1:
            raise InvalidLabelError("n_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InvalidLabelError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return int(self.labels.size)


@dataclass
class ElectrodePositions:
    names: list[str]
    coords: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if len(self.names) != self.coords.shape[0]:
            raise DataError("one coordinate triple per electrode name is required")
        if not np.all(np.isfinite(self.coords)):
            raise NonFiniteError("electrode coordinates must be finite")

    def aligned_to(self, channel_names: list[str]) -> "ElectrodePositions":
        """Reorder to match ``channel_names``; every channel must be present."""
        index = {name: i for i, name in enumerate(self.names)}
        missing = [c for c in channel_names if c not in index]
        if missing or len(channel_names) != len(self.names):
            raise DataError(f"positions do not match channels (missing {missing})")
        order = [index[c] for c in channel_names]
        return ElectrodePositions(list(channel_names), self.coords[order])


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    test: np.ndarray


# --------------------------------------------------------------------------
# .sts container
# --------------------------------------------------------------------------

def encode_recording(rec: Recording) -> bytes:
    n, t, d = rec.values.shape
    buf = io.BytesIO()
    buf.write(_HEADER.pack(STS_MAGIC, STS_VERSION, n, t, d, float(rec.sample_rate)))
    for name in rec.channel_names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
    buf.write(rec.values.astype("<f4").tobytes(order="C"))
    return buf.getvalue()


def decode_recording(data: bytes) -> Recording:
    if len(data) < len(STS_MAGIC) or data[: len(STS_MAGIC)] != STS_MAGIC:
        raise BadMagicError("not an .sts container (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("header is truncated")
    _, version, n, t, d, rate = _HEADER.unpack_from(data, 0)
    if version != STS_VERSION:
        raise ContainerError(f"unsupported .sts version {version}")
    pos = _HEADER.size
    names = []
    for _ in range(n):
        if pos + 2 > len(data):
            raise TruncatedPayloadError("channel name table is truncated")
        (length,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + length > len(data):
            raise TruncatedPayloadError("channel name table is truncated")
        try:
            names.append(data[pos : pos + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise ContainerError(f"channel name is not UTF-8: {exc}") from None
        pos += length
    expected = n * t * d * 4
    if len(data) - pos != expected:
        raise TruncatedPayloadError(
            f"declared N*T*D={n * t * d} values but payload holds {(len(data) - pos) / 4:g}"
        )
    values = np.frombuffer(data, dtype="<f4", count=n * t * d, offset=pos).reshape(n, t, d)
    return Recording(values.astype(np.float64), rate, names)


def load_recording(path) -> Recording:
    return decode_recording(Path(path).read_bytes())


def write_recording(rec: Recording, path) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, encode_recording(rec))


# --------------------------------------------------------------------------
# CSV side files
# --------------------------------------------------------------------------

def _read_csv(path, header: list[str]) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [h.strip() for h in rows[0]] != header:
        raise ContainerError(f"{path}: expected header {','.join(header)!r}")
    return [r for r in rows[1:] if r]


def load_labels(path, n_classes: int = 5) -> LabelSet:
    rows = _read_csv(path, ["epoch", "label"])
    by_epoch = {}
    for lineno, row in enumerate(rows, start=2):
        try:
            epoch, label = int(row[0]), int(row[1])
        except (ValueError, IndexError):
            raise ContainerError(f"{path}:{lineno}: malformed row {row}") from None
        by_epoch[epoch] = label
    if sorted(by_epoch) != list(range(len(by_epoch))):
        raise ContainerError(f"{path}: epochs must be 0..T-1 with no gaps")
    return LabelSet(np.array([by_epoch[i] for i in range(len(by_epoch))]), n_classes)


def labels_to_csv(labels: LabelSet) -> str:
    lines = ["epoch,label"] + [f"{i},{int(y)}" for i, y in enumerate(labels.labels)]
    return "\n".join(lines) + "\n"


def load_positions(path) -> ElectrodePositions:
    rows = _read_csv(path, ["channel", "x", "y", "z"])
    names, coords = [], []
    for lineno, row in enumerate(rows, start=2):
        try:
            names.append(row[0])
            coords.append([float(v) for v in row[1:4]])
        except (ValueError, IndexError):
            raise ContainerError(f"{path}:{lineno}: malformed row {row}") from None
    return ElectrodePositions(names, np.array(coords))


def positions_to_csv(pos: ElectrodePositions) -> str:
    lines = ["channel,x,y,z"]
    for name, (x, y, z) in zip(pos.names, pos.coords):
        lines.append(f"{name},{float(x)!r},{float(y)!r},{float(z)!r}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Train/test split
# --------------------------------------------------------------------------

def split_train_test(labels: LabelSet, ratio: float, rng: RngStream) -> DatasetSplit:
    """Stratified random split.

    Each class contributes ``round(ratio * count)`` samples to the test side,
    clamped so that at least one sample of every present class remains on
    each side. Classes are visited in ascending label order.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"test ratio must be in (0, 1), got {ratio}")
    y = labels.labels
    train, test = [], []
    for c in range(labels.n_classes):
        idx = np.flatnonzero(y == c)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise DataError(f"class {c} has {idx.size} sample(s); at least 2 are needed to split")
        n_test = int(math.floor(ratio * idx.size + 0.5))
        n_test = min(max(n_test, 1), idx.size - 1)
        perm = idx[rng.permutation(idx.size)]
        test.extend(perm[:n_test].tolist())
        train.extend(perm[n_test:].tolist())
    return DatasetSplit(np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64))
