"""Seeded synthetic recordings whose graphs are class-separable by design.

For an epoch of class ``c`` a group of ``coupled`` channels starting at
channel ``(2 c) mod N`` carries a cosine at the class frequency bin
``f_c = base_bin + c * bin_step`` with a shared random epoch phase and a fixed
per-channel offset, so those channels are phase locked. The remaining
channels carry cosines at independent random background bins and phases,
at half amplitude. Gaussian noise of standard deviation ``noise`` is added
to every sample. All tones sit on integer DFT bins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import RngStream
from .signal_ingest import ElectrodePositions, LabelSet, Recording


@dataclass(frozen=True)
class SyntheticConfig:
    n_classes: int = 5
    n_channels: int = 10
    n_epochs: int = 500
    samples_per_epoch: int = 256
    sample_rate: float = 100.0
    noise: float = 0.5
    coupled: int = 5
    base_bin: int = 6
    bin_step: int = 12

    def __post_init__(self):
        if self.n_classes < 1 or self.n_channels < 2 or self.samples_per_epoch < 4:
            raise ConfigError("synthetic data needs n_classes >= 1, n_channels >= 2, D >= 4")
        if self.n_epochs < 2 * self.n_classes:
            raise ConfigError("need at least two epochs per class")
        if not 1 <= self.coupled <= self.n_channels:
            raise ConfigError("coupled must be in [1, n_channels]")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.base_bin < 1 or self.bin_step < 1:
            raise ConfigError("base_bin and bin_step must be positive")
        if self.class_bin(self.n_classes - 1) >= self.samples_per_epoch // 2:
            raise ConfigError("class frequencies must stay below the Nyquist bin")

    def class_bin(self, c: int) -> int:
        return self.base_bin + c * self.bin_step

    def coupled_channels(self, c: int) -> list[int]:
        start = (2 * c) % self.n_channels
        return [(start + j) % self.n_channels for j in range(self.coupled)]


def channel_names(n: int) -> list[str]:
    return [f"ch{i:02d}" for i in range(n)]


def electrode_layout(names: list[str]) -> ElectrodePositions:
    """Electrodes spaced evenly on the upper half of a unit sphere."""
    n = len(names)
    k = np.arange(n)
    polar = np.arccos(1.0 - (k + 0.5) / n)  # z from 1 down to 0
    azimuth = np.pi * (1.0 + 5**0.5) * k
    coords = np.stack([np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)], axis=1)
    return ElectrodePositions(list(names), coords)


def balanced_labels(cfg: SyntheticConfig, rng: RngStream) -> np.ndarray:
    labels = np.arange(cfg.n_epochs) % cfg.n_classes
    return labels[rng.permutation(cfg.n_epochs)]


def generate(cfg: SyntheticConfig, seed: int) -> tuple[Recording, LabelSet, ElectrodePositions]:
    label_rng = RngStream(seed, 0)
    signal_rng = RngStream(seed, 1)
    labels = balanced_labels(cfg, label_rng)
    n, t, d = cfg.n_channels, cfg.n_epochs, cfg.samples_per_epoch
    k = np.arange(d)
    offsets = np.pi * np.arange(n) / n
    background_bins = np.arange(cfg.class_bin(cfg.n_classes - 1) + cfg.bin_step // 2 + 1, d // 2)
    if background_bins.size == 0:
        background_bins = np.arange(1, d // 2)
    values = np.empty((n, t, d))
    for ti in range(t):
        c = int(labels[ti])
        coupled = set(cfg.coupled_channels(c))
        epoch_phase = signal_rng.uniform(0.0, 2.0 * np.pi)
        f_c = cfg.class_bin(c)
        for ni in range(n):
            if ni in coupled:
                values[ni, ti] = np.cos(2.0 * np.pi * f_c * k / d + epoch_phase + offsets[ni])
            else:
                f = int(signal_rng.choice(background_bins))
                phase = signal_rng.uniform(0.0, 2.0 * np.pi)
                values[ni, ti] = 0.5 * np.cos(2.0 * np.pi * f * k / d + phase)
        if cfg.noise > 0:
            values[:, ti, :] += signal_rng.normal(0.0, cfg.noise, (n, d))
    names = channel_names(n)
    # Round through f32 so in-memory values equal what the container stores.
    values = values.astype(np.float32).astype(np.float64)
    rec = Recording(values, cfg.sample_rate, names)
    return rec, LabelSet(labels, cfg.n_classes), electrode_layout(names)
