"""Dense numeric substrate: checked matmul, direct DFT, analytic signal,
seeded counter-based RNG streams and the Adam update.

Matrices are plain ``float64`` numpy arrays; the helpers here only add the
shape and finiteness checks the rest of the pipeline relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError, NonFiniteError, ShapeError

__all__ = [
    "as_matrix",
    "matmul",
    "dft",
    "idft",
    "analytic_signal",
    "instantaneous_phase",
    "RngStream",
    "AdamState",
    "adam_step",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a 2-D float64 array, rejecting non-finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("matrix product overflowed")
    return out


# --------------------------------------------------------------------------
# Discrete Fourier transform (direct O(d^2) evaluation)
# --------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _twiddles(d: int) -> np.ndarray:
    # Reduce k*n modulo d before scaling so large products keep full precision.
    k = np.arange(d)
    phase = 2.0 * np.pi * (np.outer(k, k) % d) / d
    w = np.exp(-1j * phase)
    w.setflags(write=False)
    return w


def dft(x) -> np.ndarray:
    """Forward DFT, ``X[k] = sum_n x[n] exp(-2 pi i k n / d)``."""
    x = np.asarray(x)
    if x.ndim != 1 or x.size < 1:
        raise ShapeError(f"dft expects a non-empty vector, got shape {x.shape}")
    return _twiddles(x.size) @ x.astype(np.complex128)


def idft(spectrum) -> np.ndarray:
    """Inverse of :func:`dft` (includes the 1/d factor)."""
    s = np.asarray(spectrum, dtype=np.complex128)
    if s.ndim != 1 or s.size < 1:
        raise ShapeError(f"idft expects a non-empty vector, got shape {s.shape}")
    return np.conj(_twiddles(s.size)) @ s / s.size


def analytic_signal(x) -> np.ndarray:
    """Analytic signal of a real vector via the DFT.

    Negative-frequency bins are zeroed and strictly positive bins doubled;
    DC (and Nyquist for even length) keep unit weight, so the real part of
    the result reproduces ``x``.

    Raises
    ------
    InvalidInputError
        If ``x`` has fewer than two samples.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"analytic_signal expects a vector, got shape {x.shape}")
    d = x.size
    if d < 2:
        raise InvalidInputError(f"analytic_signal needs at least 2 samples, got {d}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("analytic_signal input contains non-finite values")
    h = np.zeros(d)
    h[0] = 1.0
    if d % 2 == 0:
        h[1 : d // 2] = 2.0
        h[d // 2] = 1.0
    else:
        h[1 : (d + 1) // 2] = 2.0
    return idft(dft(x) * h)


def instantaneous_phase(x) -> np.ndarray:
    """Phase of :func:`analytic_signal` in ``(-pi, pi]``."""
    return np.angle(analytic_signal(x))


# --------------------------------------------------------------------------
# RNG streams
# --------------------------------------------------------------------------

class RngStream:
    """Seeded counter-based random stream.

    The Philox key is ``(seed, stream_id)``, so two streams with the same pair
    replay the same sequence and streams with different ids never share
    state or depend on how many draws another stream has made.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        mask = (1 << 64) - 1
        self.seed = int(seed) & mask
        self.stream_id = int(stream_id) & mask
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.015
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n_params: int, lr: float = 0.015, **kwargs) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0, lr, **kwargs)


def adam_step(params, grads, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new params and a new state."""
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape or p.shape != state.m.shape or p.shape != state.v.shape:
        raise ShapeError(
            f"adam shapes disagree: params {p.shape}, grads {g.shape}, "
            f"m {state.m.shape}, v {state.v.shape}"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_p = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_p, replace(state, m=m, v=v, t=t)
