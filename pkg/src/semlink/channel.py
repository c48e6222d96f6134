"""Simulated wireless channel: complex mapping, power control, AWGN/Rayleigh.

Conventions: the transmitter normalizes each signal to unit average power
per complex symbol, so SNR in dB fixes the complex noise variance as
10^(-snr/10). Rayleigh gains are i.i.d. CN(0,1) per symbol and the receiver
applies zero-forcing equalization with perfect gain knowledge. snr_db of
+inf is the noiseless sentinel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

import numpy as np

from .streams import make_rng

POWER_TOLERANCE = 1e-3
GAIN_CLAMP = 1e-6


class ChannelKind(str, Enum):
    AWGN = "awgn"
    RAYLEIGH = "rayleigh"


@dataclass
class ComplexSignal:
    symbols: np.ndarray

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.complex128)

    def __len__(self) -> int:
        return len(self.symbols)

    def mean_power(self) -> float:
        s = self.symbols
        return float(np.mean(s.real**2 + s.imag**2))


@dataclass
class ChannelConfig:
    kind: ChannelKind
    snr_db: float
    seed: int = 0

    def __post_init__(self):
        self.kind = ChannelKind(self.kind)
        # +inf is the noiseless sentinel; NaN and -inf are never meaningful
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"snr_db must be a real value or +inf, got {self.snr_db}")


@dataclass
class ChannelRealization:
    gains: np.ndarray
    noise: np.ndarray


def to_complex(v: np.ndarray) -> ComplexSignal:
    """Pair consecutive reals into complex symbols: (v[2i], v[2i+1])."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size % 2 != 0:
        raise ValueError(f"need a 1-d vector of even length, got shape {v.shape}")
    return ComplexSignal(np.ascontiguousarray(v).view(np.complex128))


def to_real(s: ComplexSignal) -> np.ndarray:
    """Inverse of to_complex: interleave real and imaginary parts."""
    return np.ascontiguousarray(s.symbols).view(np.float64).copy()


def normalize_power(s: ComplexSignal) -> tuple[ComplexSignal, float]:
    """Scale to unit mean power per symbol; returns (signal, applied scale)."""
    power = s.mean_power()
    if power == 0.0:
        raise ValueError("cannot power-normalize an all-zero signal")
    scale = 1.0 / math.sqrt(power)
    return ComplexSignal(s.symbols * scale), scale


def snr_to_noise_variance(snr_db: float) -> float:
    """Per-symbol complex noise variance under unit signal power."""
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise ValueError(f"snr_db must be a real value or +inf, got {snr_db}")
    return 10.0 ** (-snr_db / 10.0)


def sample_gains_and_noise(
    kind: ChannelKind,
    noise_variance: float,
    shape: tuple[int, ...],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw per-symbol gains and additive noise.

    Draw order is fixed (gains, then noise) so realizations are a pure
    function of the generator state.
    """
    kind = ChannelKind(kind)
    if kind is ChannelKind.RAYLEIGH:
        g = rng.standard_normal(shape + (2,))
        gains = (g[..., 0] + 1j * g[..., 1]) * math.sqrt(0.5)
    else:
        gains = np.ones(shape, dtype=np.complex128)
    n = rng.standard_normal(shape + (2,))
    noise = (n[..., 0] + 1j * n[..., 1]) * math.sqrt(noise_variance / 2.0)
    return gains, noise


def transmit(s: ComplexSignal, cfg: ChannelConfig, stream_id: int) -> tuple[ComplexSignal, ChannelRealization]:
    """Push a power-normalized signal through the channel: out = H*s + n.

    Deterministic given (cfg.seed, stream_id); the realization is returned
    for receiver-side equalization.
    """
    power = s.mean_power()
    if abs(power - 1.0) > POWER_TOLERANCE:
        raise ValueError(f"signal must be power-normalized (mean power {power:.6f})")
    sigma2 = snr_to_noise_variance(cfg.snr_db)
    rng = make_rng(cfg.seed, stream_id)
    gains, noise = sample_gains_and_noise(cfg.kind, sigma2, (len(s),), rng)
    received = gains * s.symbols + noise
    return ComplexSignal(received), ChannelRealization(gains, noise)


def clamp_gains(gains: np.ndarray) -> tuple[np.ndarray, int]:
    """Push gain magnitudes up to GAIN_CLAMP, preserving phase.

    Returns (clamped gains, number of clamped symbols). Gains that are
    exactly zero have no phase and become the real value GAIN_CLAMP.
    """
    mag = np.abs(gains)
    small = mag < GAIN_CLAMP
    if not small.any():
        return gains, 0
    clamped = gains.copy()
    zero = mag == 0.0
    tiny = small & ~zero
    clamped[tiny] = gains[tiny] * (GAIN_CLAMP / mag[tiny])
    clamped[zero] = GAIN_CLAMP
    return clamped, int(small.sum())


def equalize(received: ComplexSignal, realization: ChannelRealization) -> tuple[ComplexSignal, int]:
    """Zero-forcing with perfect gain knowledge: out_i = received_i / H_i.

    Returns the equalized signal and the count of clamped (near-zero)
    gains, which the caller may surface as a diagnostic.
    """
    if len(realization.gains) != len(received):
        raise ValueError("realization length does not match signal length")
    gains, n_clamped = clamp_gains(np.asarray(realization.gains, dtype=np.complex128))
    return ComplexSignal(received.symbols / gains), n_clamped


def cbr(k: int, height: int, width: int, channels: int) -> Fraction:
    """Channel bandwidth ratio: (k/2) symbols per height*width*channels source values."""
    if k <= 0 or height <= 0 or width <= 0 or channels <= 0:
        raise ValueError("k, height, width and channels must all be positive")
    if k % 2 != 0:
        raise ValueError(f"k must be even, got {k}")
    return Fraction(k, 2 * height * width * channels)
