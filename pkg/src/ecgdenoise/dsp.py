"""Power/SNR helpers and the Butterworth bandpass used on every noisy input.

"4th order" means a 4th-order lowpass prototype, i.e. an 8-pole bandpass
realised as four biquads. The design goes prototype -> lowpass-to-bandpass
-> bilinear transform with pre-warped band edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import signal as sps

from .errors import ValidationError


@dataclass(frozen=True)
class FilterSpec:
    order: int = 4
    low_cut_hz: float = 0.5
    high_cut_hz: float = 45.0
    fs_hz: float = 360.0

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 1:
            raise ValidationError(f"filter order must be a positive integer, got {self.order}")
        if not 0 < self.low_cut_hz < self.high_cut_hz < self.fs_hz / 2:
            raise ValidationError(
                "need 0 < low_cut < high_cut < fs/2, got "
                f"low={self.low_cut_hz} high={self.high_cut_hz} fs={self.fs_hz}"
            )


@dataclass(frozen=True)
class Biquad:
    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    @property
    def stable(self) -> bool:
        return abs(self.a2) < 1 and abs(self.a1) < 1 + self.a2


@dataclass(frozen=True)
class BiquadCascade:
    sections: tuple[Biquad, ...]
    overall_gain: float = 1.0

    def __post_init__(self):
        for i, s in enumerate(self.sections):
            if not s.stable:
                raise ValidationError(f"section {i} is unstable: a1={s.a1}, a2={s.a2}")

    def as_sos(self) -> np.ndarray:
        """Coefficients as rows ``[b0, b1, b2, 1, a1, a2]``."""
        return np.array([[s.b0, s.b1, s.b2, 1.0, s.a1, s.a2] for s in self.sections])


# --------------------------------------------------------------------------
# power / SNR


def signal_power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("power of an empty signal is undefined")
    return float(np.mean(x * x))


def measure_snr_db(reference, estimate) -> float:
    """``10 log10(sum ref^2 / sum (ref - est)^2)``; ``inf`` for a zero residual."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValidationError(f"length mismatch: {ref.shape} vs {est.shape}")
    p_ref = float(np.sum(ref * ref))
    if p_ref <= 0:
        raise ValidationError("reference signal has zero power")
    resid = ref - est
    p_res = float(np.sum(resid * resid))
    if p_res == 0:
        return math.inf
    return 10.0 * math.log10(p_ref / p_res)


# --------------------------------------------------------------------------
# design


def _prewarp(f_hz: float, fs: float) -> float:
    return 2.0 * fs * math.tan(math.pi * f_hz / fs)


def _pair_poles(poles: np.ndarray, tol: float = 1e-12) -> list[tuple[complex, complex]]:
    upper = sorted((p for p in poles if p.imag > tol), key=lambda p: (abs(p), p.real))
    real = sorted(p.real for p in poles if abs(p.imag) <= tol)
    if len(real) % 2:
        raise ValidationError("odd number of real poles; cannot form biquads")
    pairs = [(p, p.conjugate()) for p in upper]
    pairs += [(complex(real[i]), complex(real[i + 1])) for i in range(0, len(real), 2)]
    return pairs


def design_butterworth_bandpass(spec: FilterSpec) -> BiquadCascade:
    n = int(spec.order)
    fs = float(spec.fs_hz)
    w_lo = _prewarp(spec.low_cut_hz, fs)
    w_hi = _prewarp(spec.high_cut_hz, fs)
    bw = w_hi - w_lo
    w0_sq = w_lo * w_hi

    k = np.arange(1, n + 1)
    proto = np.exp(1j * math.pi * (2 * k + n - 1) / (2 * n))

    # s -> (s^2 + w0^2) / (bw s): each prototype pole p yields the roots of
    # s^2 - p bw s + w0^2 = 0
    pb = proto * bw
    disc = np.sqrt(pb * pb - 4 * w0_sq + 0j)
    analog = np.concatenate([(pb + disc) / 2, (pb - disc) / 2])

    fs2 = 2.0 * fs
    digital = (fs2 + analog) / (fs2 - analog)
    # n zeros at s=0 map to z=1, n zeros at infinity map to z=-1
    gain = bw ** n * np.real(fs2 ** n / np.prod(fs2 - analog))

    w_center = 2.0 * math.atan(math.sqrt(w0_sq) / fs2)
    zc = np.exp(-1j * w_center)
    sections = []
    for p1, p2 in _pair_poles(digital):
        a1 = float(np.real(-(p1 + p2)))
        a2 = float(np.real(p1 * p2))
        raw = abs((1 - zc * zc) / (1 + a1 * zc + a2 * zc * zc))
        gain *= raw
        sections.append(Biquad(float(1.0 / raw), 0.0, float(-1.0 / raw), a1, a2))
    return BiquadCascade(tuple(sections), float(gain))


def frequency_response(cascade: BiquadCascade, freqs_hz, fs_hz: float) -> np.ndarray:
    """Complex ``H(e^{jw})`` evaluated directly from the section coefficients."""
    w = 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs_hz
    z1 = np.exp(-1j * w)
    z2 = z1 * z1
    h = np.full(w.shape, cascade.overall_gain, dtype=complex)
    for s in cascade.sections:
        h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1 + s.a1 * z1 + s.a2 * z2)
    return h


def magnitude_db(h) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 20 * np.log10(np.abs(h))


# --------------------------------------------------------------------------
# filtering


def filter_forward(cascade: BiquadCascade, x, axis: int = -1) -> np.ndarray:
    """Causal DF-II-transposed pass through every section, zero initial state."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValidationError("NaN in filter input")
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite filter input")
    return cascade.overall_gain * sps.sosfilt(cascade.as_sos(), x, axis=axis)


def filter_zero_phase(cascade: BiquadCascade, x, axis: int = -1) -> np.ndarray:
    y = filter_forward(cascade, x, axis=axis)
    return np.flip(filter_forward(cascade, np.flip(y, axis=axis), axis=axis), axis=axis)


class StreamingFilter:
    """Filter that keeps its delay-line state between calls. Single owner only."""

    def __init__(self, cascade: BiquadCascade):
        self.cascade = cascade
        self._sos = cascade.as_sos()
        self._zi = np.zeros((len(cascade.sections), 2))

    def reset(self) -> None:
        self._zi[:] = 0

    def process(self, chunk) -> np.ndarray:
        chunk = np.asarray(chunk, dtype=np.float64)
        if not np.all(np.isfinite(chunk)):
            raise ValidationError("non-finite filter input")
        y, self._zi = sps.sosfilt(self._sos, chunk, zi=self._zi)
        return self.cascade.overall_gain * y


@dataclass(frozen=True)
class Preprocessor:
    """Bandpass applied to noisy inputs (and optionally to clean targets)."""

    cascade: BiquadCascade
    zero_phase: bool = False
    filter_clean: bool = False

    @classmethod
    def from_spec(cls, spec: FilterSpec, zero_phase: bool = False,
                  filter_clean: bool = False) -> "Preprocessor":
        return cls(design_butterworth_bandpass(spec), zero_phase, filter_clean)

    def __call__(self, x, axis: int = -1) -> np.ndarray:
        if self.zero_phase:
            return filter_zero_phase(self.cascade, x, axis=axis)
        return filter_forward(self.cascade, x, axis=axis)

    def clean(self, x, axis: int = -1) -> np.ndarray:
        return self(x, axis=axis) if self.filter_clean else np.asarray(x, dtype=np.float64)


def sections_csv(cascade: BiquadCascade) -> str:
    lines = ["section,b0,b1,b2,a0,a1,a2"]
    for i, s in enumerate(cascade.sections):
        lines.append(f"{i},{s.b0!r},{s.b1!r},{s.b2!r},1.0,{s.a1!r},{s.a2!r}")
    lines.append(f"gain,{cascade.overall_gain!r},,,,,")
    return "\n".join(lines) + "\n"


def response_csv(cascade: BiquadCascade, fs_hz: float, n_points: int = 1024,
                 freqs: Sequence[float] | None = None) -> str:
    if freqs is None:
        freqs = np.linspace(0.0, fs_hz / 2, n_points)
    mag = magnitude_db(frequency_response(cascade, freqs, fs_hz))
    rows = ["freq_hz,mag_db"]
    rows += [f"{f:.6f},{m:.6f}" for f, m in zip(freqs, mag)]
    return "\n".join(rows) + "\n"
