"""Mixing clean ECG with scaled EMG/BW/MA noise at an exact composite SNR."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dsp import measure_snr_db, signal_power
from .errors import SynthesisError, ValidationError
from .wfdb_ingest import EcgSegment

logger = logging.getLogger(__name__)


class NoiseType(str, enum.Enum):
    EMG = "EMG"
    BW = "BW"
    MA = "MA"


NOISE_TYPES = (NoiseType.EMG, NoiseType.BW, NoiseType.MA)


class Partition(str, enum.Enum):
    Train = "Train"
    Val = "Val"
    Test = "Test"


_CONDITIONS = (
    (NoiseType.EMG,),
    (NoiseType.BW,),
    (NoiseType.MA,),
    (NoiseType.EMG, NoiseType.BW),
    (NoiseType.EMG, NoiseType.MA),
    (NoiseType.BW, NoiseType.MA),
    (NoiseType.EMG, NoiseType.BW, NoiseType.MA),
)


def enumerate_conditions() -> list[frozenset[NoiseType]]:
    """The seven non-empty noise subsets, singles first, then pairs, then all."""
    return [frozenset(c) for c in _CONDITIONS]


def condition_name(active) -> str:
    active = frozenset(NoiseType(t) for t in active)
    return " + ".join(t.value for t in NOISE_TYPES if t in active)


def condition_index(active) -> int:
    return enumerate_conditions().index(frozenset(NoiseType(t) for t in active))


def parse_condition(text: str) -> frozenset[NoiseType]:
    """``"emg+bw+ma"``, ``"BW + MA"`` or ``"all"``."""
    if text.strip().lower() == "all":
        return frozenset(NOISE_TYPES)
    try:
        parts = frozenset(NoiseType(p.strip().upper()) for p in text.split("+") if p.strip())
    except ValueError:
        raise ValidationError(f"unknown noise condition {text!r}") from None
    if not parts:
        raise ValidationError("empty noise condition")
    return parts


@dataclass(frozen=True, eq=False)
class NoiseSegment:
    samples: np.ndarray
    noise_type: NoiseType
    source_index: int
    partition: Partition | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise ValidationError(f"{self.noise_type}/{self.source_index}: non-finite noise samples")
        if not signal_power(s) > 0:
            raise ValidationError(f"{self.noise_type}/{self.source_index}: silent noise segment")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "noise_type", NoiseType(self.noise_type))


@dataclass(frozen=True)
class MixSpec:
    active_types: frozenset
    target_snr_db: float
    noise_indices: Mapping[NoiseType, int] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        active = frozenset(NoiseType(t) for t in self.active_types)
        if active not in enumerate_conditions():
            raise ValidationError(f"invalid noise condition {sorted(active)}")
        idx = {NoiseType(k): int(v) for k, v in dict(self.noise_indices).items()}
        if set(idx) != set(active):
            raise ValidationError("need exactly one noise index per active noise type")
        object.__setattr__(self, "active_types", active)
        object.__setattr__(self, "noise_indices", idx)

    @property
    def condition(self) -> str:
        return condition_name(self.active_types)


@dataclass(frozen=True, eq=False)
class NoisyPair:
    clean: EcgSegment
    noisy: np.ndarray
    spec: MixSpec
    achieved_snr_db: float
    composite_gain: float = 1.0


def scale_factors(clean_power: float, noise_powers: Mapping, k: int | None = None,
                  target_snr_db: float = -5.0) -> dict:
    """Per-source amplitude factors giving every source power ``P_N / k``."""
    if k is None:
        k = len(noise_powers)
    if k != len(noise_powers) or k < 1:
        raise ValidationError(f"k={k} does not match {len(noise_powers)} noise sources")
    if not clean_power > 0:
        raise ValidationError("clean power must be positive")
    budget = clean_power / 10.0 ** (target_snr_db / 10.0)
    out = {}
    for t, p in noise_powers.items():
        if not p > 0:
            raise ValidationError(f"noise power for {t} must be positive")
        out[t] = math.sqrt((budget / k) / p)
    return out


def mix_arrays(clean: np.ndarray, noises: Mapping, target_snr_db: float):
    """Array-level core of :func:`mix`.

    Returns ``(noisy, achieved_snr_db, g, scaled)`` where ``scaled`` maps each
    type to its equal-power source before the composite rescale ``g``.
    """
    clean = np.asarray(clean, dtype=np.float64)
    p_clean = signal_power(clean)
    if not p_clean > 0:
        raise SynthesisError("clean segment has zero power")
    noises = {t: np.asarray(n, dtype=np.float64) for t, n in noises.items()}
    for t, n in noises.items():
        if n.shape != clean.shape:
            raise SynthesisError(f"{t} noise length {n.shape} != clean length {clean.shape}")
    factors = scale_factors(p_clean, {t: signal_power(n) for t, n in noises.items()},
                            len(noises), target_snr_db)
    # fixed type order keeps the sum bit-reproducible
    order = [t for t in NOISE_TYPES if t in noises] + [t for t in noises if t not in NOISE_TYPES]
    scaled = {t: factors[t] * noises[t] for t in order}
    composite = np.zeros_like(clean)
    for t in order:
        composite = composite + scaled[t]
    p_comp = signal_power(composite)
    if not p_comp > 0:
        raise SynthesisError("composite noise has zero power")
    budget = p_clean / 10.0 ** (target_snr_db / 10.0)
    g = math.sqrt(budget / p_comp)
    noisy = clean + g * composite
    return noisy, measure_snr_db(clean, noisy), g, scaled


def mix(clean: EcgSegment, noises: Mapping[NoiseType, NoiseSegment],
        target_snr_db: float, seed: int = 0) -> NoisyPair:
    arrays = {NoiseType(t): n.samples for t, n in noises.items()}
    noisy, achieved, g, _ = mix_arrays(clean.samples_mv, arrays, target_snr_db)
    spec = MixSpec(frozenset(arrays), float(target_snr_db),
                   {NoiseType(t): n.source_index for t, n in noises.items()}, seed)
    if abs(g - 1.0) > 0.5:
        logger.debug("large composite rescale g=%.4f for %s", g, spec.condition)
    return NoisyPair(clean, noisy, spec, achieved, g)
