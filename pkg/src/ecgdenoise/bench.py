"""Per-segment latency of the filter -> inference -> metrics pipeline."""

from __future__ import annotations

import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .dataset import generate_synthetic_corpus
from .dsp import FilterSpec, Preprocessor
from .errors import ValidationError
from .evaluation import evaluate_pair
from .model import Checkpoint, Denoiser, quantize_f16
from .noise_synth import NOISE_TYPES, mix_arrays

REFERENCE_LINE = "published figure: 1.41 s per 14 s segment on a Raspberry Pi 4"
SEGMENT_SECONDS = 14.0


@dataclass(frozen=True)
class StageStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    max_ms: float

    @classmethod
    def of(cls, seconds) -> "StageStats":
        ms = np.asarray(seconds, dtype=np.float64) * 1000.0
        return cls(float(ms.mean()), float(np.percentile(ms, 50)), float(np.percentile(ms, 95)),
                   float(ms.max()))


@dataclass(frozen=True)
class LatencyReport:
    n_segments: int
    warmup: int
    dtype: str
    host: str
    filter: StageStats
    inference: StageStats
    metrics: StageStats
    total: StageStats
    realtime_ratio: float
    reference: str = REFERENCE_LINE
    note: str = "model load time excluded; I/O and report writing excluded"

    @property
    def faster_than_real_time(self) -> bool:
        return self.realtime_ratio < 1.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["faster_than_real_time"] = self.faster_than_real_time
        return d

    def format(self) -> str:
        lines = [f"segments: {self.n_segments} (warmup {self.warmup} excluded), weights {self.dtype}",
                 f"host: {self.host}",
                 f"{'stage':<10}{'mean ms':>10}{'p50 ms':>10}{'p95 ms':>10}{'max ms':>10}"]
        for name in ("filter", "inference", "metrics", "total"):
            s: StageStats = getattr(self, name)
            lines.append(f"{name:<10}{s.mean_ms:>10.2f}{s.p50_ms:>10.2f}{s.p95_ms:>10.2f}{s.max_ms:>10.2f}")
        label = "faster than real time" if self.faster_than_real_time else "slower than real time"
        lines.append(f"real-time ratio: {self.realtime_ratio:.4f} ({label}; total / {SEGMENT_SECONDS:g} s)")
        lines.append(f"reference: {self.reference}")
        lines.append(self.note)
        return "\n".join(lines)


def host_descriptor() -> str:
    return f"{platform.system()} {platform.machine()} python {platform.python_version()} cpus={os.cpu_count()}"


def bench_segments(n: int, seed: int = 0, fs: float = 360.0) -> tuple[np.ndarray, np.ndarray]:
    """``n`` synthetic (clean, noisy at -5 dB, all three noise types) pairs."""
    clean, noise = generate_synthetic_corpus(1, n, 3, seed, fs)
    by_type = {t: [s.samples for s in noise if s.noise_type == t] for t in NOISE_TYPES}
    c = np.stack([s.samples_mv for s in clean])
    x = np.stack([mix_arrays(c[i], {t: by_type[t][i % 3] for t in NOISE_TYPES}, -5.0)[0]
                  for i in range(n)])
    return c, x


def run_bench(checkpoint: Checkpoint | Denoiser, n_segments: int = 100, warmup: int = 3,
              dtype: str | None = None, preprocess: Preprocessor | None = None, seed: int = 0,
              segments: tuple[np.ndarray, np.ndarray] | None = None,
              clock: Callable[[], float] = time.perf_counter) -> LatencyReport:
    """Time each segment through bandpass, inference and metric computation.

    ``clock`` is injectable for testing; the model is loaded before timing.
    """
    if n_segments < 1 or warmup < 0:
        raise ValidationError("n_segments must be >= 1 and warmup >= 0")
    if isinstance(checkpoint, Denoiser):
        checkpoint = Checkpoint.from_model(checkpoint)
    if dtype == "f16" and checkpoint.weight_dtype != "f16":
        checkpoint = quantize_f16(checkpoint)
    elif dtype not in (None, "f16", "f32"):
        raise ValidationError(f"dtype must be f16 or f32, got {dtype!r}")
    label = checkpoint.weight_dtype
    model = checkpoint.to_model()
    length = model.config.input_length
    if preprocess is None:
        preprocess = Preprocessor.from_spec(FilterSpec())
    if segments is None:
        clean, noisy = bench_segments(n_segments + warmup, seed)
    else:
        clean, noisy = (np.asarray(a, dtype=np.float64) for a in segments)
    if clean.shape[-1] < length:
        raise ValidationError(f"segments of {clean.shape[-1]} samples are shorter than the model input {length}")
    if clean.shape[-1] > length:  # centred window for short-input models
        start = (clean.shape[-1] - length) // 2
        clean, noisy = clean[..., start:start + length], noisy[..., start:start + length]
    if len(noisy) < 1:
        raise ValidationError("no segments to benchmark")

    times = {"filter": [], "inference": [], "metrics": [], "total": []}
    for k in range(warmup + n_segments):
        i = k % len(noisy)
        t0 = clock()
        x = preprocess(noisy[i])
        t1 = clock()
        y = model.predict(x[None].astype(np.float32))[0]
        t2 = clock()
        evaluate_pair(clean[i], x, y)
        t3 = clock()
        if k >= warmup:
            times["filter"].append(t1 - t0)
            times["inference"].append(t2 - t1)
            times["metrics"].append(t3 - t2)
            times["total"].append(t3 - t0)
    stats = {k: StageStats.of(v) for k, v in times.items()}
    ratio = stats["total"].mean_ms / 1000.0 / SEGMENT_SECONDS
    return LatencyReport(n_segments, warmup, label, host_descriptor(), stats["filter"],
                         stats["inference"], stats["metrics"], stats["total"], ratio)


def stability_warning(a: LatencyReport, b: LatencyReport, tol: float = 0.25) -> str | None:
    """Soft repeat-run check; returns a message when mean totals differ by more than ``tol``."""
    lo, hi = sorted((a.total.mean_ms, b.total.mean_ms))
    if lo > 0 and (hi - lo) / lo > tol:
        return f"latency unstable across runs: {lo:.1f} ms vs {hi:.1f} ms (> {tol:.0%})"
    return None


def run_throughput(checkpoint: Checkpoint, n_segments: int = 32, clients: int = 4, seed: int = 0) -> dict:
    """Segments per second with ``clients`` threads sharing one model (not a latency figure)."""
    model = checkpoint.to_model()
    pre = Preprocessor.from_spec(FilterSpec())
    _, noisy = bench_segments(n_segments, seed)

    def one(i):
        return model.predict(pre(noisy[i])[None].astype(np.float32))[0]

    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=clients) as pool:
        list(pool.map(one, range(n_segments)))
    dt = time.perf_counter() - t0
    return {"clients": clients, "segments": n_segments, "seconds": dt,
            "segments_per_second": n_segments / dt if dt > 0 else float("inf")}


def report_json(report: LatencyReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True)
