import itertools
import json

import numpy as np
import pytest

from ecgdenoise.bench import REFERENCE_LINE, LatencyReport, StageStats, report_json, run_bench, stability_warning
from ecgdenoise.errors import ValidationError
from ecgdenoise.model import Checkpoint, Denoiser, preset


@pytest.fixture(scope="module")
def tiny_ckpt():
    m = Denoiser.build(preset("tiny"), seed=0)
    x = np.random.default_rng(0).normal(size=(4, 40)).astype(np.float32)
    m.loss_and_grads(x, x)
    return Checkpoint.from_model(m)


def test_fake_clock_gives_exact_stats(tiny_ckpt):
    ticks = itertools.count()
    rep = run_bench(tiny_ckpt, n_segments=4, warmup=2, clock=lambda: next(ticks) * 0.01)
    # four clock reads per segment: each stage spans exactly one tick
    for stage in (rep.filter, rep.inference, rep.metrics):
        assert stage.mean_ms == pytest.approx(10.0) and stage.max_ms == pytest.approx(10.0)
    assert rep.total.mean_ms == pytest.approx(30.0)
    assert rep.realtime_ratio == pytest.approx(0.03 / 14.0)
    assert rep.faster_than_real_time and rep.n_segments == 4 and rep.warmup == 2


def test_report_fields(tiny_ckpt):
    rep = run_bench(tiny_ckpt, n_segments=2, warmup=0, dtype="f16")
    assert rep.dtype == "f16"
    d = json.loads(report_json(rep))
    assert d["reference"] == REFERENCE_LINE
    assert {"filter", "inference", "metrics", "total", "realtime_ratio", "host"} <= set(d)
    text = rep.format()
    assert "1.41 s" in text and "real-time ratio" in text
    with pytest.raises(ValidationError):
        run_bench(tiny_ckpt, n_segments=0)
    with pytest.raises(ValidationError):
        run_bench(tiny_ckpt, n_segments=1, dtype="bf16")


def test_stability_warning():
    def rep(ms):
        s = StageStats(ms, ms, ms, ms)
        return LatencyReport(1, 0, "f32", "h", s, s, s, s, ms / 14000)
    assert stability_warning(rep(10.0), rep(11.0)) is None
    assert "unstable" in stability_warning(rep(10.0), rep(20.0))
