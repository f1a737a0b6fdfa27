"""Per-pair metrics, the test matrix runner and table reports."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import (
    AuditReport,
    Corpus,
    SplitManifest,
    SynthesisManifest,
    audit_leakage,
    build_test_manifest,
    materialize,
)
from .dsp import measure_snr_db
from .errors import ValidationError
from .model import Checkpoint, Denoiser
from .noise_synth import Partition, condition_name, enumerate_conditions
from .wfdb_ingest import SHOCKABLE, RhythmTag

METRICS = ("snr_db", "mse", "rmse", "pearson_r")
DEFAULT_LEVELS = (-5.0, 0.0, 5.0)


class UndefinedCorrelationError(ValidationError):
    pass


class LeakageError(ValidationError):
    def __init__(self, report: AuditReport):
        self.report = report
        super().__init__("leakage audit failed; refusing to evaluate\n" + report.format(limit=10))


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValidationError(f"pearson_r needs two equal-length 1-d inputs of length >= 2, "
                              f"got {x.shape} and {y.shape}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined: an input has zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class PairMetrics:
    snr_db: float
    mse: float
    rmse: float
    pearson_r: float  # NaN when undefined
    correlation_defined: bool


def evaluate_pair(clean, noisy, denoised) -> PairMetrics:
    clean = np.asarray(clean, dtype=np.float64)
    den = np.asarray(denoised, dtype=np.float64)
    if not (clean.shape == den.shape == np.shape(noisy)):
        raise ValidationError(f"length mismatch: clean {clean.shape}, noisy {np.shape(noisy)}, "
                              f"denoised {den.shape}")
    diff = den - clean
    mse = float(np.mean(diff * diff))
    try:
        r, ok = pearson_r(clean, den), True
    except UndefinedCorrelationError:
        r, ok = float("nan"), False
    return PairMetrics(measure_snr_db(clean, den), mse, math.sqrt(mse), r, ok)


@dataclass(frozen=True)
class MetricsRow:
    condition: str
    snr_level_db: float
    subject_id: str
    rhythm_tag: str
    segment_index: int
    entry_index: int
    snr_db: float
    mse: float
    rmse: float
    pearson_r: float
    correlation_defined: bool
    input_snr_db: float           # realized SNR of the raw noisy mix (== level)
    filtered_input_snr_db: float  # SNR of the bandpassed network input vs clean
    input_pearson_r: float        # r(clean, raw noisy)
    filtered_input_pearson_r: float


ROW_FIELDS = tuple(f.name for f in fields(MetricsRow))


@dataclass
class MatrixResult:
    rows: list[MetricsRow]
    audit: AuditReport
    manifest: SynthesisManifest

    def filter_delta_db(self) -> dict:
        """How far the bandpass moves the input SNR away from the synthesis target."""
        d = np.array([r.filtered_input_snr_db - r.input_snr_db for r in self.rows])
        if len(d) == 0:
            return {"n": 0}
        return {"n": len(d), "mean": float(d.mean()), "min": float(d.min()), "max": float(d.max())}


def _safe_r(a, b) -> float:
    try:
        return pearson_r(a, b)
    except UndefinedCorrelationError:
        return float("nan")


def run_test_matrix(model: Denoiser | Checkpoint, split: SplitManifest, corpus: Corpus,
                    snr_levels: Sequence[float] | None = None,
                    conditions: Sequence[int] | None = None, rhythms: Iterable | None = None,
                    preprocess=None, seed: int = 0,
                    train_manifest: SynthesisManifest | None = None,
                    val_manifest: SynthesisManifest | None = None,
                    batch_size: int = 32, workers: int = 1) -> MatrixResult:
    """Evaluate every (test segment x condition x level) tuple.

    With a rhythm filter and no explicit levels only -5 dB is run. The leakage
    audit runs first and a failure aborts before any inference.
    """
    model = model.to_model() if isinstance(model, Checkpoint) else model
    tags = None if rhythms is None else [RhythmTag.parse(r) if not isinstance(r, RhythmTag) else r
                                         for r in rhythms]
    if snr_levels is None:
        snr_levels = (-5.0,) if tags else DEFAULT_LEVELS
    refs = corpus.refs_for(split.subjects(Partition.Test), tags)
    if not refs:
        raise ValidationError("no test segments match the requested rhythms")
    manifest = build_test_manifest(split, refs, snr_levels, conditions, seed)
    report = audit_leakage(split, train_manifest, manifest, val_manifest)
    if not report.passed:
        raise LeakageError(report)

    names = [condition_name(c) for c in enumerate_conditions()]
    rows: list[MetricsRow] = []
    for start in range(0, len(manifest), batch_size):
        ids = np.arange(start, min(start + batch_size, len(manifest)))
        raw = materialize(manifest, corpus, ids, None, workers, np.float64)
        net_in = raw.noisy[..., 0] if preprocess is None else preprocess(raw.noisy[..., 0], axis=-1)
        target = raw.clean[..., 0] if preprocess is None else preprocess.clean(raw.clean[..., 0], axis=-1)
        den = model.predict(net_in.astype(np.float32), batch_size=batch_size).astype(np.float64)
        for b, i in enumerate(ids):
            subject, seg_idx = manifest.clean_ref(int(i))
            clean, noisy = target[b], raw.noisy[b, :, 0]
            m = evaluate_pair(clean, net_in[b], den[b])
            rows.append(MetricsRow(
                names[int(manifest.condition[i])], float(manifest.snr_db[i]), subject,
                corpus.segment((subject, seg_idx)).rhythm_tag.value, seg_idx, int(i),
                m.snr_db, m.mse, m.rmse, m.pearson_r, m.correlation_defined,
                measure_snr_db(raw.clean[b, :, 0], noisy),
                measure_snr_db(clean, net_in[b]),
                _safe_r(clean, noisy), _safe_r(clean, net_in[b])))
    order = {n: k for k, n in enumerate(names)}
    rows.sort(key=lambda r: (r.subject_id, order[r.condition], r.snr_level_db, r.entry_index))
    return MatrixResult(rows, report, manifest)


# --------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class AggregateRow:
    group: tuple[str, ...]
    n: int
    mean: dict
    sd: dict
    n_undefined_r: int = 0


def _sample_sd(v: np.ndarray) -> float:
    if len(v) < 2:
        return 0.0
    if not np.all(np.isfinite(v)):
        return float("nan")
    return float(np.std(v, ddof=1))


GROUPINGS = {
    "condition": lambda r: (r.condition,),
    "subject": lambda r: (r.subject_id,),
    "rhythm": lambda r: (r.rhythm_tag,),
    "rhythm_condition": lambda r: (r.rhythm_tag, r.condition),
}


def _group_sort_key(group_by: str):
    cond_order = {condition_name(c): k for k, c in enumerate(enumerate_conditions())}

    def key(g):
        if group_by == "condition":
            return (cond_order[g[0]],)
        if group_by == "rhythm_condition":
            return (g[0], cond_order[g[1]])
        return g
    return key


def aggregate(rows: Sequence[MetricsRow], group_by: str = "condition",
              overall: bool | None = None) -> list[AggregateRow]:
    """Mean and sample SD (n - 1) per metric per group.

    The Overall row (default: only for ``condition`` grouping) is the mean and
    SD of the group means, not of the pooled rows. Rows whose correlation is
    undefined are left out of the correlation statistics and counted.
    """
    if group_by not in GROUPINGS:
        raise ValidationError(f"group_by must be one of {sorted(GROUPINGS)}")
    if overall is None:
        overall = group_by == "condition"
    groups: dict[tuple, list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault(GROUPINGS[group_by](r), []).append(r)
    out = []
    for g in sorted(groups, key=_group_sort_key(group_by)):
        members = groups[g]
        mean, sd = {}, {}
        undefined = sum(1 for r in members if not r.correlation_defined)
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in members
                             if m != "pearson_r" or r.correlation_defined], dtype=np.float64)
            if len(vals) == 0:
                mean[m], sd[m] = float("nan"), float("nan")
            else:
                mean[m] = float(np.mean(vals))
                sd[m] = _sample_sd(vals)
        out.append(AggregateRow(g, len(members), mean, sd, undefined))
    if undefined_total := sum(a.n_undefined_r for a in out):
        warnings.warn(f"{undefined_total} rows with undefined correlation excluded", stacklevel=2)
    if overall and out:
        mean, sd = {}, {}
        for m in METRICS:
            gm = np.array([a.mean[m] for a in out], dtype=np.float64)
            gm = gm[~np.isnan(gm)]
            mean[m] = float(np.mean(gm)) if len(gm) else float("nan")
            sd[m] = _sample_sd(gm)
        width = len(out[0].group)
        out.append(AggregateRow(("Overall",) + ("",) * (width - 1), sum(a.n for a in out), mean, sd,
                                sum(a.n_undefined_r for a in out)))
    return out


# --------------------------------------------------------------------------
# reports

GROUP_HEADERS = {
    "condition": ("noise_combination",),
    "subject": ("subject",),
    "rhythm": ("rhythm",),
    "rhythm_condition": ("ecg_type", "noise_combination"),
}


def _fmt(v: float) -> str:
    return repr(float(v))


def provenance_line(config_hash: str, seed: int) -> str:
    return f"# config_hash={config_hash} seed={seed}"


def aggregate_csv(agg: Sequence[AggregateRow], group_by: str, provenance: str | None = None) -> str:
    buf = io.StringIO()
    if provenance:
        buf.write(provenance + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(GROUP_HEADERS[group_by]) + ["n"]
               + [f"{m}_{s}" for m in METRICS for s in ("mean", "sd")] + ["n_undefined_r"])
    for a in agg:
        w.writerow(list(a.group) + [a.n] + [_fmt(v) for m in METRICS for v in (a.mean[m], a.sd[m])]
                   + [a.n_undefined_r])
    return buf.getvalue()


def rows_csv(rows: Sequence[MetricsRow], provenance: str | None = None) -> str:
    buf = io.StringIO()
    if provenance:
        buf.write(provenance + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for r in rows:
        d = asdict(r)
        w.writerow([_fmt(d[k]) if isinstance(d[k], float) else d[k] for k in ROW_FIELDS])
    return buf.getvalue()


def read_csv(text_or_path) -> list[dict]:
    """Parse one of the emitted CSVs, skipping ``#`` comment lines."""
    p = Path(text_or_path) if not isinstance(text_or_path, str) or "\n" not in text_or_path else None
    text = p.read_text() if p is not None else text_or_path
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# (file name, level, grouping)
TABLES = (
    ("table1_by_condition.csv", -5.0, "condition"),
    ("table2_by_subject.csv", -5.0, "subject"),
    ("table3_by_condition_0db.csv", 0.0, "condition"),
    ("table4_by_subject_0db.csv", 0.0, "subject"),
    ("table5_plus5db.csv", 5.0, "condition"),
    ("table6_by_subject_plus5db.csv", 5.0, "subject"),
)
SHOCKABLE_TABLE = "table5_shockable.csv"


def build_tables(rows: Sequence[MetricsRow]) -> dict[str, tuple[str, list[AggregateRow]]]:
    """Table name -> (grouping, aggregate rows) for every table the rows support."""
    tables = {}
    for name, level, group in TABLES:
        sel = [r for r in rows if r.snr_level_db == level]
        if sel:
            tables[name] = (group, aggregate(sel, group))
    shock = {t.value for t in SHOCKABLE}
    sel = [r for r in rows if r.rhythm_tag in shock and r.snr_level_db == -5.0]
    if sel:
        tables[SHOCKABLE_TABLE] = ("rhythm_condition", aggregate(sel, "rhythm_condition"))
    return tables


def write_report(rows: Sequence[MetricsRow], out_dir: str | Path, config_hash: str,
                 seed: int) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance_line(config_hash, seed)
    written = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tables = build_tables(rows)
    for name, (group, agg) in tables.items():
        p = out / name
        p.write_text(aggregate_csv(agg, group, prov))
        written.append(p)
    return written


WAVEFORM_HEADER = "t_s,clean_mv,noisy_mv,denoised_mv"


def export_waveforms(clean, noisy, denoised, fs: float = 360.0, path: str | Path | None = None) -> str:
    """Plot-ready CSV; the first line is exactly :data:`WAVEFORM_HEADER`."""
    cols = [np.asarray(a, dtype=np.float64) for a in (clean, noisy, denoised)]
    if not (cols[0].shape == cols[1].shape == cols[2].shape) or cols[0].ndim != 1:
        raise ValidationError("clean, noisy and denoised must be equal-length 1-d arrays")
    if fs <= 0:
        raise ValidationError("fs must be positive")
    lines = [WAVEFORM_HEADER]
    for i in range(len(cols[0])):
        lines.append(",".join([_fmt(i / fs)] + [_fmt(c[i]) for c in cols]))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def summarize(rows: Sequence[MetricsRow], level: float = -5.0) -> dict:
    """Mean output vs input SNR and correlation at one level."""
    sel = [r for r in rows if r.snr_level_db == level]
    if not sel:
        raise ValidationError(f"no rows at {level} dB")
    ok = [r for r in sel if r.correlation_defined]

    def mean(key, rs):
        return float(np.mean([getattr(r, key) for r in rs])) if rs else float("nan")

    return {
        "level_db": level,
        "n": len(sel),
        "output_snr_db": mean("snr_db", sel),
        "input_snr_db": mean("input_snr_db", sel),
        "filtered_input_snr_db": mean("filtered_input_snr_db", sel),
        "output_r": mean("pearson_r", ok),
        "input_r": mean("input_pearson_r", ok),
        "filtered_input_r": mean("filtered_input_pearson_r", ok),
    }
