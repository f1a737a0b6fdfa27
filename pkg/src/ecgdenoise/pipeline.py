"""End-to-end stages shared by the CLI and the quickstart run."""

from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .bench import LatencyReport, report_json, run_bench
from .config import PipelineConfig, quickstart_config
from .dataset import (
    AuditReport,
    Corpus,
    SplitManifest,
    SynthesisManifest,
    audit_leakage,
    build_training_manifest,
    build_validation_manifest,
    generate_synthetic_corpus,
    make_split,
    materialize,
)
from .errors import ValidationError
from .evaluation import (
    MatrixResult,
    export_waveforms,
    rows_csv,
    run_test_matrix,
    summarize,
    write_report,
)
from .model import Checkpoint, Denoiser, TrainResult, quantize_f16, train
from .noise_synth import Partition


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


def default_workers(cfg: PipelineConfig) -> int:
    env = os.environ.get("ECGDENOISE_WORKERS")
    if cfg.workers is not None:
        return cfg.workers
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"ECGDENOISE_WORKERS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def write_json(path: Path, obj, provenance: dict | None = None) -> None:
    if provenance is not None:
        obj = dict(obj, provenance=provenance)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def synthetic_corpus(cfg: PipelineConfig) -> Corpus:
    s = cfg.synthetic
    clean, noise = generate_synthetic_corpus(s.n_subjects, s.segs_per_subject, s.noise_per_type,
                                             cfg.seed, cfg.filter.fs_hz, s.shockable_fraction)
    return Corpus(clean, noise)


def split_corpus(cfg: PipelineConfig, corpus: Corpus) -> SplitManifest:
    return make_split(corpus.subjects(), corpus.noise_counts(), cfg.seed, cfg.split_ratios,
                      corpus.segments_per_subject())


def build_manifests(cfg: PipelineConfig, corpus: Corpus, split: SplitManifest):
    train_refs = corpus.refs_for(split.subjects(Partition.Train))
    tm = build_training_manifest(split, train_refs, cfg.condition_policy, cfg.train.target_snr_db)
    vm = None
    if split.subjects(Partition.Val) and split.noise_per_type(Partition.Val) > 0:
        vm = build_validation_manifest(split, corpus.refs_for(split.subjects(Partition.Val)),
                                       cfg.train.val_pairs, cfg.train.target_snr_db,
                                       cfg.condition_policy)
    return tm, vm


@dataclass
class QuickstartResult:
    out_dir: Path
    config: PipelineConfig
    corpus: Corpus
    split: SplitManifest
    train_manifest: SynthesisManifest
    val_manifest: SynthesisManifest | None
    audit: AuditReport
    training: TrainResult
    checkpoint: Checkpoint
    matrix: MatrixResult
    tables: list[Path]
    bench: LatencyReport | None
    summary: dict
    timings: dict = field(default_factory=dict)


def quickstart_e2e(seed: int = 0, out_dir: str | Path = "quickstart_out",
                   config: PipelineConfig | None = None, workers: int | None = None,
                   bench_segments: int = 5, log: Callable[[str], None] | None = None) -> QuickstartResult:
    """Synthetic corpus -> split -> manifests -> audit -> train -> eval tables -> bench."""
    cfg = config or quickstart_config(seed, str(out_dir))
    if config is not None and seed != cfg.seed:
        cfg = cfg.with_(seed=seed)
    n_workers = workers if workers is not None else default_workers(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = cfg.provenance()
    say = log or (lambda msg: print(msg, file=sys.stderr))
    say(f"config {prov['config_hash']} seed {cfg.seed} workers {n_workers}")
    (out / "config.json").write_text(cfg.dumps())
    timings: dict[str, float] = {}

    def stage(name: str, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc
        timings[name] = time.perf_counter() - t0
        say(f"[{name}] done in {timings[name]:.1f} s")
        return result

    def do_corpus():
        corpus = synthetic_corpus(cfg)
        corpus.save(out / "corpus")
        return corpus

    corpus = stage("synthetic-corpus", do_corpus)

    def do_split():
        split = split_corpus(cfg, corpus)
        write_json(out / "split.json", split.to_json(), prov)
        return split

    split = stage("split", do_split)

    def do_manifest():
        tm, vm = build_manifests(cfg, corpus, split)
        write_json(out / "train_manifest.json", tm.to_json(), prov)
        if vm is not None:
            write_json(out / "val_manifest.json", vm.to_json(), prov)
        return tm, vm

    tm, vm = stage("manifest", do_manifest)

    def do_audit():
        report = audit_leakage(split, tm, None, vm)
        (out / "audit.txt").write_text(f"# config_hash={prov['config_hash']} seed={cfg.seed}\n"
                                       + report.format() + "\n")
        if not report.passed:
            raise ValidationError(report.format())
        return report

    audit = stage("audit", do_audit)
    pre = cfg.filter.preprocessor()

    def do_train():
        model = Denoiser.build(cfg.model, cfg.train.model_seed if cfg.train.model_seed is not None else cfg.seed)
        val = materialize(vm, corpus, range(len(vm)), pre, n_workers) if vm is not None else None
        res = train(model, tm, corpus, cfg.train.epochs, cfg.train.batch_size, cfg.train.lr, val,
                    cfg.seed, pre, n_workers, log=say)
        best = res.history.best_epoch
        rec = res.history.epochs[best - 1]
        ck = Checkpoint.from_model(res.model, {
            "epoch": best, "train_loss": rec["train_loss"], "val_loss": rec["val_loss"],
            "seed": cfg.seed, "pipeline_config_hash": prov["config_hash"]})
        ck.save(out / "model.ednz")
        quantize_f16(ck).save(out / "model_f16.ednz")
        write_json(out / "history.json", res.history.to_json(), prov)
        return res, ck

    training, ck = stage("train", do_train)

    def do_eval():
        matrix = run_test_matrix(ck, split, corpus, cfg.snr_levels, preprocess=pre, seed=cfg.seed,
                                 train_manifest=tm, val_manifest=vm, workers=n_workers)
        prov_line = f"# config_hash={prov['config_hash']} seed={cfg.seed}"
        (out / "rows.csv").write_text(rows_csv(matrix.rows, prov_line))
        tables = write_report(matrix.rows, out / "tables", prov["config_hash"], cfg.seed)
        summary = summarize(matrix.rows, -5.0)
        summary["filter_delta_db"] = matrix.filter_delta_db()
        write_json(out / "summary.json", summary, prov)
        return matrix, tables, summary

    matrix, tables, summary = stage("eval", do_eval)

    def do_waveforms():
        wdir = out / "waveforms"
        wdir.mkdir(exist_ok=True)
        ids = [0]
        batch = materialize(matrix.manifest, corpus, ids, None, 1, np.float64)
        x = pre(batch.noisy[0, :, 0])
        y = ck.to_model().predict(x[None].astype(np.float32))[0]
        export_waveforms(pre.clean(batch.clean[0, :, 0]), x, y, cfg.filter.fs_hz,
                         wdir / "example_000.csv")
        write_json(wdir / "index.json", {"files": ["example_000.csv"], "entries": ids}, prov)

    stage("export-waveforms", do_waveforms)

    bench = None
    if bench_segments > 0:
        def do_bench():
            rep = run_bench(ck, bench_segments, warmup=1, preprocess=pre, seed=cfg.seed)
            (out / "bench.json").write_text(report_json(rep) + "\n")
            say(rep.format())
            return rep

        bench = stage("bench", do_bench)
    say(f"-5 dB: input SNR {summary['input_snr_db']:.2f} dB -> output {summary['output_snr_db']:.2f} dB; "
        f"r {summary['input_r']:.3f} -> {summary['output_r']:.3f}")
    return QuickstartResult(out, cfg, corpus, split, tm, vm, audit, training, ck, matrix, tables,
                            bench, summary, timings)
