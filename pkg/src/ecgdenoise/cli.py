"""Command-line entry point: ``ecgdenoise <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad input, failed audit, usage),
2 internal error. Diagnostics go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .bench import report_json, run_bench
from .config import PipelineConfig, quickstart_config
from .dataset import (
    Corpus,
    SplitManifest,
    SynthesisManifest,
    audit_leakage,
    build_test_manifest,
    build_training_manifest,
    build_validation_manifest,
    describe_manifest,
    generate_synthetic_corpus,
    make_split,
    materialize,
)
from .dsp import FilterSpec, design_butterworth_bandpass, response_csv, sections_csv
from .errors import ValidationError
from .evaluation import export_waveforms, rows_csv, run_test_matrix, summarize, write_report
from .model import Checkpoint, Denoiser, infer, preset, quantize_f16, train
from .noise_synth import NOISE_TYPES, NoiseType, Partition, parse_condition, condition_index
from .pipeline import StageError, default_workers, quickstart_e2e, write_json
from .wfdb_ingest import (
    RhythmTag,
    load_labels,
    read_record,
    read_segments,
    segment_record,
    write_segments,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers, got {text!r}") from None


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_(seed=args.seed)
    if getattr(args, "workers", None) is not None:
        cfg = cfg.with_(workers=args.workers)
    log(f"config {cfg.hash()} seed {cfg.seed}")
    return cfg


def _workers(args, cfg: PipelineConfig) -> int:
    return args.workers if getattr(args, "workers", None) else default_workers(cfg)


def _prov_line(cfg: PipelineConfig) -> str:
    return f"# config_hash={cfg.hash()} seed={cfg.seed}"


def _manifest(path) -> SynthesisManifest:
    return SynthesisManifest.from_json(_load_json(path))


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    labels = load_labels(args.labels) if args.labels else None
    if args.noise_type:
        t = NoiseType(args.noise_type.upper())
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        idx = args.start_index
        with open(out, "w") as fh:
            for hea in args.header:
                header, mv = read_record(hea, args.channel)
                for seg in segment_record(mv, header.sampling_rate_hz, header.record_name):
                    fh.write(json.dumps({"noise_type": t.value, "source_index": idx,
                                         "samples": seg.samples_mv.tolist()}) + "\n")
                    idx += 1
        log(f"wrote {idx - args.start_index} {t.value} noise segments to {out}")
        return 0
    segs = []
    for hea in args.header:
        header, mv = read_record(hea, args.channel)
        segs += segment_record(mv, header.sampling_rate_hz, header.record_name, labels)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_segments(segs, args.out)
    log(f"wrote {len(segs)} segments to {args.out}")
    return 0


def cmd_synthetic_corpus(args) -> int:
    cfg = _config(args)
    s = cfg.synthetic
    clean, noise = generate_synthetic_corpus(
        args.subjects or s.n_subjects, args.segs or s.segs_per_subject, args.noise or s.noise_per_type,
        cfg.seed, cfg.filter.fs_hz,
        s.shockable_fraction if args.shockable_fraction is None else args.shockable_fraction)
    Corpus(clean, noise).save(args.out)
    log(f"wrote {len(clean)} clean and {len(noise)} noise segments to {args.out}")
    return 0


def cmd_split(args) -> int:
    cfg = _config(args)
    corpus = Corpus.load(args.corpus)
    ratios = _floats(args.ratios) if args.ratios else cfg.split_ratios
    split = make_split(corpus.subjects(), corpus.noise_counts(), cfg.seed, ratios,
                       corpus.segments_per_subject())
    write_json(Path(args.out), split.to_json(), cfg.provenance())
    log(json.dumps(split.to_json()["counts"]))
    return 0


def cmd_manifest(args) -> int:
    cfg = _config(args)
    corpus = Corpus.load(args.corpus)
    split = SplitManifest.from_json(_load_json(args.split))
    snr = cfg.train.target_snr_db if args.snr is None else args.snr
    if args.kind == "train":
        m = build_training_manifest(split, corpus.refs_for(split.subjects(Partition.Train)),
                                    args.policy or cfg.condition_policy, snr)
    elif args.kind == "val":
        m = build_validation_manifest(split, corpus.refs_for(split.subjects(Partition.Val)),
                                      args.n_pairs or cfg.train.val_pairs, snr,
                                      args.policy or cfg.condition_policy)
    else:
        levels = _floats(args.levels) if args.levels else cfg.snr_levels
        m = build_test_manifest(split, corpus.refs_for(split.subjects(Partition.Test)), levels,
                                seed=cfg.seed)
    write_json(Path(args.out), m.to_json(), cfg.provenance())
    print(json.dumps(describe_manifest(m), indent=1))
    return 0


def cmd_audit(args) -> int:
    split = SplitManifest.from_json(_load_json(args.split))
    tm = _manifest(args.train) if args.train else None
    te = _manifest(args.test) if args.test else None
    va = _manifest(args.val) if args.val else None
    report = audit_leakage(split, tm, te, va)
    print(report.format())
    return 0 if report.passed else 1


def cmd_synth(args) -> int:
    cfg = _config(args)
    corpus = Corpus.load(args.corpus)
    m = _manifest(args.manifest)
    pre = None if args.no_filter else cfg.filter.preprocessor()
    n = len(m) if args.limit is None else min(args.limit, len(m))
    with open(args.out, "w") as fh:
        for start in range(0, n, 64):
            ids = range(start, min(start + 64, n))
            b = materialize(m, corpus, ids, pre, _workers(args, cfg), np.float64)
            for k, i in enumerate(b.entry_ids):
                ref, spec = m.entry(int(i))
                fh.write(json.dumps({"entry": int(i), "subject_id": ref[0], "segment_index": ref[1],
                                     "condition": spec.condition, "snr_db": spec.target_snr_db,
                                     "noisy": b.noisy[k, :, 0].tolist(),
                                     "clean": b.clean[k, :, 0].tolist()}) + "\n")
    log(f"wrote {n} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = Corpus.load(args.corpus)
    m = _manifest(args.manifest)
    mcfg = preset(args.preset) if args.preset else cfg.model
    workers = _workers(args, cfg)
    pre = cfg.filter.preprocessor()
    val = None
    if args.val_manifest:
        vm = _manifest(args.val_manifest)
        val = materialize(vm, corpus, range(len(vm)), pre, workers)
    epochs = cfg.train.epochs if args.epochs is None else args.epochs
    batch = cfg.train.batch_size if args.batch is None else args.batch
    lr = cfg.train.lr if args.lr is None else args.lr
    model = Denoiser.build(mcfg, cfg.seed)
    res = train(model, m, corpus, epochs, batch, lr, val, cfg.seed, pre, workers, log=log)
    rec = res.history.epochs[res.history.best_epoch - 1]
    ck = Checkpoint.from_model(res.model, {"epoch": res.history.best_epoch,
                                           "train_loss": rec["train_loss"], "val_loss": rec["val_loss"],
                                           "seed": cfg.seed, "pipeline_config_hash": cfg.hash()})
    if args.f16:
        ck = quantize_f16(ck)
    ck.save(args.out)
    if args.history:
        write_json(Path(args.history), res.history.to_json(), cfg.provenance())
    log(f"saved {args.out} (best epoch {res.history.best_epoch})")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    ck = Checkpoint.load(args.model)
    corpus = Corpus.load(args.corpus)
    split = SplitManifest.from_json(_load_json(args.split))
    levels = _floats(args.levels) if args.levels else (None if args.rhythms else cfg.snr_levels)
    rhythms = [r for r in args.rhythms.split(",") if r] if args.rhythms else None
    conditions = [condition_index(parse_condition(c)) for c in args.conditions.split(";")] \
        if args.conditions else None
    res = run_test_matrix(ck, split, corpus, levels, conditions, rhythms, cfg.filter.preprocessor(),
                          cfg.seed,
                          _manifest(args.train_manifest) if args.train_manifest else None,
                          _manifest(args.val_manifest) if args.val_manifest else None,
                          workers=_workers(args, cfg))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(rows_csv(res.rows, _prov_line(cfg)))
    if args.agg_out:
        for p in write_report(res.rows, args.agg_out, cfg.hash(), cfg.seed):
            log(f"wrote {p}")
    if any(r.snr_level_db == -5.0 for r in res.rows):
        print(json.dumps(summarize(res.rows, -5.0), indent=1))
    log(f"filter delta: {res.filter_delta_db()}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    ck = Checkpoint.load(args.model)
    rep = run_bench(ck, args.n, args.warmup, args.dtype, cfg.filter.preprocessor(), cfg.seed)
    print(rep.format())
    if args.json:
        Path(args.json).write_text(report_json(rep) + "\n")
    return 0


def cmd_denoise(args) -> int:
    cfg = _config(args)
    ck = Checkpoint.load(args.model)
    model = ck.to_model()
    segs = read_segments(args.inp)
    pre = None if args.no_filter else cfg.filter.preprocessor()
    out = []
    for s in segs:
        x = s.samples_mv if pre is None else pre(s.samples_mv)
        y = infer(model, x).astype(np.float64)
        out.append(type(s)(y, s.sampling_rate_hz, s.subject_id, s.segment_index, s.rhythm_tag))
    write_segments(out, args.out)
    log(f"denoised {len(out)} segments -> {args.out}")
    return 0


def cmd_dsp(args) -> int:
    spec = FilterSpec(args.order, args.low, args.high, args.fs)
    cascade = design_butterworth_bandpass(spec)
    if args.action == "design":
        sys.stdout.write(sections_csv(cascade))
    else:
        sys.stdout.write(response_csv(cascade, args.fs, args.n))
    return 0


def cmd_export_waveforms(args) -> int:
    cfg = _config(args)
    model = Checkpoint.load(args.model).to_model()
    corpus = Corpus.load(args.corpus)
    split = SplitManifest.from_json(_load_json(args.split))
    tags = [RhythmTag.parse(args.rhythm)] if args.rhythm else None
    refs = corpus.refs_for(split.subjects(Partition.Test), tags)[: args.n]
    if not refs:
        raise ValidationError("no test segments match")
    cond = [condition_index(parse_condition(args.condition))]
    m = build_test_manifest(split, refs, [args.level], cond, cfg.seed)
    pre = cfg.filter.preprocessor()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(len(m)):
        b = materialize(m, corpus, [i], None, 1, np.float64)
        x = pre(b.noisy[0, :, 0])
        y = model.predict(x[None].astype(np.float32))[0]
        subject, idx = m.clean_ref(i)
        name = f"{subject}_{idx:04d}.csv"
        export_waveforms(pre.clean(b.clean[0, :, 0]), x, y, cfg.filter.fs_hz, out / name)
        files.append(name)
    write_json(out / "index.json", {"files": files, "condition": args.condition, "level_db": args.level},
               cfg.provenance())
    log(f"wrote {len(files)} waveform CSVs to {out}")
    return 0


def cmd_quickstart(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else quickstart_config(args.seed, args.out)
    res = quickstart_e2e(args.seed, args.out, cfg, args.workers, args.bench_n, log=log)
    print(json.dumps(res.summary, indent=1))
    return 0


def cmd_config(args) -> int:
    cfg = quickstart_config() if args.quickstart else PipelineConfig()
    sys.stdout.write(cfg.dumps())
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, help="synthesis worker threads (1 = canonical path)")

    p = _Parser(prog="ecgdenoise", description="ECG denoising pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="read format-212 records into 14 s segments")
    s.add_argument("--header", nargs="+", required=True, help=".hea files")
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--labels", help="CSV with subject_id,segment_index,rhythm_tag")
    s.add_argument("--noise-type", choices=[t.value for t in NOISE_TYPES] + [t.value.lower() for t in NOISE_TYPES],
                   help="write noise-segment lines instead of clean segments")
    s.add_argument("--start-index", type=int, default=0, help="first noise source index")
    s.add_argument("--out", required=True, help=".jsonl or .ecgs")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synthetic-corpus", parents=[common], help="generate a pseudo-ECG corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int)
    s.add_argument("--segs", type=int, help="segments per subject")
    s.add_argument("--noise", type=int, help="noise segments per type")
    s.add_argument("--shockable-fraction", type=float)
    s.set_defaults(func=cmd_synthetic_corpus)

    s = sub.add_parser("split", parents=[common], help="subject and noise partitions")
    s.add_argument("--corpus", required=True)
    s.add_argument("--ratios", help="train,val,test fractions (default from config)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("manifest", parents=[common], help="build a synthesis manifest")
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--kind", choices=("train", "val", "test"), default="train")
    s.add_argument("--policy", choices=("round-robin", "random", "all"))
    s.add_argument("--snr", type=float, help="target SNR for train/val")
    s.add_argument("--n-pairs", type=int, help="validation pairs")
    s.add_argument("--levels", help="test SNR levels, e.g. -5,0,5")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_manifest)

    s = sub.add_parser("audit", help="check manifests for subject/noise leakage")
    s.add_argument("--split", required=True)
    s.add_argument("--train")
    s.add_argument("--test")
    s.add_argument("--val")
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("synth", parents=[common], help="materialize noisy/clean pairs to JSONL")
    s.add_argument("--corpus", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--limit", type=int)
    s.add_argument("--no-filter", action="store_true", help="skip the bandpass")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train the denoiser")
    s.add_argument("--manifest", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--val-manifest")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--preset", choices=("desk", "wide", "tiny"))
    s.add_argument("--f16", action="store_true", help="store weights as float16")
    s.add_argument("--history")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="run the test matrix and write tables")
    s.add_argument("--model", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--levels")
    s.add_argument("--rhythms", help="e.g. vt,vf (implies -5 dB unless --levels)")
    s.add_argument("--conditions", help="semicolon list, e.g. 'emg;emg+bw'")
    s.add_argument("--train-manifest")
    s.add_argument("--val-manifest")
    s.add_argument("--out", required=True, help="per-row CSV")
    s.add_argument("--agg-out", help="directory for table CSVs")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="per-segment latency report")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--dtype", choices=("f32", "f16"))
    s.add_argument("--json")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("denoise", parents=[common], help="denoise a segment file")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-filter", action="store_true", help="input is already bandpassed")
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("dsp", help="bandpass design and response")
    s.add_argument("action", choices=("design", "response"))
    s.add_argument("--order", type=int, default=4)
    s.add_argument("--low", type=float, default=0.5)
    s.add_argument("--high", type=float, default=45.0)
    s.add_argument("--fs", type=float, default=360.0)
    s.add_argument("--n", type=int, default=1024, help="response grid points")
    s.set_defaults(func=cmd_dsp)

    s = sub.add_parser("export-waveforms", parents=[common], help="plot-ready clean/noisy/denoised CSVs")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--rhythm")
    s.add_argument("--n", type=int, default=3)
    s.add_argument("--condition", default="emg+bw+ma")
    s.add_argument("--level", type=float, default=-5.0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_export_waveforms)

    s = sub.add_parser("quickstart", help="synthetic end-to-end run")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="quickstart_out")
    s.add_argument("--config")
    s.add_argument("--workers", type=int)
    s.add_argument("--bench-n", type=int, default=5)
    s.set_defaults(func=cmd_quickstart)

    s = sub.add_parser("config", help="print a default config")
    s.add_argument("--quickstart", action="store_true")
    s.set_defaults(func=cmd_config)
    return p


_LIST_FLAGS = ("--levels", "--ratios")


def _join_negative_values(argv: Sequence[str]) -> list[str]:
    # "--levels -5,0,5" would otherwise be read as an unknown option
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok in _LIST_FLAGS and i + 1 < len(argv) and argv[i + 1][:1] == "-" \
                and argv[i + 1][1:2].isdigit():
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = _join_negative_values(sys.argv[1:] if argv is None else list(argv))
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc.cause, ValidationError) else 2
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
