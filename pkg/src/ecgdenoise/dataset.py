"""Leak-free partitioning, synthesis manifests, batch streaming, toy corpus.

Manifests never hold samples. An entry is ``(clean segment, noise triplet,
condition, target SNR)`` and is synthesised on demand, so the full training
corpus (hundreds of thousands of 5,040-sample pairs) costs a few megabytes.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .dsp import FilterSpec, design_butterworth_bandpass, filter_forward
from .errors import StreamError, ValidationError
from .noise_synth import (
    NOISE_TYPES,
    MixSpec,
    NoisyPair,
    NoiseSegment,
    NoiseType,
    Partition,
    condition_name,
    enumerate_conditions,
    mix_arrays,
)
from .wfdb_ingest import (
    EcgSegment,
    RhythmTag,
    read_segments,
    segment_length,
    segment_record,
    write_segments,
)


SCHEMA_VERSION = 1
SegmentRef = tuple  # (subject_id, segment_index)


# --------------------------------------------------------------------------
# corpus


class Corpus:
    """In-memory store of clean segments and per-type noise segments."""

    def __init__(self, clean: Iterable[EcgSegment], noise: Iterable[NoiseSegment]):
        self.clean = list(clean)
        self._by_key = {}
        for seg in self.clean:
            if seg.key in self._by_key:
                raise ValidationError(f"duplicate clean segment {seg.key}")
            self._by_key[seg.key] = seg
        self.noise: dict[NoiseType, dict[int, NoiseSegment]] = {t: {} for t in NOISE_TYPES}
        for n in noise:
            bucket = self.noise[n.noise_type]
            if n.source_index in bucket:
                raise ValidationError(f"duplicate noise segment {n.noise_type.value}/{n.source_index}")
            bucket[n.source_index] = n
        for t, bucket in self.noise.items():
            if bucket and sorted(bucket) != list(range(len(bucket))):
                raise ValidationError(f"{t.value} noise indices must be 0..{len(bucket) - 1}")

    def segment(self, ref) -> EcgSegment:
        return self._by_key[(str(ref[0]), int(ref[1]))]

    def noise_segment(self, noise_type, index: int) -> NoiseSegment:
        return self.noise[NoiseType(noise_type)][int(index)]

    def subjects(self) -> list[str]:
        return sorted({s.subject_id for s in self.clean})

    def refs_for(self, subjects: Iterable[str], rhythms=None) -> list[SegmentRef]:
        wanted = set(subjects)
        return [
            seg.key for seg in self.clean
            if seg.subject_id in wanted and (rhythms is None or seg.rhythm_tag in rhythms)
        ]

    def noise_counts(self) -> dict[NoiseType, int]:
        return {t: len(b) for t, b in self.noise.items()}

    def segments_per_subject(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s in self.clean:
            out[s.subject_id] = out.get(s.subject_id, 0) + 1
        return out

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        (d / "noise").mkdir(parents=True, exist_ok=True)
        write_segments(self.clean, d / "clean.jsonl")
        for t in NOISE_TYPES:
            with open(d / "noise" / f"{t.value}.jsonl", "w") as fh:
                for idx in sorted(self.noise[t]):
                    n = self.noise[t][idx]
                    fh.write(json.dumps({"noise_type": t.value, "source_index": idx,
                                         "samples": n.samples.tolist()}) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "Corpus":
        d = Path(directory)
        clean_path = d / "clean.jsonl"
        if not clean_path.exists() and (d / "clean.ecgs").exists():
            clean_path = d / "clean.ecgs"
        clean = read_segments(clean_path)
        return cls(clean, load_noise_dir(d / "noise"))


def load_noise_dir(directory: str | Path) -> list[NoiseSegment]:
    noise = []
    for t in NOISE_TYPES:
        path = Path(directory) / f"{t.value}.jsonl"
        if not path.exists():
            continue
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    noise.append(NoiseSegment(np.asarray(rec["samples"], dtype=np.float64),
                                              NoiseType(rec.get("noise_type", t.value)),
                                              int(rec["source_index"])))
    return noise


# --------------------------------------------------------------------------
# split


def _partition_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Sizes of (train, val, test); test and val round down, train takes the rest."""
    _, r_val, r_test = ratios
    n_test = int(math.floor(r_test * n + 1e-9))
    n_val = int(math.floor(r_val * n + 1e-9))
    return n - n_val - n_test, n_val, n_test


def _normalize_ratios(ratios) -> tuple[float, float, float]:
    if isinstance(ratios, Mapping):
        ratios = (ratios.get("train", 0.0), ratios.get("val", 0.0), ratios.get("test", 0.0))
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValidationError(f"ratios must be three non-negative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)}")
    return ratios


@dataclass(frozen=True)
class SplitManifest:
    subjects_train: tuple[str, ...]
    subjects_val: tuple[str, ...]
    subjects_test: tuple[str, ...]
    noise_train: Mapping[NoiseType, tuple[int, ...]]
    noise_val: Mapping[NoiseType, tuple[int, ...]]
    noise_test: Mapping[NoiseType, tuple[int, ...]]
    seed: int
    ratios: tuple[float, float, float] = (0.8, 0.0, 0.2)
    counts: Mapping[str, int] = field(default_factory=dict)

    def subjects(self, part: Partition) -> tuple[str, ...]:
        return {Partition.Train: self.subjects_train, Partition.Val: self.subjects_val,
                Partition.Test: self.subjects_test}[Partition(part)]

    def noise(self, part: Partition) -> Mapping[NoiseType, tuple[int, ...]]:
        return {Partition.Train: self.noise_train, Partition.Val: self.noise_val,
                Partition.Test: self.noise_test}[Partition(part)]

    def noise_per_type(self, part: Partition) -> int:
        sizes = {len(v) for v in self.noise(part).values()}
        if len(sizes) != 1:
            raise ValidationError(f"{Partition(part).value} noise sets differ in size per type: {sizes}")
        return sizes.pop()

    def to_json(self) -> dict:
        def nz(m):
            return {t.value: list(m[t]) for t in NOISE_TYPES if t in m}
        return {
            "schema": SCHEMA_VERSION,
            "kind": "split",
            "seed": self.seed,
            "ratios": list(self.ratios),
            "subjects_train": list(self.subjects_train),
            "subjects_val": list(self.subjects_val),
            "subjects_test": list(self.subjects_test),
            "noise_train": nz(self.noise_train),
            "noise_val": nz(self.noise_val),
            "noise_test": nz(self.noise_test),
            "counts": dict(self.counts),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SplitManifest":
        if obj.get("schema") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported split schema {obj.get('schema')!r}")

        def nz(m):
            return {NoiseType(k): tuple(int(i) for i in v) for k, v in m.items()}
        return cls(
            tuple(obj["subjects_train"]), tuple(obj["subjects_val"]), tuple(obj["subjects_test"]),
            nz(obj["noise_train"]), nz(obj["noise_val"]), nz(obj["noise_test"]),
            int(obj["seed"]), tuple(obj.get("ratios", (0.8, 0.0, 0.2))), dict(obj.get("counts", {})),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def make_split(subject_ids: Iterable[str], noise_counts: Mapping, seed: int,
               ratios=(0.8, 0.0, 0.2),
               segments_per_subject: Mapping[str, int] | None = None) -> SplitManifest:
    """Two-level split: by subject for clean ECG, by segment index per noise type.

    ``ratios`` are fractions of the whole; the validation share is carved out
    of the training portion. Test and validation sizes round down, so 128
    noise segments at 80/20 give 103 train / 25 test.
    """
    ratios = _normalize_ratios(ratios)
    subjects = sorted({str(s) for s in subject_ids})
    n_tr, n_va, n_te = _partition_sizes(len(subjects), ratios)
    for name, r, n in (("train", ratios[0], n_tr), ("val", ratios[1], n_va), ("test", ratios[2], n_te)):
        if r > 0 and n < 1:
            raise ValidationError(
                f"{len(subjects)} subjects are too few for a non-empty {name} partition at ratios {ratios}"
            )
    perm = np.random.default_rng([seed, 0]).permutation(len(subjects))
    shuffled = [subjects[i] for i in perm]
    s_test = tuple(sorted(shuffled[:n_te]))
    s_val = tuple(sorted(shuffled[n_te:n_te + n_va]))
    s_train = tuple(sorted(shuffled[n_te + n_va:]))

    nz_train, nz_val, nz_test = {}, {}, {}
    for k, t in enumerate(NOISE_TYPES, start=1):
        if t not in {NoiseType(x) for x in noise_counts}:
            continue
        count = int({NoiseType(x): v for x, v in noise_counts.items()}[t])
        if count < 3:
            raise ValidationError(f"{t.value}: need at least 3 noise segments, got {count}")
        m_tr, m_va, m_te = _partition_sizes(count, ratios)
        if m_tr < 1 or (ratios[2] > 0 and m_te < 1) or (ratios[1] > 0 and m_va < 1):
            raise ValidationError(f"{t.value}: {count} noise segments are too few for ratios {ratios}")
        p = np.random.default_rng([seed, k]).permutation(count)
        nz_test[t] = tuple(sorted(int(i) for i in p[:m_te]))
        nz_val[t] = tuple(sorted(int(i) for i in p[m_te:m_te + m_va]))
        nz_train[t] = tuple(sorted(int(i) for i in p[m_te + m_va:]))

    counts = {
        "subjects_train": len(s_train), "subjects_val": len(s_val), "subjects_test": len(s_test),
    }
    if nz_train:
        counts["noise_train_per_type"] = min(len(v) for v in nz_train.values())
        counts["noise_val_per_type"] = min(len(v) for v in nz_val.values())
        counts["noise_test_per_type"] = min(len(v) for v in nz_test.values())
    if segments_per_subject is not None:
        sps_ = {str(k): int(v) for k, v in segments_per_subject.items()}
        counts["clean_train"] = sum(sps_.get(s, 0) for s in s_train)
        counts["clean_val"] = sum(sps_.get(s, 0) for s in s_val)
        counts["clean_test"] = sum(sps_.get(s, 0) for s in s_test)
    return SplitManifest(s_train, s_val, s_test, nz_train, nz_val, nz_test, int(seed), ratios, counts)


# --------------------------------------------------------------------------
# manifests

N_CONDITIONS = 7
_TYPE_COL = {t: i for i, t in enumerate(NOISE_TYPES)}
_COND_MASK = np.array([[t in c for t in NOISE_TYPES] for c in enumerate_conditions()])


def round_robin_policy(n_entries: int, seed: int) -> np.ndarray:
    offset = int(np.random.default_rng([seed, 7]).integers(N_CONDITIONS))
    return ((np.arange(n_entries) + offset) % N_CONDITIONS).astype(np.int8)


def random_policy(n_entries: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 8]).integers(N_CONDITIONS, size=n_entries).astype(np.int8)


def all_noise_policy(n_entries: int, seed: int) -> np.ndarray:
    return np.full(n_entries, N_CONDITIONS - 1, dtype=np.int8)


CONDITION_POLICIES: dict[str, Callable[[int, int], np.ndarray]] = {
    "round-robin": round_robin_policy,
    "random": random_policy,
    "all": all_noise_policy,
}


def _resolve_policy(policy) -> Callable[[int, int], np.ndarray]:
    if callable(policy):
        return policy
    try:
        return CONDITION_POLICIES[policy]
    except KeyError:
        raise ValidationError(f"unknown condition policy {policy!r}; "
                              f"choose from {sorted(CONDITION_POLICIES)}") from None


@dataclass(eq=False)
class SynthesisManifest:
    """Columnar list of synthesis recipes.

    Row ``i`` pairs ``clean_refs[clean_index[i]]`` with noise source indices
    ``noise_index[i]`` (columns EMG, BW, MA; -1 where the type is inactive)
    under condition ``condition[i]`` at ``snr_db[i]``.
    """

    clean_refs: list
    clean_index: np.ndarray
    noise_index: np.ndarray
    condition: np.ndarray
    snr_db: np.ndarray
    epoch_seed: int
    kind: str = "train"

    def __post_init__(self):
        self.clean_refs = [(str(s), int(i)) for s, i in self.clean_refs]
        self.clean_index = np.asarray(self.clean_index, dtype=np.int64)
        self.noise_index = np.asarray(self.noise_index, dtype=np.int64).reshape(-1, len(NOISE_TYPES))
        self.condition = np.asarray(self.condition, dtype=np.int8)
        self.snr_db = np.asarray(self.snr_db, dtype=np.float64)
        n = len(self.clean_index)
        if not (len(self.noise_index) == len(self.condition) == len(self.snr_db) == n):
            raise ValidationError("manifest columns differ in length")

    def __len__(self) -> int:
        return len(self.clean_index)

    def clean_ref(self, i: int) -> SegmentRef:
        return self.clean_refs[int(self.clean_index[i])]

    def mix_spec(self, i: int) -> MixSpec:
        cond = enumerate_conditions()[int(self.condition[i])]
        idx = {t: int(self.noise_index[i, _TYPE_COL[t]]) for t in cond}
        return MixSpec(cond, float(self.snr_db[i]), idx, self.epoch_seed)

    def entry(self, i: int) -> tuple[SegmentRef, MixSpec]:
        return self.clean_ref(i), self.mix_spec(i)

    def subject_column(self) -> np.ndarray:
        subjects = np.array([r[0] for r in self.clean_refs], dtype=object)
        return subjects[self.clean_index] if len(self.clean_index) else np.array([], dtype=object)

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "kind": self.kind,
            "epoch_seed": self.epoch_seed,
            "clean_refs": [list(r) for r in self.clean_refs],
            "clean_index": self.clean_index.tolist(),
            "noise_index": self.noise_index.tolist(),
            "condition": self.condition.tolist(),
            "snr_db": self.snr_db.tolist(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SynthesisManifest":
        if obj.get("schema") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported manifest schema {obj.get('schema')!r}")
        return cls(obj["clean_refs"], obj["clean_index"],
                   np.asarray(obj["noise_index"], dtype=np.int64).reshape(-1, len(NOISE_TYPES)),
                   obj["condition"], obj["snr_db"], int(obj["epoch_seed"]), obj.get("kind", "train"))


def _noise_columns(split_noise: Mapping, j: np.ndarray, condition: np.ndarray) -> np.ndarray:
    cols = np.full((len(j), len(NOISE_TYPES)), -1, dtype=np.int64)
    for t, c in _TYPE_COL.items():
        if t in split_noise and len(split_noise[t]):
            pool = np.asarray(split_noise[t], dtype=np.int64)
            cols[:, c] = pool[j % len(pool)]
    active = _COND_MASK[condition]
    cols[~active] = -1
    return cols


def build_training_manifest(split: SplitManifest, clean_train: Sequence[SegmentRef],
                            condition_policy="round-robin", target_snr_db: float = -5.0,
                            epoch_seed: int | None = None) -> SynthesisManifest:
    """Every clean training segment crossed with every training noise triplet.

    Entry ``c * n_noise + j`` pairs clean segment ``c`` with the ``j``-th
    training index of each noise type.
    """
    if len(clean_train) == 0:
        raise ValidationError("no clean training segments")
    n_noise = split.noise_per_type(Partition.Train)
    if n_noise < 1:
        raise ValidationError("split has no training noise")
    n_clean = len(clean_train)
    total = n_clean * n_noise
    clean_index = np.repeat(np.arange(n_clean), n_noise)
    j = np.tile(np.arange(n_noise), n_clean)
    condition = _resolve_policy(condition_policy)(total, split.seed)
    noise = _noise_columns(split.noise_train, j, condition)
    seed = split.seed if epoch_seed is None else epoch_seed
    return SynthesisManifest(list(clean_train), clean_index, noise, condition,
                             np.full(total, float(target_snr_db)), seed, "train")


def build_validation_manifest(split: SplitManifest, clean_val: Sequence[SegmentRef],
                              n_pairs: int = 10_000, target_snr_db: float = -5.0,
                              condition_policy="round-robin") -> SynthesisManifest:
    """``n_pairs`` distinct draws from validation clean x validation noise triplets."""
    if len(clean_val) == 0:
        raise ValidationError("no clean validation segments")
    n_noise = split.noise_per_type(Partition.Val)
    if n_noise < 1:
        raise ValidationError("split has no validation noise")
    total = len(clean_val) * n_noise
    rng = np.random.default_rng([split.seed, 11])
    pick = rng.choice(total, size=min(int(n_pairs), total), replace=False)
    clean_index, j = np.divmod(pick, n_noise)
    condition = _resolve_policy(condition_policy)(len(pick), split.seed + 1)
    noise = _noise_columns(split.noise_val, j, condition)
    return SynthesisManifest(list(clean_val), clean_index, noise, condition,
                             np.full(len(pick), float(target_snr_db)), split.seed, "val")


def build_test_manifest(split: SplitManifest, clean_test: Sequence[SegmentRef],
                        snr_levels: Sequence[float] = (-5.0, 0.0, 5.0),
                        conditions: Sequence[int] | None = None,
                        seed: int = 0) -> SynthesisManifest:
    """Full evaluation matrix: clean x condition x SNR level.

    Each clean segment draws one test noise triplet from a generator seeded by
    ``(seed, clean position)``; the same triplet serves all its conditions and
    levels so rows differ only in the factor under study.
    """
    if len(clean_test) == 0:
        raise ValidationError("no clean test segments")
    conditions = list(range(N_CONDITIONS)) if conditions is None else [int(c) for c in conditions]
    levels = [float(x) for x in snr_levels]
    n_noise = split.noise_per_type(Partition.Test)
    n_clean = len(clean_test)
    per_clean = len(conditions) * len(levels)
    clean_index = np.repeat(np.arange(n_clean), per_clean)
    condition = np.tile(np.repeat(np.asarray(conditions, dtype=np.int8), len(levels)), n_clean)
    snr = np.tile(np.asarray(levels * len(conditions)), n_clean)

    cols = np.full((n_clean * per_clean, len(NOISE_TYPES)), -1, dtype=np.int64)
    for c in range(n_clean):
        rng = np.random.default_rng([seed, 13, c])
        draw = {t: int(split.noise_test[t][rng.integers(n_noise)]) for t in NOISE_TYPES
                if t in split.noise_test}
        for t, col in _TYPE_COL.items():
            if t in draw:
                cols[c * per_clean:(c + 1) * per_clean, col] = draw[t]
    cols[~_COND_MASK[condition]] = -1
    return SynthesisManifest(list(clean_test), clean_index, cols, condition, snr, seed, "test")


# --------------------------------------------------------------------------
# audit


@dataclass(frozen=True)
class Violation:
    category: str  # a: subject overlap, b: noise overlap, c: train entry, d: test entry, v: val entry
    detail: str
    manifest: str | None = None
    entry_index: int | None = None
    entries: tuple = ()

    def __str__(self) -> str:
        where = f" [{self.manifest} entry {self.entry_index}]" if self.entry_index is not None else ""
        return f"({self.category}){where} {self.detail}"


@dataclass
class AuditReport:
    violations: list[Violation] = field(default_factory=list)
    checked_entries: int = 0

    @property
    def passed(self) -> bool:
        return not self.violations

    def by_category(self, cat: str) -> list[Violation]:
        return [v for v in self.violations if v.category == cat]

    def format(self, limit: int | None = None) -> str:
        if self.passed:
            return f"PASS ({self.checked_entries} entries checked)"
        lines = [f"FAIL: {len(self.violations)} violation(s)"]
        shown = self.violations if limit is None else self.violations[:limit]
        lines += [f"  {v}" for v in shown]
        if len(shown) < len(self.violations):
            lines.append(f"  ... {len(self.violations) - len(shown)} more")
        return "\n".join(lines)


def _entries_touching(manifests, subject=None, noise=None) -> tuple:
    hits = []
    for name, m in manifests:
        if m is None or len(m) == 0:
            continue
        if subject is not None:
            idx = np.nonzero(m.subject_column() == subject)[0]
        else:
            t, i = noise
            idx = np.nonzero(m.noise_index[:, _TYPE_COL[t]] == i)[0]
        hits += [(name, int(k)) for k in idx]
    return tuple(hits)


def _check_entries(name: str, cat: str, manifest: SynthesisManifest | None,
                   subjects: Iterable[str], noise: Mapping) -> list[Violation]:
    if manifest is None or len(manifest) == 0:
        return []
    ok_subject = np.isin(manifest.subject_column(), np.array(sorted(subjects), dtype=object))
    bad_noise = np.zeros((len(manifest), len(NOISE_TYPES)), dtype=bool)
    for t, col in _TYPE_COL.items():
        used = manifest.noise_index[:, col]
        allowed = np.asarray(noise.get(t, ()), dtype=np.int64)
        bad_noise[:, col] = (used >= 0) & ~np.isin(used, allowed)
    out = []
    for i in np.nonzero(~ok_subject | bad_noise.any(axis=1))[0]:
        reasons = []
        if not ok_subject[i]:
            reasons.append(f"subject {manifest.clean_ref(i)[0]} outside {name} subjects")
        for t, col in _TYPE_COL.items():
            if bad_noise[i, col]:
                reasons.append(f"{t.value} noise {int(manifest.noise_index[i, col])} outside {name} noise")
        out.append(Violation(cat, "; ".join(reasons), name, int(i)))
    return out


def audit_leakage(split: SplitManifest, train_manifest: SynthesisManifest | None,
                  test_manifest: SynthesisManifest | None,
                  val_manifest: SynthesisManifest | None = None) -> AuditReport:
    """Check partition disjointness and that every entry stays in its partition."""
    report = AuditReport()
    manifests = [("train", train_manifest), ("val", val_manifest), ("test", test_manifest)]
    parts = {"train": set(split.subjects_train), "val": set(split.subjects_val),
             "test": set(split.subjects_test)}
    names = list(parts)
    for a in range(3):
        for b in range(a + 1, 3):
            for s in sorted(parts[names[a]] & parts[names[b]]):
                report.violations.append(Violation(
                    "a", f"subject {s} in both {names[a]} and {names[b]}",
                    entries=_entries_touching(manifests, subject=s)))
    for t in NOISE_TYPES:
        sets = {"train": set(split.noise_train.get(t, ())), "val": set(split.noise_val.get(t, ())),
                "test": set(split.noise_test.get(t, ()))}
        for a in range(3):
            for b in range(a + 1, 3):
                for i in sorted(sets[names[a]] & sets[names[b]]):
                    report.violations.append(Violation(
                        "b", f"{t.value} noise {i} in both {names[a]} and {names[b]}",
                        entries=_entries_touching(manifests, noise=(t, i))))
    report.violations += _check_entries("train", "c", train_manifest, split.subjects_train, split.noise_train)
    report.violations += _check_entries("test", "d", test_manifest, split.subjects_test, split.noise_test)
    report.violations += _check_entries("val", "v", val_manifest, split.subjects_val, split.noise_val)
    report.checked_entries = sum(len(m) for _, m in manifests if m is not None)
    return report


# --------------------------------------------------------------------------
# streaming


@dataclass
class Batch:
    noisy: np.ndarray  # [B, L, 1], network input (filtered if a preprocessor is set)
    clean: np.ndarray  # [B, L, 1]
    entry_ids: np.ndarray


def synthesize_entry(manifest: SynthesisManifest, i: int, corpus: Corpus) -> NoisyPair:
    ref, spec = manifest.entry(i)
    try:
        clean = corpus.segment(ref)
        noises = {t: corpus.noise_segment(t, k).samples for t, k in spec.noise_indices.items()}
    except KeyError as exc:
        raise StreamError(f"manifest entry {i}: cannot resolve {exc} (clean ref {ref})") from None
    noisy, achieved, g, _ = mix_arrays(clean.samples_mv, noises, spec.target_snr_db)
    return NoisyPair(clean, noisy, spec, achieved, g)


def epoch_order(manifest: SynthesisManifest, epoch: int, seed: int | None = None) -> np.ndarray:
    base = manifest.epoch_seed if seed is None else seed
    return np.random.default_rng([int(base), int(epoch)]).permutation(len(manifest))


def materialize(manifest: SynthesisManifest, corpus: Corpus, ids: Sequence[int],
                preprocess=None, workers: int = 1, dtype=np.float32) -> Batch:
    ids = np.asarray(ids, dtype=np.int64)

    def one(i):
        return synthesize_entry(manifest, int(i), corpus)

    if workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(one, ids))
    else:
        pairs = [one(i) for i in ids]
    noisy = np.stack([p.noisy for p in pairs])
    clean = np.stack([p.clean.samples_mv for p in pairs])
    if preprocess is not None:
        noisy = preprocess(noisy, axis=-1)
        clean = preprocess.clean(clean, axis=-1)
    return Batch(noisy[..., None].astype(dtype), clean[..., None].astype(dtype), ids)


def stream_pairs(manifest: SynthesisManifest, corpus: Corpus, batch_size: int, epoch: int = 0,
                 preprocess=None, workers: int = 1, dtype=np.float32,
                 seed: int | None = None) -> Iterator[Batch]:
    """Yield synthesized batches in the epoch's deterministic shuffled order.

    ``seed`` overrides the manifest's own shuffle seed.
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    order = epoch_order(manifest, epoch, seed)
    for start in range(0, len(order), batch_size):
        yield materialize(manifest, corpus, order[start:start + batch_size],
                          preprocess, workers, dtype)


# --------------------------------------------------------------------------
# synthetic corpus

_WAVES = (  # (amplitude mV, width s, offset s) for P, Q, R, S, T
    (0.12, 0.025, -0.20),
    (-0.10, 0.010, -0.030),
    (1.00, 0.012, 0.0),
    (-0.25, 0.012, 0.030),
    (0.30, 0.050, 0.28),
)


def _gaussian_beats(t: np.ndarray, beat_times: np.ndarray, waves, rng) -> np.ndarray:
    x = np.zeros_like(t)
    fs = 1.0 / (t[1] - t[0])
    for bt in beat_times:
        lo = max(0, int((bt - 0.5) * fs))
        hi = min(len(t), int((bt + 0.6) * fs) + 1)
        if lo >= hi:
            continue
        tt = t[lo:hi]
        for amp, width, off in waves:
            x[lo:hi] += amp * np.exp(-0.5 * ((tt - bt - off) / width) ** 2)
    return x


def _sinus_record(n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / fs
    period = rng.uniform(0.7, 0.95)
    scale = rng.uniform(0.8, 1.3)
    waves = [(a * scale * rng.uniform(0.85, 1.15), w * rng.uniform(0.9, 1.1), o)
             for a, w, o in _WAVES]
    n_beats = int(t[-1] / period) + 3
    beat_times = np.cumsum(period * (1 + 0.03 * rng.standard_normal(n_beats))) - rng.uniform(0, period)
    return _gaussian_beats(t, beat_times, waves, rng)


def _vt_segment(n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / fs
    period = rng.uniform(0.27, 0.33)
    amp = rng.uniform(1.0, 1.6)
    waves = [(amp, 0.045, 0.0), (-0.6 * amp, 0.05, 0.09)]
    beats = np.cumsum(period * (1 + 0.02 * rng.standard_normal(int(t[-1] / period) + 3)))
    return _gaussian_beats(t, beats - rng.uniform(0, period), waves, rng)


def _vf_segment(n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / fs
    x = np.zeros(n)
    for _ in range(4):
        f = rng.uniform(3.0, 6.0)
        env = 1 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t + rng.uniform(0, 2 * np.pi))
        x += rng.uniform(0.15, 0.35) * env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return x


def synthetic_emg(n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    hi = min(150.0, 0.45 * fs)
    cascade = design_butterworth_bandpass(FilterSpec(4, 20.0, hi, fs))
    pad = int(fs)
    return filter_forward(cascade, rng.standard_normal(n + pad))[pad:]


def synthetic_bw(n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    # frequencies sit on the segment's DFT grid so no power leaks above 0.5 Hz
    t = np.arange(n) / fs
    duration = n / fs
    k_lo, k_hi = math.ceil(0.15 * duration), math.floor(0.4 * duration)
    x = np.zeros(n)
    for _ in range(int(rng.integers(1, 4))):
        f = int(rng.integers(k_lo, k_hi + 1)) / duration
        x += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return x


def synthetic_ma(n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / fs
    x = np.zeros(n)
    for _ in range(int(rng.integers(3, 9))):
        t0 = rng.uniform(0, t[-1])
        amp = rng.normal(0, 1.0)
        kind = rng.integers(3)
        if kind == 0:  # step with a smooth edge
            x += amp * 0.5 * (1 + np.tanh((t - t0) / rng.uniform(0.02, 0.1)))
        elif kind == 1:  # ramp up then hold
            dur = rng.uniform(0.3, 2.0)
            x += amp * np.clip((t - t0) / dur, 0, 1)
        else:  # short damped oscillation
            f = rng.uniform(1.0, 8.0)
            tau = rng.uniform(0.1, 0.5)
            tt = np.clip(t - t0, 0, None)
            x += amp * np.where(t >= t0, np.exp(-tt / tau) * np.sin(2 * np.pi * f * tt), 0.0)
    x -= x.mean()
    if not np.any(x):
        x = 1e-3 * rng.standard_normal(n)
    return x


_NOISE_GEN = {NoiseType.EMG: synthetic_emg, NoiseType.BW: synthetic_bw, NoiseType.MA: synthetic_ma}


def generate_synthetic_corpus(n_subjects: int, segs_per_subject: int, noise_per_type: int,
                              seed: int, fs: float = 360.0,
                              shockable_fraction: float = 0.0) -> tuple[list[EcgSegment], list[NoiseSegment]]:
    """Deterministic pseudo-ECG and pseudo-noise for CI-scale runs.

    Clean segments are Gaussian P/QRS/T pulse trains (one continuous record per
    subject, cut into 14 s windows). With ``shockable_fraction > 0`` that share
    of segments is replaced by VT-like or VF-like waveforms and tagged so.
    """
    for name, v in (("n_subjects", n_subjects), ("segs_per_subject", segs_per_subject),
                    ("noise_per_type", noise_per_type)):
        if v < 1:
            raise ValidationError(f"{name} must be >= 1")
    n = segment_length(fs)
    clean: list[EcgSegment] = []
    for s in range(n_subjects):
        rng = np.random.default_rng([seed, 1, s])
        sid = f"S{s:03d}"
        record = _sinus_record(n * segs_per_subject, fs, rng)
        for seg in segment_record(record, fs, sid):
            tag = RhythmTag.NSR
            samples = seg.samples_mv
            if shockable_fraction > 0 and rng.uniform() < shockable_fraction:
                if rng.uniform() < 0.5:
                    tag, samples = RhythmTag.RapidVT, _vt_segment(n, fs, rng)
                else:
                    tag, samples = RhythmTag.CoarseVF, _vf_segment(n, fs, rng)
            clean.append(EcgSegment(samples, fs, sid, seg.segment_index, tag))

    noise: list[NoiseSegment] = []
    for k, t in enumerate(NOISE_TYPES):
        for i in range(noise_per_type):
            rng = np.random.default_rng([seed, 2, k, i])
            noise.append(NoiseSegment(_NOISE_GEN[t](n, fs, rng), t, i))
    return clean, noise


def describe_manifest(m: SynthesisManifest) -> dict:
    counts = np.bincount(m.condition.astype(np.int64), minlength=N_CONDITIONS)
    return {
        "kind": m.kind,
        "entries": len(m),
        "clean_segments": len(m.clean_refs),
        "conditions": {condition_name(c): int(k) for c, k in zip(enumerate_conditions(), counts)},
    }
