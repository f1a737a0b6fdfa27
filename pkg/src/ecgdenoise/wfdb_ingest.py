"""Reader for WFDB-style records stored in format 212, plus segmentation.

Only the pieces needed to turn a MIT-BIH style record into fixed 14 s
windows are implemented: the text header, the format-212 sample packing and
the adu -> mV calibration. Annotation files are not read; rhythm labels come
from a ``subject_id,segment_index,rhythm_tag`` sidecar CSV.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DecodeError, ParseError, UnsupportedFormatError, ValidationError

DEFAULT_GAIN_ADU_PER_MV = 200.0
SEGMENT_SECONDS = 14.0
SUPPORTED_FORMAT = 212

ECGS_MAGIC = b"ECGS"
ECGS_VERSION = 1


class RhythmTag(str, enum.Enum):
    NSR = "NSR"
    AF = "AF"
    PAC = "PAC"
    PVC = "PVC"
    RapidVT = "RapidVT"
    CoarseVF = "CoarseVF"
    Other = "Other"
    Unlabeled = "Unlabeled"

    @classmethod
    def parse(cls, text: str) -> "RhythmTag":
        key = text.strip().lower().replace("_", "").replace("-", "").replace(" ", "")
        aliases = {
            "vt": cls.RapidVT,
            "rapidvt": cls.RapidVT,
            "vf": cls.CoarseVF,
            "coarsevf": cls.CoarseVF,
            "n": cls.NSR,
            "normal": cls.NSR,
            "": cls.Unlabeled,
        }
        if key in aliases:
            return aliases[key]
        for tag in cls:
            if tag.value.lower() == key:
                return tag
        raise ValidationError(f"unknown rhythm tag {text!r}")


SHOCKABLE = frozenset({RhythmTag.RapidVT, RhythmTag.CoarseVF})


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    format_code: int
    gain_adu_per_mv: float = DEFAULT_GAIN_ADU_PER_MV
    baseline_adu: int = 0
    units: str = "mV"
    description: str = ""


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    num_signals: int
    sampling_rate_hz: float
    samples_per_signal: int
    signals: tuple[SignalSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.sampling_rate_hz > 0:
            raise ValidationError(f"sampling frequency must be positive, got {self.sampling_rate_hz}")
        if self.num_signals < 1:
            raise ValidationError("record must declare at least one signal")
        for i, sig in enumerate(self.signals):
            if sig.gain_adu_per_mv == 0:
                raise ValidationError(f"signal {i}: gain must be nonzero")


@dataclass(frozen=True, eq=False)
class EcgSegment:
    """One fixed-length single-lead window in millivolts."""

    samples_mv: np.ndarray
    sampling_rate_hz: float
    subject_id: str
    segment_index: int
    rhythm_tag: RhythmTag = RhythmTag.Unlabeled

    def __post_init__(self):
        samples = np.asarray(self.samples_mv, dtype=np.float64)
        if samples.ndim != 1:
            raise ValidationError("segment samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValidationError(
                f"segment {self.subject_id}/{self.segment_index} has non-finite samples"
            )
        object.__setattr__(self, "samples_mv", samples)
        object.__setattr__(self, "rhythm_tag", RhythmTag(self.rhythm_tag))

    @property
    def key(self) -> tuple[str, int]:
        return (self.subject_id, self.segment_index)

    def __len__(self) -> int:
        return len(self.samples_mv)


def segment_length(fs: float) -> int:
    return int(round(SEGMENT_SECONDS * fs))


# --------------------------------------------------------------------------
# header

_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?")


def _leading_number(token: str, line_no: int, what: str) -> float:
    m = _NUMBER.match(token)
    if not m:
        raise ParseError(f"cannot read {what} from {token!r}", line_no)
    return float(m.group(0))


def _parse_gain(token: str, line_no: int) -> tuple[float, int | None, str]:
    # e.g. "200", "200(1024)", "200/mV", "200(0)/uV"
    m = re.fullmatch(r"([^(/]*)(?:\((-?\d+)\))?(?:/(\S+))?", token)
    if not m:
        raise ParseError(f"malformed gain field {token!r}", line_no)
    gain_txt, base_txt, units = m.groups()
    gain = _leading_number(gain_txt, line_no, "gain") if gain_txt else 0.0
    baseline = int(base_txt) if base_txt is not None else None
    return gain, baseline, units or "mV"


def parse_header(data: bytes | str) -> RecordHeader:
    """Parse a WFDB text header.

    Missing or zero gain falls back to 200 adu/mV. Baseline comes from the
    parenthesised gain suffix, else the ADC zero column, else 0.
    """
    text = data.decode("ascii", errors="replace") if isinstance(data, (bytes, bytearray)) else data
    lines = [
        (i + 1, ln.strip())
        for i, ln in enumerate(text.splitlines())
        if ln.strip() and not ln.strip().startswith("#")
    ]
    if not lines:
        raise ParseError("empty header", 1)

    line_no, record_line = lines[0]
    tokens = record_line.split()
    if len(tokens) < 4:
        raise ParseError("record line needs 'name num_signals fs num_samples'", line_no)
    record_name = tokens[0].split("/")[0]
    try:
        num_signals = int(tokens[1])
        n_samples = int(tokens[3])
    except ValueError:
        raise ParseError(f"non-integer field in record line {record_line!r}", line_no) from None
    fs = _leading_number(tokens[2], line_no, "sampling frequency")
    if fs <= 0:
        raise ValidationError(f"line {line_no}: sampling frequency must be positive, got {tokens[2]}")
    if num_signals < 1:
        raise ValidationError(f"line {line_no}: record must declare at least one signal")

    signals = []
    for k in range(num_signals):
        if 1 + k >= len(lines):
            last = lines[-1][0] + 1
            raise ParseError(f"expected {num_signals} signal lines, found {k}", last)
        line_no, sig_line = lines[1 + k]
        f = sig_line.split()
        if len(f) < 2:
            raise ParseError(f"signal line needs at least file name and format: {sig_line!r}", line_no)
        fmt_match = re.match(r"(\d+)", f[1])
        if not fmt_match:
            raise ParseError(f"bad format field {f[1]!r}", line_no)
        fmt = int(fmt_match.group(1))
        gain, baseline, units = DEFAULT_GAIN_ADU_PER_MV, None, "mV"
        if len(f) > 2:
            gain, baseline, units = _parse_gain(f[2], line_no)
            if gain == 0:
                gain = DEFAULT_GAIN_ADU_PER_MV
        if baseline is None:
            if len(f) > 4:
                try:
                    baseline = int(f[4])
                except ValueError:
                    raise ParseError(f"bad ADC zero {f[4]!r}", line_no) from None
            else:
                baseline = 0
        description = " ".join(f[8:]) if len(f) > 8 else ""
        signals.append(SignalSpec(f[0], fmt, float(gain), int(baseline), units, description))

    return RecordHeader(record_name, num_signals, fs, n_samples, tuple(signals))


# --------------------------------------------------------------------------
# format 212


def _sign_extend_12(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.int32)
    return np.where(v >= 2048, v - 4096, v)


def decode_212(data: bytes, n_samples: int) -> np.ndarray:
    """Unpack ``n_samples`` 12-bit two's-complement values from format-212 bytes."""
    if n_samples < 0:
        raise ValidationError("n_samples must be non-negative")
    needed = (3 * n_samples + 1) // 2
    if len(data) < needed:
        raise DecodeError(f"truncated format-212 data: need {needed} bytes, have {len(data)}", len(data))
    n_groups = (n_samples + 1) // 2
    buf = np.frombuffer(bytes(data[:needed]) + b"\x00" * (3 * n_groups - needed), dtype=np.uint8)
    g = buf.reshape(n_groups, 3).astype(np.int32)
    b0, b1, b2 = g[:, 0], g[:, 1], g[:, 2]
    s1 = ((b1 & 0x0F) << 8) | b0
    s2 = ((b1 & 0xF0) << 4) | b2
    out = np.empty(2 * n_groups, dtype=np.int32)
    out[0::2] = _sign_extend_12(s1)
    out[1::2] = _sign_extend_12(s2)
    return out[:n_samples]


def encode_212(samples: Sequence[int] | np.ndarray) -> bytes:
    """Inverse of :func:`decode_212`. An odd count writes a 2-byte tail."""
    v = np.asarray(samples, dtype=np.int64)
    if v.size and (v.min() < -2048 or v.max() > 2047):
        raise ValidationError("format 212 holds values in [-2048, 2047] only")
    n = v.size
    u = (v & 0xFFF).astype(np.int32)
    if n % 2:
        u = np.append(u, 0)
    s1, s2 = u[0::2], u[1::2]
    out = np.empty((len(s1), 3), dtype=np.uint8)
    out[:, 0] = s1 & 0xFF
    out[:, 1] = ((s1 >> 8) & 0x0F) | ((s2 >> 4) & 0xF0)
    out[:, 2] = s2 & 0xFF
    return out.tobytes()[: (3 * n + 1) // 2]


def to_millivolts(adu, gain_adu_per_mv: float, baseline_adu: int) -> np.ndarray:
    if gain_adu_per_mv == 0:
        raise ValidationError("gain must be nonzero")
    return (np.asarray(adu, dtype=np.float64) - baseline_adu) / gain_adu_per_mv


def read_record(header_path: str | Path, channel: int = 0,
                dat_path: str | Path | None = None) -> tuple[RecordHeader, np.ndarray]:
    """Read one channel of a format-212 record, calibrated to mV."""
    header_path = Path(header_path)
    header = parse_header(header_path.read_bytes())
    if not 0 <= channel < header.num_signals:
        raise ValidationError(f"channel {channel} out of range for {header.num_signals} signals")
    sig = header.signals[channel]
    for s in header.signals:
        if s.format_code != SUPPORTED_FORMAT:
            raise UnsupportedFormatError(
                f"signal file {s.file_name}: format {s.format_code} is not supported (only 212)"
            )
    if dat_path is None:
        dat_path = header_path.parent / sig.file_name
    raw = Path(dat_path).read_bytes()
    n_total = header.samples_per_signal * header.num_signals
    adu = decode_212(raw, n_total).reshape(header.samples_per_signal, header.num_signals)
    return header, to_millivolts(adu[:, channel], sig.gain_adu_per_mv, sig.baseline_adu)


# --------------------------------------------------------------------------
# segmentation and labels


def segment_record(samples_mv, fs: float, subject_id: str,
                   labels: Mapping[tuple[str, int], RhythmTag] | None = None) -> list[EcgSegment]:
    """Cut consecutive non-overlapping 14 s windows; the remainder is dropped."""
    if not fs > 0:
        raise ValidationError("fs must be positive")
    x = np.asarray(samples_mv, dtype=np.float64)
    n = segment_length(fs)
    labels = labels or {}
    return [
        EcgSegment(
            x[i * n:(i + 1) * n].copy(), float(fs), str(subject_id), i,
            labels.get((str(subject_id), i), RhythmTag.Unlabeled),
        )
        for i in range(len(x) // n)
    ]


def load_labels(path: str | Path) -> dict[tuple[str, int], RhythmTag]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "segment_index", "rhythm_tag"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"labels file lacks columns {sorted(missing)}")
        for row in reader:
            out[(row["subject_id"], int(row["segment_index"]))] = RhythmTag.parse(row["rhythm_tag"])
    return out


# --------------------------------------------------------------------------
# serialization


def segment_to_record(seg: EcgSegment) -> dict:
    return {
        "subject_id": seg.subject_id,
        "segment_index": seg.segment_index,
        "fs": seg.sampling_rate_hz,
        "rhythm_tag": seg.rhythm_tag.value,
        "samples_mv": seg.samples_mv.tolist(),
    }


def segment_from_record(rec: Mapping) -> EcgSegment:
    try:
        return EcgSegment(
            np.asarray(rec["samples_mv"], dtype=np.float64),
            float(rec["fs"]),
            str(rec["subject_id"]),
            int(rec["segment_index"]),
            RhythmTag.parse(rec.get("rhythm_tag") or "Unlabeled"),
        )
    except KeyError as exc:
        raise ValidationError(f"segment record missing field {exc}") from None


def write_segments_jsonl(segments: Iterable[EcgSegment], path: str | Path) -> None:
    with open(path, "w") as fh:
        for seg in segments:
            fh.write(json.dumps(segment_to_record(seg)) + "\n")


def read_segments_jsonl(path: str | Path) -> list[EcgSegment]:
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), line_no) from None
            out.append(segment_from_record(rec))
    return out


def write_segments_ecgs(segments: Iterable[EcgSegment], path: str | Path) -> None:
    """Binary segment container, all little-endian.

    Layout: ``b"ECGS"``, u16 version, u32 record count, then per record
    u16 len + utf-8 subject id, u32 segment index, f64 fs, u8 len + ascii
    rhythm tag, u32 sample count, f64 samples.
    """
    segments = list(segments)
    buf = io.BytesIO()
    buf.write(ECGS_MAGIC)
    buf.write(struct.pack("<HI", ECGS_VERSION, len(segments)))
    for seg in segments:
        sid = seg.subject_id.encode("utf-8")
        tag = seg.rhythm_tag.value.encode("ascii")
        buf.write(struct.pack("<H", len(sid)) + sid)
        buf.write(struct.pack("<Id", seg.segment_index, seg.sampling_rate_hz))
        buf.write(struct.pack("<B", len(tag)) + tag)
        buf.write(struct.pack("<I", len(seg.samples_mv)))
        buf.write(seg.samples_mv.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_segments_ecgs(path: str | Path) -> list[EcgSegment]:
    data = Path(path).read_bytes()
    if data[:4] != ECGS_MAGIC:
        raise DecodeError("bad magic, expected ECGS", 0)
    version, count = struct.unpack_from("<HI", data, 4)
    if version != ECGS_VERSION:
        raise DecodeError(f"unsupported ECGS version {version}", 4)
    pos = 10
    out = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            sid = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            idx, fs = struct.unpack_from("<Id", data, pos)
            pos += 12
            (n,) = struct.unpack_from("<B", data, pos)
            tag = data[pos + 1:pos + 1 + n].decode("ascii")
            pos += 1 + n
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + 8 * n > len(data):
                raise struct.error("short sample payload")
            samples = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
            out.append(EcgSegment(samples, fs, sid, idx, RhythmTag(tag)))
    except struct.error as exc:
        raise DecodeError(f"truncated ECGS file ({exc})", pos) from None
    return out


def write_segments(segments: Iterable[EcgSegment], path: str | Path) -> None:
    if str(path).endswith(".ecgs"):
        write_segments_ecgs(segments, path)
    else:
        write_segments_jsonl(segments, path)


def read_segments(path: str | Path) -> list[EcgSegment]:
    if str(path).endswith(".ecgs"):
        return read_segments_ecgs(path)
    return read_segments_jsonl(path)

