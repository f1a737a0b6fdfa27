import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgdenoise.errors import DecodeError, ParseError, UnsupportedFormatError, ValidationError
from ecgdenoise.wfdb_ingest import (
    EcgSegment,
    RhythmTag,
    decode_212,
    encode_212,
    load_labels,
    parse_header,
    read_record,
    read_segments,
    segment_length,
    segment_record,
    write_segments,
)

HEADER = """# comment line
100 2 360 6
100.dat 212 200 11 1024 995 -22131 0 MLII
100.dat 212 200(-10)/mV 11 1024 1011 20052 0 V5
"""


def test_parse_header_fields():
    h = parse_header(HEADER)
    assert (h.record_name, h.num_signals, h.sampling_rate_hz, h.samples_per_signal) == ("100", 2, 360.0, 6)
    assert h.signals[0].gain_adu_per_mv == 200.0
    # no parenthesised baseline: the ADC zero column is used
    assert h.signals[0].baseline_adu == 1024
    assert h.signals[1].baseline_adu == -10
    assert h.signals[0].description == "MLII"


def test_parse_header_defaults_and_errors():
    h = parse_header("rec 1 250 10\nrec.dat 212\n")
    assert h.signals[0].gain_adu_per_mv == 200.0 and h.signals[0].baseline_adu == 0
    h = parse_header("rec 1 250 10\nrec.dat 212 0 11 0\n")
    assert h.signals[0].gain_adu_per_mv == 200.0
    with pytest.raises(ParseError) as exc:
        parse_header("rec 2 250 10\nrec.dat 212 200\n")
    assert exc.value.line == 3
    with pytest.raises(ParseError):
        parse_header("")
    with pytest.raises(ParseError):
        parse_header("rec x 250 10\n")
    with pytest.raises(ValidationError):
        parse_header("rec 1 0 10\nrec.dat 212\n")


def test_decode_212_known_bytes():
    # samples 1, -1 -> 0x001, 0xFFF -> bytes 01, F0, FF
    assert list(decode_212(bytes([0x01, 0xF0, 0xFF]), 2)) == [1, -1]
    assert list(decode_212(bytes([0xFF, 0x07, 0x00]), 2)) == [2047, 0]
    assert list(decode_212(bytes([0x00, 0x08]), 1)) == [-2048]


@given(st.lists(st.integers(-2048, 2047), max_size=301))
@settings(max_examples=200, deadline=None)
def test_212_round_trip(values):
    data = encode_212(values)
    assert len(data) == (3 * len(values) + 1) // 2
    assert decode_212(data, len(values)).tolist() == values


def test_decode_212_truncated():
    with pytest.raises(DecodeError) as exc:
        decode_212(b"\x00\x00", 4)
    assert exc.value.offset == 2


def _write_record(tmp_path, adu, fmt=212, baseline=0, gain=200):
    adu = np.asarray(adu)
    n, ch = adu.shape
    lines = [f"rec {ch} 360 {n}"]
    lines += [f"rec.dat {fmt} {gain}({baseline}) 11 0 0 0 0 lead{c}" for c in range(ch)]
    (tmp_path / "rec.hea").write_text("\n".join(lines) + "\n")
    (tmp_path / "rec.dat").write_bytes(encode_212(adu.reshape(-1)))
    return tmp_path / "rec.hea"


def test_read_record_calibrates_interleaved_channels(tmp_path):
    adu = np.array([[100, -200], [300, 400], [-500, 0]])
    hea = _write_record(tmp_path, adu, baseline=100, gain=200)
    _, ch0 = read_record(hea, 0)
    _, ch1 = read_record(hea, 1)
    np.testing.assert_allclose(ch0, (adu[:, 0] - 100) / 200)
    np.testing.assert_allclose(ch1, (adu[:, 1] - 100) / 200)
    with pytest.raises(ValidationError):
        read_record(hea, 2)


def test_read_record_rejects_other_formats(tmp_path):
    hea = _write_record(tmp_path, np.zeros((4, 1), dtype=int), fmt=16)
    with pytest.raises(UnsupportedFormatError):
        read_record(hea)


def test_segmentation_drops_remainder():
    fs = 360.0
    n = segment_length(fs)
    assert n == 5040
    x = np.arange(2 * n + 100, dtype=float)
    segs = segment_record(x, fs, "S1", {("S1", 1): RhythmTag.CoarseVF})
    assert [s.segment_index for s in segs] == [0, 1]
    assert segs[1].samples_mv[0] == n
    assert segs[0].rhythm_tag is RhythmTag.Unlabeled and segs[1].rhythm_tag is RhythmTag.CoarseVF


def test_rhythm_tag_aliases():
    assert RhythmTag.parse("vt") is RhythmTag.RapidVT
    assert RhythmTag.parse("Coarse VF") is RhythmTag.CoarseVF
    assert RhythmTag.parse("nsr") is RhythmTag.NSR
    with pytest.raises(ValidationError):
        RhythmTag.parse("sinus-ish")


def test_load_labels(tmp_path):
    p = tmp_path / "labels.csv"
    p.write_text("subject_id,segment_index,rhythm_tag\nA,0,VF\nA,3,AF\n")
    assert load_labels(p) == {("A", 0): RhythmTag.CoarseVF, ("A", 3): RhythmTag.AF}


@pytest.mark.parametrize("suffix", [".jsonl", ".ecgs"])
def test_segment_files_round_trip(tmp_path, suffix):
    rng = np.random.default_rng(0)
    segs = [EcgSegment(rng.normal(size=50), 360.0, "S9", i, RhythmTag.PVC) for i in range(3)]
    path = tmp_path / f"segs{suffix}"
    write_segments(segs, path)
    back = read_segments(path)
    assert [s.key for s in back] == [s.key for s in segs]
    for a, b in zip(segs, back):
        np.testing.assert_array_equal(a.samples_mv, b.samples_mv)
        assert b.rhythm_tag is RhythmTag.PVC


def test_segment_rejects_non_finite():
    with pytest.raises(ValidationError):
        EcgSegment(np.array([0.0, np.nan]), 360.0, "S", 0)
