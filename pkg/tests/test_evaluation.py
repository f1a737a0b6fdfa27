import math
import warnings

import numpy as np
import pytest

from ecgdenoise.dataset import build_training_manifest, make_split
from ecgdenoise.errors import ValidationError
from ecgdenoise.evaluation import (
    ROW_FIELDS,
    TABLES,
    WAVEFORM_HEADER,
    LeakageError,
    MetricsRow,
    UndefinedCorrelationError,
    aggregate,
    build_tables,
    evaluate_pair,
    export_waveforms,
    pearson_r,
    read_csv,
    rows_csv,
    run_test_matrix,
    summarize,
    write_report,
)
from ecgdenoise.model import Denoiser, preset
from ecgdenoise.noise_synth import NoiseType, Partition


def test_pearson_known_value():
    # cov = 2.5, var_x = 1, var_y = 6.333...
    assert pearson_r([1, 2, 3], [2, 4, 7]) == pytest.approx(2.5 / math.sqrt(1 * 19 / 3), rel=1e-12)
    assert pearson_r([1, 2, 3], [2, 4, 7]) == pytest.approx(0.99339927, abs=1e-8)
    assert pearson_r([1, 2, 3], [3, 2, 1]) == -1.0
    with pytest.raises(UndefinedCorrelationError):
        pearson_r([1, 1, 1], [1, 2, 3])


def test_evaluate_pair_consistency(rng):
    clean = rng.normal(size=200)
    den = clean + 0.1 * rng.normal(size=200)
    m = evaluate_pair(clean, clean, den)
    assert m.rmse ** 2 == pytest.approx(m.mse, rel=1e-12)
    assert m.snr_db == pytest.approx(10 * np.log10(np.mean(clean ** 2) / m.mse), rel=1e-12)
    flat = evaluate_pair(clean, clean, np.zeros(200))
    assert math.isnan(flat.pearson_r) and not flat.correlation_defined
    with pytest.raises(ValidationError):
        evaluate_pair(clean, clean, den[:-1])


def _row(cond, subject, snr, r=0.5, level=-5.0, rhythm="NSR", defined=True):
    return MetricsRow(cond, level, subject, rhythm, 0, 0, snr, 1.0, 1.0, r, defined, level, level, 0.1, 0.2)


def test_overall_is_mean_of_group_means():
    rows = [_row("EMG", "A", 8.0), _row("BW", "A", 10.0), _row("BW", "B", 10.0)]
    agg = aggregate(rows, "condition")
    assert [a.group[0] for a in agg] == ["EMG", "BW", "Overall"]
    overall = agg[-1]
    assert overall.mean["snr_db"] == 9.0  # pooled rows would give 9.33
    assert overall.sd["snr_db"] == pytest.approx(math.sqrt(2.0))
    assert overall.n == 3
    assert aggregate(rows, "subject")[-1].group == ("B",)


def test_undefined_correlation_excluded_and_counted():
    rows = [_row("EMG", "A", 1.0, r=0.5), _row("EMG", "A", 1.0, r=float("nan"), defined=False),
            _row("EMG", "A", 1.0, r=0.7)]
    with pytest.warns(UserWarning, match="1 rows"):
        agg = aggregate(rows, "condition")
    assert agg[0].mean["pearson_r"] == pytest.approx(0.6)
    assert agg[0].n_undefined_r == 1 and agg[0].n == 3


def test_tables_and_csv(tmp_path):
    rows = [_row(c, s, 5.0 + k, level=lv, rhythm=rh) for k, c in enumerate(["EMG", "BW + MA"])
            for s in ("A", "B") for lv in (-5.0, 0.0) for rh in ("NSR", "CoarseVF")]
    tables = build_tables(rows)
    assert set(tables) == {"table1_by_condition.csv", "table2_by_subject.csv",
                           "table3_by_condition_0db.csv", "table4_by_subject_0db.csv",
                           "table5_shockable.csv"}
    paths = write_report(rows, tmp_path, "abc123", 7)
    text = (tmp_path / "table1_by_condition.csv").read_text()
    assert text.splitlines()[0] == "# config_hash=abc123 seed=7"
    parsed = read_csv(tmp_path / "table1_by_condition.csv")
    assert [r["noise_combination"] for r in parsed] == ["EMG", "BW + MA", "Overall"]
    shock = read_csv(tmp_path / "table5_shockable.csv")
    assert {r["ecg_type"] for r in shock} == {"CoarseVF"}
    assert len(paths) == 5
    back = read_csv(rows_csv(rows, "# x"))
    assert tuple(back[0]) == ROW_FIELDS and len(back) == len(rows)


def test_waveform_export(tmp_path):
    text = export_waveforms([0.0, 1.0], [0.5, 1.5], [0.1, 0.9], 2.0, tmp_path / "w.csv")
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == WAVEFORM_HEADER and text.splitlines() == lines
    assert lines[2] == "0.5,1.0,1.5,0.9"
    with pytest.raises(ValidationError):
        export_waveforms([0.0], [0.0, 1.0], [0.0], 2.0)


@pytest.fixture(scope="module")
def tiny_eval(toy_corpus):
    split = make_split(toy_corpus.subjects(), toy_corpus.noise_counts(), 0, (0.5, 0.0, 0.5))
    tm = build_training_manifest(split, toy_corpus.refs_for(split.subjects(Partition.Train)))
    m = Denoiser.build(preset("tiny"), seed=0)
    x = np.random.default_rng(0).normal(size=(4, 40)).astype(np.float32)
    m.loss_and_grads(x, x)
    return split, tm, m


def test_run_test_matrix(toy_corpus, tiny_eval):
    split, tm, m = tiny_eval
    res = run_test_matrix(m, split, toy_corpus, train_manifest=tm, seed=2)
    n_test = len(toy_corpus.refs_for(split.subjects(Partition.Test)))
    assert len(res.rows) == n_test * 7 * 3
    for r in res.rows:
        assert r.rmse ** 2 == pytest.approx(r.mse, rel=1e-9)
        assert r.input_snr_db == pytest.approx(r.snr_level_db, abs=1e-6)
    s = summarize(res.rows, -5.0)
    assert s["n"] == n_test * 7 and s["input_snr_db"] == pytest.approx(-5.0, abs=1e-6)
    again = run_test_matrix(m, split, toy_corpus, train_manifest=tm, seed=2, workers=3)
    assert rows_csv(again.rows) == rows_csv(res.rows)


def test_rhythm_filter_defaults_to_minus5(toy_corpus, tiny_eval):
    split, tm, m = tiny_eval
    res = run_test_matrix(m, split, toy_corpus, rhythms=["vf"])
    assert {r.snr_level_db for r in res.rows} == {-5.0}
    assert {r.rhythm_tag for r in res.rows} == {"CoarseVF"}
    with pytest.raises(ValidationError):
        run_test_matrix(m, split, toy_corpus, rhythms=["AF"])


def test_leakage_aborts_before_inference(toy_corpus, tiny_eval):
    split, tm, m = tiny_eval
    bad = build_training_manifest(split, toy_corpus.refs_for(split.subjects(Partition.Train)))
    bad.noise_index[bad.noise_index[:, 0] >= 0, 0] = split.noise_test[NoiseType.EMG][0]
    calls = []
    orig = m.predict
    m.predict = lambda *a, **k: calls.append(1) or orig(*a, **k)
    try:
        with pytest.raises(LeakageError) as exc:
            run_test_matrix(m, split, toy_corpus, train_manifest=bad)
    finally:
        del m.predict
    assert not calls
    assert not exc.value.report.passed
    assert len(str(exc.value).splitlines()) <= 13


def test_table_specs_cover_three_levels():
    assert {lv for _, lv, _ in TABLES} == {-5.0, 0.0, 5.0}
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        aggregate([_row("EMG", "A", 1.0)], "rhythm")
