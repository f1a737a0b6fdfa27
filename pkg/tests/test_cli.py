import json

import pytest

from ecgdenoise.cli import main
from ecgdenoise.evaluation import WAVEFORM_HEADER, read_csv


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == 0
    assert main(["train", "--help"]) == 0
    assert main(["train", "--bogus"]) == 1
    assert main([]) == 1


def test_dsp_design_stdout(capsys):
    assert main(["dsp", "design"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "section,b0,b1,b2,a0,a1,a2" and len(out) == 6
    assert main(["dsp", "response", "--n", "8"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 9
    assert main(["dsp", "design", "--low", "50", "--high", "10"]) == 1


def test_missing_input_is_validation_error(tmp_path):
    assert main(["split", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "s.json")]) != 0
    assert main(["audit", "--split", str(tmp_path / "nope.json")]) == 1


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, toy_corpus):
    d = tmp_path_factory.mktemp("cli")
    toy_corpus.save(d / "corpus")
    (d / "cfg.json").write_text(json.dumps({"model": "tiny", "seed": 2, "split_ratios": [0.5, 0.0, 0.5],
                                            "train": {"epochs": 1, "batch_size": 4}}))
    return d


def _run(d, *args):
    return main([*args[:1], "--config", str(d / "cfg.json"), *args[1:]])


def test_pipeline_through_cli(workdir, capsys):
    d = workdir
    assert _run(d, "split", "--corpus", str(d / "corpus"), "--out", str(d / "split.json")) == 0
    split = json.loads((d / "split.json").read_text())
    assert split["provenance"]["seed"] == 2
    for kind in ("train", "test"):
        assert _run(d, "manifest", "--corpus", str(d / "corpus"), "--split", str(d / "split.json"),
                    "--kind", kind, "--levels", "-5,0", "--out", str(d / f"{kind}.json")) == 0
    assert json.loads(capsys.readouterr().out.split("\n}\n")[-2] + "\n}")["entries"] > 0
    assert main(["audit", "--split", str(d / "split.json"), "--train", str(d / "train.json"),
                 "--test", str(d / "test.json")]) == 0
    assert capsys.readouterr().out.startswith("PASS")

    assert _run(d, "train", "--manifest", str(d / "train.json"), "--corpus", str(d / "corpus"),
                "--out", str(d / "m.ednz"), "--history", str(d / "h.json")) == 0
    assert _run(d, "eval", "--model", str(d / "m.ednz"), "--split", str(d / "split.json"),
                "--corpus", str(d / "corpus"), "--levels", "-5,0,5", "--train-manifest", str(d / "train.json"),
                "--out", str(d / "rows.csv"), "--agg-out", str(d / "tables")) == 0
    t1 = read_csv(d / "tables" / "table1_by_condition.csv")
    assert len(t1) == 8 and t1[-1]["noise_combination"] == "Overall"
    assert (d / "tables" / "table1_by_condition.csv").read_text().startswith("# config_hash=")

    assert _run(d, "bench", "--model", str(d / "m.ednz"), "--n", "2", "--warmup", "0",
                "--json", str(d / "bench.json")) == 0
    assert "1.41" in json.loads((d / "bench.json").read_text())["reference"]
    assert _run(d, "export-waveforms", "--model", str(d / "m.ednz"), "--corpus", str(d / "corpus"),
                "--split", str(d / "split.json"), "--n", "1", "--out-dir", str(d / "wave")) == 0
    idx = json.loads((d / "wave" / "index.json").read_text())
    assert (d / "wave" / idx["files"][0]).read_text().splitlines()[0] == WAVEFORM_HEADER


def test_audit_flags_injected_leak(workdir, capsys):
    d = workdir
    split_path = d / "split.json"
    if not split_path.exists():
        pytest.skip("pipeline test did not run")
    split = json.loads(split_path.read_text())
    m = json.loads((d / "train.json").read_text())
    bad = split["noise_test"]["MA"][0]
    row = next(i for i, r in enumerate(m["noise_index"]) if r[2] >= 0)
    m["noise_index"][row][2] = bad
    (d / "bad.json").write_text(json.dumps(m))
    assert main(["audit", "--split", str(split_path), "--train", str(d / "bad.json")]) == 1
    out = capsys.readouterr().out
    assert f"[train entry {row}]" in out and f"MA noise {bad}" in out
    assert _run(d, "eval", "--model", str(d / "m.ednz"), "--split", str(split_path),
                "--corpus", str(d / "corpus"), "--train-manifest", str(d / "bad.json"),
                "--out", str(d / "x.csv")) == 1


def test_config_command(capsys):
    assert main(["config", "--quickstart"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["train"]["epochs"] == 3
