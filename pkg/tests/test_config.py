import json

import pytest

from ecgdenoise.config import PipelineConfig, quickstart_config
from ecgdenoise.errors import ValidationError
from ecgdenoise.model import preset


def test_round_trip_and_hash():
    cfg = quickstart_config(3)
    back = PipelineConfig.from_json(json.loads(cfg.dumps()))
    assert back == cfg and back.hash() == cfg.hash()
    assert cfg.provenance() == {"config_hash": cfg.hash(), "seed": 3}


def test_hash_ignores_paths_and_workers():
    cfg = PipelineConfig()
    assert cfg.with_(output_dir="/elsewhere", data_dir="x", workers=7).hash() == cfg.hash()
    assert cfg.with_(seed=1).hash() != cfg.hash()


def test_unknown_keys_rejected_at_every_level():
    with pytest.raises(ValidationError):
        PipelineConfig.from_json({"sed": 1})
    with pytest.raises(ValidationError):
        PipelineConfig.from_json({"filter": {"order": 4, "notch": 50}})
    with pytest.raises(ValidationError):
        PipelineConfig.from_json({"train": {"epoch": 3}})
    with pytest.raises(ValidationError):
        PipelineConfig.from_json({"version": 2})


def test_model_preset_by_name(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": "tiny", "seed": 4}))
    cfg = PipelineConfig.load(p)
    assert cfg.model == preset("tiny") and cfg.seed == 4
    with pytest.raises(ValidationError):
        PipelineConfig.load(tmp_path / "missing.json")
