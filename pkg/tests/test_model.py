import json
import struct

import numpy as np
import pytest

from _gradcheck import model_check
from ecgdenoise.dataset import build_training_manifest, build_validation_manifest, make_split, materialize
from ecgdenoise.errors import CheckpointError, QuantizationError, TrainingError, ValidationError
from ecgdenoise.model import (
    F16_MIN_NORMAL,
    Checkpoint,
    Denoiser,
    ModelConfig,
    infer,
    param_shapes,
    preset,
    quantize_f16,
    to_f16,
    train,
)
from ecgdenoise.noise_synth import Partition


def _independent_count(cfg: ModelConfig) -> int:
    k, (c1, c2), (h1, h2) = cfg.kernel_size, cfg.conv_channels, cfg.lstm_hidden
    merge = 2 if cfg.skip_merge == "concat" else 1

    def bilstm(n_in, hid):
        return 2 * (4 * hid * (n_in + hid) + 4 * hid)

    return ((k * c1 + c1) + 2 * c1 + (k * c1 * c2 + c2) + 2 * c2
            + bilstm(c2, h1) + bilstm(2 * h1, h2) + bilstm(2 * h2, h2) + bilstm(2 * h2, h1)
            + (k * 2 * h1 * c1 + c1) + (k * merge * c1 + 1) + (merge + 1))


def test_desk_parameter_count_frozen():
    m = Denoiser.build(ModelConfig())
    assert m.parameter_count() == 114_819
    assert _independent_count(ModelConfig()) == 114_819


@pytest.mark.parametrize("name", ["desk", "wide", "tiny"])
@pytest.mark.parametrize("merge", ["add", "concat"])
def test_parameter_count_matches_oracle(name, merge):
    cfg = ModelConfig(**{**preset(name).to_json(), "skip_merge": merge})
    assert sum(int(np.prod(s)) for _, s in param_shapes(cfg)) == _independent_count(cfg)


def test_config_validation_and_json():
    with pytest.raises(ValidationError):
        ModelConfig(kernel_size=4)
    with pytest.raises(ValidationError):
        ModelConfig(input_length=5041)
    with pytest.raises(ValidationError):
        ModelConfig(skip_merge="mul")
    with pytest.raises(ValidationError):
        ModelConfig.from_json({"input_length": 40, "depth": 3})
    cfg = preset("tiny")
    assert ModelConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
    with pytest.raises(ValidationError):
        preset("huge")


def test_init_conventions():
    m = Denoiser.build(ModelConfig(), seed=0)
    u = m.params["enc_bilstm1.fwd.U"]  # [32, 128]
    np.testing.assert_allclose(u @ u.T, np.eye(32), atol=1e-5)
    b = m.params["enc_bilstm1.fwd.b"]
    assert np.all(b[32:64] == 1) and np.all(b[:32] == 0) and np.all(b[64:] == 0)
    assert np.all(m.params["enc_bn1.gamma"] == 1)


def test_forward_shape_and_length_check(rng):
    m = Denoiser.build(preset("tiny"), seed=1)
    x = rng.normal(size=(3, 40)).astype(np.float32)
    m.loss_and_grads(x, x)  # one training pass so BN has statistics
    assert m.predict(x).shape == (3, 40)
    assert m.predict(x[..., None]).shape == (3, 40, 1)
    with pytest.raises(ValidationError):
        m.predict(rng.normal(size=(1, 41)))


def test_infer_before_training_raises(rng):
    m = Denoiser.build(preset("tiny"))
    with pytest.raises(ValidationError):
        m.predict(rng.normal(size=(1, 40)))


def test_concat_merge_gradients(rng):
    cfg = ModelConfig(**{**preset("tiny").to_json(), "skip_merge": "concat"})
    m = Denoiser.build(cfg, seed=2, dtype=np.float64)
    x, y = rng.normal(size=(2, 40, 1)), rng.normal(size=(2, 40, 1))
    smooth, kink, _ = model_check(m, x, y)
    assert smooth < 1e-3 and kink < 1e-2


def _trained_tiny(rng) -> Denoiser:
    m = Denoiser.build(preset("tiny"), seed=3)
    x = rng.normal(size=(4, 40)).astype(np.float32)
    m.loss_and_grads(x, x)
    return m


def test_checkpoint_round_trip(tmp_path, rng):
    m = _trained_tiny(rng)
    ck = Checkpoint.from_model(m, {"epoch": 2})
    ck.save(tmp_path / "a.ednz")
    back = Checkpoint.load(tmp_path / "a.ednz")
    back.save(tmp_path / "b.ednz")
    assert (tmp_path / "a.ednz").read_bytes() == (tmp_path / "b.ednz").read_bytes()
    assert back.metadata["epoch"] == 2 and back.metadata["config_hash"] == m.config.hash()
    x = rng.normal(size=(2, 40)).astype(np.float32)
    np.testing.assert_array_equal(back.to_model().predict(x), m.predict(x))


def test_checkpoint_layout(rng):
    ck = Checkpoint.from_model(_trained_tiny(rng))
    data = ck.to_bytes()
    assert data[:4] == b"EDNZ" and struct.unpack("<H", data[4:6])[0] == 1
    n_cfg = struct.unpack("<I", data[6:10])[0]
    assert json.loads(data[10:10 + n_cfg]) == ck.config.to_json()


def test_checkpoint_rejects_corruption(rng):
    data = Checkpoint.from_model(_trained_tiny(rng)).to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(data[:4] + struct.pack("<H", 2) + data[6:])
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(data[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        Checkpoint.from_bytes(data + b"\0")


def test_checkpoint_config_mismatch(rng):
    ck = Checkpoint.from_model(_trained_tiny(rng))
    ck.config = ModelConfig(**{**ck.config.to_json(), "lstm_hidden": [4, 3]})
    with pytest.raises(CheckpointError):
        ck.to_model()


def test_to_f16_rounding_and_limits():
    x = np.array([1.0, 1.0 + 2 ** -11, 1.0 + 3 * 2 ** -11, 1e-6, -3e-5, 65504.0], dtype=np.float32)
    h = to_f16(x)
    # ties go to even
    assert h[1] == 1.0 and h[2] == np.float16(1.0 + 2 ** -9)
    assert h[3] == 0 and h[4] == 0
    assert h[5] == 65504
    assert to_f16(np.array([1e-6]), flush_subnormals=False)[0] != 0
    with pytest.raises(QuantizationError):
        to_f16(np.array([70000.0]))
    with pytest.raises(QuantizationError):
        to_f16(np.array([np.nan]))


def test_quantize_keeps_buffers_f32(rng):
    ck = quantize_f16(_trained_tiny(rng))
    assert ck.weight_dtype == "f16"
    assert ck.tensors["enc_bn1.running_var"].dtype == np.float32
    assert ck.tensors["enc_conv1.w"].dtype == np.float16
    back = Checkpoint.from_bytes(ck.to_bytes())
    assert back.to_bytes() == ck.to_bytes()
    w = ck.tensors["enc_conv1.w"].astype(np.float32)
    assert np.all((np.abs(w) >= F16_MIN_NORMAL) | (w == 0))


def test_infer_accepts_single_segment(rng):
    m = _trained_tiny(rng)
    x = rng.normal(size=40)
    assert infer(Checkpoint.from_model(m), x).shape == (40,)


def test_train_returns_best_val_model(toy_corpus):
    corpus = toy_corpus
    split = make_split(corpus.subjects(), corpus.noise_counts(), 0, (0.5, 0.25, 0.25))
    tm = build_training_manifest(split, corpus.refs_for(split.subjects(Partition.Train)))
    vm = build_validation_manifest(split, corpus.refs_for(split.subjects(Partition.Val)), 8)
    val = materialize(vm, corpus, range(len(vm)))
    m = Denoiser.build(preset("tiny"), seed=0)
    res = train(m, tm, corpus, epochs=4, batch_size=4, lr=1e-2, val_pairs=val, seed=1)
    h = res.history
    assert len(h.epochs) == 4 and len(h.step_losses) == 4 * -(-len(tm) // 4)
    vals = [e["val_loss"] for e in h.epochs]
    assert h.best_val_loss == min(vals) and h.best_epoch == vals.index(min(vals)) + 1
    from ecgdenoise.model import validation_loss
    assert validation_loss(res.model, val) == pytest.approx(h.best_val_loss, rel=1e-6)
    # same seed, same result
    m2 = Denoiser.build(preset("tiny"), seed=0)
    res2 = train(m2, tm, corpus, epochs=4, batch_size=4, lr=1e-2, val_pairs=val, seed=1)
    assert res2.history.step_losses == h.step_losses


def test_train_reports_offending_entries(toy_corpus):
    corpus = toy_corpus
    split = make_split(corpus.subjects(), corpus.noise_counts(), 0, (0.5, 0.25, 0.25))
    tm = build_training_manifest(split, corpus.refs_for(split.subjects(Partition.Train)))
    m = Denoiser.build(preset("tiny"), seed=0)
    m.params["out.b"][:] = np.inf
    with pytest.raises(TrainingError) as exc, np.errstate(all="ignore"):
        train(m, tm, corpus, epochs=1, batch_size=4)
    assert len(exc.value.entry_ids) == 4
