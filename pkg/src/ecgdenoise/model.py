"""Convolutional / Bi-LSTM encoder-decoder denoiser.

Layout (channels-last, ``L`` = input length)::

    x [B,L,1] -> conv1(s2) -> BN -> LReLU = e1 [B,L/2,C1]
              -> conv2(s2) -> BN -> LReLU      [B,L/4,C2]
              -> BiLSTM(H1) -> BiLSTM(H2)                      encoder
              -> BiLSTM(H2) -> BiLSTM(H1)                      decoder
              -> tconv1(s2) -> LReLU, merged with e1           [B,L/2,C1]
              -> tconv2(s2), merged with x                     [B,L,1]
              -> 1x1 conv                                      [B,L,1]

"merged" is an elementwise add by default or a channel concat.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .dataset import Batch, Corpus, SynthesisManifest, stream_pairs
from .errors import CheckpointError, QuantizationError, TrainingError, ValidationError
from .nn import (
    Adam,
    BatchNormState,
    Tensor,
    add,
    backward,
    batch_norm,
    bilstm,
    concat,
    conv1d,
    conv1d_transpose,
    leaky_relu,
    mse_loss,
)

SKIP_MERGES = ("add", "concat")


@dataclass(frozen=True)
class ModelConfig:
    input_length: int = 5040
    conv_channels: tuple[int, int] = (16, 32)
    kernel_size: int = 15
    stride: int = 2
    lstm_hidden: tuple[int, int] = (32, 32)
    leaky_slope: float = 0.2
    skip_merge: str = "add"
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "lstm_hidden", tuple(int(h) for h in self.lstm_hidden))
        if len(self.conv_channels) != 2 or len(self.lstm_hidden) != 2:
            raise ValidationError("conv_channels and lstm_hidden must each have two entries")
        if min(self.conv_channels + self.lstm_hidden) < 1:
            raise ValidationError("channel and hidden sizes must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValidationError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")
        if self.input_length < 1 or self.input_length % (self.stride ** 2) != 0:
            raise ValidationError(
                f"input_length {self.input_length} must be divisible by stride^2 = {self.stride ** 2}")
        if self.skip_merge not in SKIP_MERGES:
            raise ValidationError(f"skip_merge must be one of {SKIP_MERGES}, got {self.skip_merge!r}")
        if not 0.0 <= self.bn_momentum < 1.0 or self.bn_eps <= 0:
            raise ValidationError("bn_momentum must be in [0, 1) and bn_eps > 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["lstm_hidden"] = list(self.lstm_hidden)
        return d

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


# "wide" widths are a guess at a full-size run; no published widths exist.
PRESETS: dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    "wide": ModelConfig(conv_channels=(32, 64), lstm_hidden=(64, 64)),
    "tiny": ModelConfig(input_length=40, conv_channels=(2, 3), lstm_hidden=(3, 3)),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# --------------------------------------------------------------------------
# parameter layout


def _lstm_shapes(prefix: str, n_in: int, hid: int) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for d in ("fwd", "bwd"):
        out += [(f"{prefix}.{d}.W", (n_in, 4 * hid)), (f"{prefix}.{d}.U", (hid, 4 * hid)),
                (f"{prefix}.{d}.b", (4 * hid,))]
    return out


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Trainable tensors in canonical order."""
    k = config.kernel_size
    c1, c2 = config.conv_channels
    h1, h2 = config.lstm_hidden
    merge = 2 if config.skip_merge == "concat" else 1
    shapes = [
        ("enc_conv1.w", (k, 1, c1)), ("enc_conv1.b", (c1,)),
        ("enc_bn1.gamma", (c1,)), ("enc_bn1.beta", (c1,)),
        ("enc_conv2.w", (k, c1, c2)), ("enc_conv2.b", (c2,)),
        ("enc_bn2.gamma", (c2,)), ("enc_bn2.beta", (c2,)),
    ]
    shapes += _lstm_shapes("enc_bilstm1", c2, h1)
    shapes += _lstm_shapes("enc_bilstm2", 2 * h1, h2)
    shapes += _lstm_shapes("dec_bilstm1", 2 * h2, h2)
    shapes += _lstm_shapes("dec_bilstm2", 2 * h2, h1)
    shapes += [
        ("dec_tconv1.w", (k, c1, 2 * h1)), ("dec_tconv1.b", (c1,)),
        ("dec_tconv2.w", (k, 1, merge * c1)), ("dec_tconv2.b", (1,)),
        ("out.w", (1, merge, 1)), ("out.b", (1,)),
    ]
    return shapes


BN_LAYERS = ("enc_bn1", "enc_bn2")
BUFFER_SUFFIXES = ("running_mean", "running_var", "num_batches")


def _glorot(rng, shape, fan_in, fan_out) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def _orthogonal(rng, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q.T if rows < cols else q


def _init_tensor(rng, name: str, shape) -> np.ndarray:
    leaf = name.rsplit(".", 1)[1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf == "beta":
        return np.zeros(shape)
    if leaf == "w":  # conv [K, Cin, Cout] / tconv [K, Cout, Cin]
        k = shape[0]
        return _glorot(rng, shape, k * shape[1], k * shape[2])
    if leaf == "W":
        return _glorot(rng, shape, shape[0], shape[1])
    if leaf == "U":
        return _orthogonal(rng, *shape)
    if leaf == "b":
        b = np.zeros(shape)
        if ".fwd." in name or ".bwd." in name:
            hid = shape[0] // 4
            b[hid:2 * hid] = 1.0  # forget gate
        return b
    raise AssertionError(name)


# --------------------------------------------------------------------------
# model


class Denoiser:
    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray],
                 bn: Mapping[str, BatchNormState], dtype=np.float32):
        expected = param_shapes(config)
        names = [n for n, _ in expected]
        if set(params) != set(names):
            missing, extra = set(names) - set(params), set(params) - set(names)
            raise ValidationError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for n, shp in expected:
            if tuple(params[n].shape) != shp:
                raise ValidationError(f"{n}: shape {tuple(params[n].shape)} != expected {shp}")
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = {n: np.ascontiguousarray(params[n], dtype=self.dtype) for n in names}
        self.bn = {k: bn[k] for k in BN_LAYERS}

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Denoiser":
        rng = np.random.default_rng(seed)
        params = {n: _init_tensor(rng, n, shp) for n, shp in param_shapes(config)}
        c1, c2 = config.conv_channels
        bn = {
            "enc_bn1": BatchNormState.fresh(c1, config.bn_momentum, config.bn_eps, dtype=np.float32),
            "enc_bn2": BatchNormState.fresh(c2, config.bn_momentum, config.bn_eps, dtype=np.float32),
        }
        return cls(config, params, bn, dtype)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Denoiser":
        return Denoiser(self.config, {n: p.copy() for n, p in self.params.items()},
                        copy.deepcopy(self.bn), self.dtype)

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for k, st in self.bn.items():
            out[f"{k}.running_mean"] = np.asarray(st.running_mean, dtype=np.float32)
            out[f"{k}.running_var"] = np.asarray(st.running_var, dtype=np.float32)
            out[f"{k}.num_batches"] = np.asarray([st.num_batches], dtype=np.float32)
        return out

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[..., None]
        if x.ndim != 3 or x.shape[2] != 1:
            raise ValidationError(f"input must be [B, L] or [B, L, 1], got {x.shape}")
        if x.shape[1] != self.config.input_length:
            raise ValidationError(
                f"input length {x.shape[1]} != configured input_length {self.config.input_length}")
        return x.astype(self.dtype, copy=False)

    def graph(self, x, leaves: Mapping[str, Tensor], training: bool) -> Tensor:
        """Build the forward graph over ``leaves`` (one Tensor per parameter)."""
        cfg, p = self.config, leaves
        s, slope = cfg.stride, cfg.leaky_slope
        x = x if isinstance(x, Tensor) else Tensor(self._check_input(x))
        e1 = conv1d(x, p["enc_conv1.w"], p["enc_conv1.b"], s)
        e1 = leaky_relu(batch_norm(e1, p["enc_bn1.gamma"], p["enc_bn1.beta"], self.bn["enc_bn1"], training), slope)
        e2 = conv1d(e1, p["enc_conv2.w"], p["enc_conv2.b"], s)
        h = leaky_relu(batch_norm(e2, p["enc_bn2.gamma"], p["enc_bn2.beta"], self.bn["enc_bn2"], training), slope)
        for layer in ("enc_bilstm1", "enc_bilstm2", "dec_bilstm1", "dec_bilstm2"):
            h = bilstm(h, tuple(p[f"{layer}.fwd.{n}"] for n in "WUb"),
                       tuple(p[f"{layer}.bwd.{n}"] for n in "WUb"))
        d1 = leaky_relu(conv1d_transpose(h, p["dec_tconv1.w"], p["dec_tconv1.b"], s), slope)
        u1 = add(d1, e1) if cfg.skip_merge == "add" else concat([d1, e1], axis=-1)
        d2 = conv1d_transpose(u1, p["dec_tconv2.w"], p["dec_tconv2.b"], s)
        u2 = add(d2, x) if cfg.skip_merge == "add" else concat([d2, x], axis=-1)
        return conv1d(u2, p["out.w"], p["out.b"], 1)

    def leaves(self, requires_grad: bool) -> dict[str, Tensor]:
        return {n: Tensor(a, requires_grad=requires_grad, name=n) for n, a in self.params.items()}

    def forward(self, x, training: bool = False) -> np.ndarray:
        return self.graph(x, self.leaves(False), training).data

    def predict(self, x, batch_size: int = 32) -> np.ndarray:
        """Infer-mode output with the same rank as ``x`` ([B, L] or [B, L, 1])."""
        arr = np.asarray(x)
        xin = self._check_input(arr)
        outs = [self.forward(xin[i:i + batch_size], training=False)
                for i in range(0, len(xin), batch_size)]
        y = np.concatenate(outs, axis=0) if outs else np.zeros_like(xin)
        return y[..., 0] if arr.ndim == 2 else y

    def loss_and_grads(self, noisy, clean, training: bool = True) -> tuple[float, dict[str, np.ndarray]]:
        leaves = self.leaves(True)
        out = self.graph(noisy, leaves, training)
        loss = mse_loss(out, np.asarray(clean, dtype=self.dtype).reshape(out.shape))
        grads = backward(loss, list(leaves.values()))
        return float(loss.data), dict(zip(leaves, grads))


def build_model(config: ModelConfig | None = None, seed: int = 0) -> Denoiser:
    return Denoiser.build(config or ModelConfig(), seed)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    initial_val_loss: float | None = None
    best_epoch: int | None = None
    best_val_loss: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Denoiser
    history: TrainHistory
    final_model: Denoiser


def validation_loss(model: Denoiser, val: Batch, batch_size: int = 32) -> float:
    pred = model.predict(val.noisy, batch_size=batch_size)
    diff = pred.astype(np.float64) - val.clean.astype(np.float64)
    return float(np.mean(diff * diff))


def train(model: Denoiser, manifest: SynthesisManifest, corpus: Corpus, epochs: int = 6,
          batch_size: int = 64, lr: float = 1e-3, val_pairs: Batch | None = None, seed: int = 0,
          preprocess=None, workers: int = 1,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Adam on MSE; returns the parameters with the lowest validation loss.

    Without ``val_pairs`` the last epoch is returned. The input model is
    updated in place (it ends as the last-epoch model).
    """
    if epochs < 1 or batch_size < 1 or lr <= 0:
        raise ValidationError("epochs and batch_size must be >= 1 and lr > 0")
    if len(manifest) == 0:
        raise ValidationError("training manifest is empty")
    opt = Adam(lr=lr)
    hist = TrainHistory()
    best = model.copy()
    if val_pairs is not None and all(st.num_batches > 0 for st in model.bn.values()):
        hist.initial_val_loss = validation_loss(model, val_pairs)
    for epoch in range(epochs):
        losses = []
        for batch in stream_pairs(manifest, corpus, batch_size, epoch, preprocess, workers,
                                  model.dtype, seed=seed):
            loss, grads = model.loss_and_grads(batch.noisy, batch.clean, training=True)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch + 1}", batch.entry_ids.tolist())
            try:
                opt.step(model.params, grads)
            except FloatingPointError as exc:
                raise TrainingError(str(exc), batch.entry_ids.tolist()) from None
            losses.append(loss)
            hist.step_losses.append(loss)
        rec = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "steps": len(losses),
               "val_loss": None}
        if val_pairs is not None:
            rec["val_loss"] = validation_loss(model, val_pairs)
            if hist.best_val_loss is None or rec["val_loss"] < hist.best_val_loss:
                hist.best_val_loss, hist.best_epoch = rec["val_loss"], epoch + 1
                best = model.copy()
        else:
            hist.best_epoch = epoch + 1
            best = model.copy()
        hist.epochs.append(rec)
        if log:
            val = "n/a" if rec["val_loss"] is None else f"{rec['val_loss']:.6f}"
            log(f"epoch {epoch + 1}/{epochs}: train_loss={rec['train_loss']:.6f} val_loss={val}")
    return TrainResult(best, hist, model)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"EDNZ"
VERSION = 1
DTYPE_CODES = {"f32": 0, "f16": 1}
_CODE_DTYPES = {0: ("f32", np.dtype("<f4")), 1: ("f16", np.dtype("<f2"))}
F16_MAX = 65504.0
F16_MIN_NORMAL = 2.0 ** -14


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]  # float32 or float16 arrays
    metadata: dict = field(default_factory=dict)

    @property
    def weight_dtype(self) -> str:
        kinds = {a.dtype.itemsize for n, a in self.tensors.items() if not _is_buffer(n)}
        return "f16" if kinds == {2} else "f32"

    @classmethod
    def from_model(cls, model: Denoiser, metadata: Mapping | None = None) -> "Checkpoint":
        tensors = {n: np.asarray(a, dtype=np.float32) for n, a in model.params.items()}
        tensors.update(model.buffers())
        meta = {"config_hash": model.config.hash()}
        meta.update(metadata or {})
        return cls(model.config, tensors, meta)

    def to_model(self) -> Denoiser:
        names = dict(param_shapes(self.config))
        bufs = {f"{k}.{s}" for k in BN_LAYERS for s in BUFFER_SUFFIXES}
        got = set(self.tensors)
        if got != set(names) | bufs:
            raise CheckpointError(
                f"checkpoint tensors do not match config: missing {sorted(set(names) | bufs - got)}, "
                f"extra {sorted(got - set(names) - bufs)}")
        for n, shp in names.items():
            if tuple(self.tensors[n].shape) != shp:
                raise CheckpointError(f"{n}: checkpoint shape {self.tensors[n].shape} != config shape {shp}")
        params = {n: self.tensors[n].astype(np.float32) for n in names}
        bn = {}
        for k in BN_LAYERS:
            c = self.tensors[f"{k}.running_mean"].shape
            if self.tensors[f"{k}.running_var"].shape != c or c != names[f"{k}.gamma"]:
                raise CheckpointError(f"{k}: running statistics have the wrong shape")
            bn[k] = BatchNormState(self.tensors[f"{k}.running_mean"].astype(np.float32),
                                   self.tensors[f"{k}.running_var"].astype(np.float32),
                                   self.config.bn_momentum, self.config.bn_eps,
                                   int(self.tensors[f"{k}.num_batches"][0]))
        return Denoiser(self.config, params, bn)

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<H", VERSION)]
        for obj in (self.config.to_json(), self.metadata):
            blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
            out.append(struct.pack("<I", len(blob)) + blob)
        out.append(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            if arr.dtype == np.float32:
                code, le = 0, arr.astype("<f4")
            elif arr.dtype == np.float16:
                code, le = 1, arr.astype("<f2")
            else:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            nb = name.encode()
            out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = np.ascontiguousarray(le).tobytes()
            out.append(struct.pack("<Q", len(payload)) + payload)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        pos = 0

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError(f"truncated checkpoint at byte {pos}")
            chunk = bytes(view[pos:pos + n])
            pos += n
            return chunk

        if take(4) != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        (version,) = struct.unpack("<H", take(2))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            cfg = json.loads(take(struct.unpack("<I", take(4))[0]))
            meta = json.loads(take(struct.unpack("<I", take(4))[0]))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        try:
            config = ModelConfig.from_json(cfg)
        except (TypeError, ValidationError) as exc:
            raise CheckpointError(f"invalid model config in checkpoint: {exc}") from None
        (count,) = struct.unpack("<I", take(4))
        tensors = {}
        for _ in range(count):
            name = take(struct.unpack("<H", take(2))[0]).decode()
            code, ndim = struct.unpack("<BB", take(2))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            (nbytes,) = struct.unpack("<Q", take(8))
            dt = _CODE_DTYPES[code][1]
            if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
                raise CheckpointError(f"{name}: payload of {nbytes} bytes does not match shape {shape}")
            arr = np.frombuffer(take(nbytes), dtype=dt).reshape(shape)
            tensors[name] = arr.astype(dt.newbyteorder("="))
        if pos != len(view):
            raise CheckpointError(f"{len(view) - pos} trailing bytes after tensor table")
        return cls(config, tensors, meta)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        return cls.from_bytes(data)


def _is_buffer(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in BUFFER_SUFFIXES


def to_f16(arr: np.ndarray, flush_subnormals: bool = True) -> np.ndarray:
    """Round to half precision (nearest-even).

    Values that would land in the f16 subnormal range (|x| < 2^-14) become
    zero unless ``flush_subnormals`` is off; overflow raises.
    """
    a = np.asarray(arr, dtype=np.float32)
    big = np.abs(a) > F16_MAX
    if np.any(big) or not np.all(np.isfinite(a)):
        raise QuantizationError(f"value out of half-precision range (|w| > {F16_MAX} or non-finite)")
    h = a.astype(np.float16)
    if flush_subnormals:
        h[np.abs(h) < F16_MIN_NORMAL] = 0
    return h


def quantize_f16(model_or_ckpt, flush_subnormals: bool = True) -> Checkpoint:
    """Weights stored as f16; BN running statistics stay f32."""
    ck = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else Checkpoint.from_model(model_or_ckpt)
    tensors = {}
    for name, arr in ck.tensors.items():
        if _is_buffer(name):
            tensors[name] = np.asarray(arr, dtype=np.float32)
        else:
            try:
                tensors[name] = to_f16(arr, flush_subnormals)
            except QuantizationError as exc:
                raise QuantizationError(f"{name}: {exc}") from None
    return Checkpoint(ck.config, tensors, dict(ck.metadata))


def infer(checkpoint: Checkpoint | Denoiser, noisy, batch_size: int = 32) -> np.ndarray:
    """Denoise one segment ``[L]`` or a batch ``[B, L]`` (input already bandpassed)."""
    model = checkpoint if isinstance(checkpoint, Denoiser) else checkpoint.to_model()
    x = np.asarray(noisy, dtype=np.float32)
    if x.ndim == 1:
        return model.predict(x[None], batch_size)[0]
    return model.predict(x, batch_size)
