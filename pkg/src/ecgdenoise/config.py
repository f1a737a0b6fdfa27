"""Versioned pipeline configuration (one JSON file, unknown keys rejected)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .dsp import FilterSpec, Preprocessor
from .errors import ValidationError
from .model import ModelConfig, preset

CONFIG_VERSION = 1
_UNHASHED = ("data_dir", "output_dir", "workers")


def _strict(cls, obj: Mapping, where: str) -> dict:
    if not isinstance(obj, Mapping):
        raise ValidationError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}")
    return dict(obj)


@dataclass(frozen=True)
class FilterSection:
    order: int = 4
    low_cut_hz: float = 0.5
    high_cut_hz: float = 45.0
    fs_hz: float = 360.0
    zero_phase: bool = False
    filter_clean: bool = False

    def spec(self) -> FilterSpec:
        return FilterSpec(self.order, self.low_cut_hz, self.high_cut_hz, self.fs_hz)

    def preprocessor(self) -> Preprocessor:
        return Preprocessor.from_spec(self.spec(), self.zero_phase, self.filter_clean)


@dataclass(frozen=True)
class SyntheticSection:
    n_subjects: int = 12
    segs_per_subject: int = 4
    noise_per_type: int = 20
    shockable_fraction: float = 0.25


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 6
    batch_size: int = 64
    lr: float = 1e-3
    val_pairs: int = 10_000
    target_snr_db: float = -5.0
    model_seed: int | None = None  # defaults to the pipeline seed


@dataclass(frozen=True)
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    data_dir: str = "data"
    output_dir: str = "out"
    split_ratios: tuple[float, float, float] = (0.8, 0.0, 0.2)
    snr_levels: tuple[float, ...] = (-5.0, 0.0, 5.0)
    condition_policy: str = "round-robin"
    workers: int | None = None
    filter: FilterSection = field(default_factory=FilterSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ValidationError(f"unsupported config version {self.version}")
        object.__setattr__(self, "split_ratios", tuple(float(r) for r in self.split_ratios))
        object.__setattr__(self, "snr_levels", tuple(float(s) for s in self.snr_levels))
        if len(self.split_ratios) != 3:
            raise ValidationError("split_ratios needs three entries (train, val, test)")
        if self.workers is not None and self.workers < 1:
            raise ValidationError("workers must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        d["split_ratios"] = list(self.split_ratios)
        d["snr_levels"] = list(self.snr_levels)
        return d

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "PipelineConfig":
        top = _strict(cls, obj, "config")
        if "filter" in top:
            top["filter"] = FilterSection(**_strict(FilterSection, top["filter"], "config.filter"))
        if "train" in top:
            top["train"] = TrainSection(**_strict(TrainSection, top["train"], "config.train"))
        if "synthetic" in top:
            top["synthetic"] = SyntheticSection(**_strict(SyntheticSection, top["synthetic"], "config.synthetic"))
        if "model" in top:
            m = top["model"]
            top["model"] = preset(m) if isinstance(m, str) else ModelConfig.from_json(m)
        try:
            return cls(**top)
        except TypeError as exc:
            raise ValidationError(f"config: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        return cls.from_json(obj)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        """Hash of everything that affects results (paths and worker count excluded)."""
        d = {k: v for k, v in self.to_json().items() if k not in _UNHASHED}
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed}

    def with_(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)


def quickstart_config(seed: int = 0, output_dir: str = "quickstart_out") -> PipelineConfig:
    """Small synthetic run: desk-size model, 3 epochs, minutes on one core."""
    return PipelineConfig(
        seed=seed,
        output_dir=output_dir,
        split_ratios=(0.65, 0.15, 0.2),
        train=TrainSection(epochs=3, batch_size=8, val_pairs=24),
        synthetic=SyntheticSection(),
    )
