"""Model/training configuration, presets and flat dotted-key config files."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .codec import CodecConfig
from .masknet import MasknetConfig

MODEL_KINDS = ("ambisep", "omni-sf", "pwd-sf", "oracle")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "ambisep"
    order: int = 1
    sample_rate: int = 16000
    n_filters: int = 256
    kernel_size: int = 32
    stride: int = 16
    chunk_size: int = 250
    repeats: int = 8
    layers: int = 1
    ff_dim: int = 1024
    heads: int = 8
    n_sources: int = 2
    block_order: str = "ichan-first"
    use_pwd: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {', '.join(MODEL_KINDS)}")

    @property
    def n_channels(self) -> int:
        return (self.order + 1) ** 2

    def codec(self) -> CodecConfig:
        return CodecConfig(self.n_filters, self.kernel_size, self.stride)

    def masknet(self) -> MasknetConfig:
        single = self.kind in ("omni-sf", "pwd-sf")
        return MasknetConfig(
            n_features=self.n_filters,
            chunk_size=self.chunk_size,
            repeats=self.repeats,
            layers=self.layers,
            ff_dim=self.ff_dim,
            heads=self.heads,
            n_sources=self.n_sources,
            n_channels=1 if single else self.n_channels,
            block_order=self.block_order,
            interchannel=not single,
            dropout=self.dropout,
        )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1.5e-4
    epochs: int = 170
    lr_decay_factor: float = 0.5
    lr_patience: int = 3
    lr_decay_start_epoch: int = 65
    clip_norm: float = 5.0
    batch_size: int = 1
    seed: int = 0
    max_steps: int | None = None
    crop_seconds: float | None = None  # random training crops; None trains on whole mixtures
    dtype: str = "float32"


@dataclass(frozen=True)
class DataConfig:
    sample_rate: int = 16000
    order: int = 1
    rooms: int = 20
    rirs_per_room: int = 46
    t60_min: float = 0.2
    t60_max: float = 0.5
    train_mixtures: int = 20000
    valid_mixtures: int = 5000
    test_mixtures: int = 3000
    seconds: float = 5.0
    speakers: int = 20
    seed: int = 0


PRESETS = {
    "full": {},
    "toy": {
        "model.sample_rate": 8000,
        "model.n_filters": 64,
        "model.kernel_size": 16,
        "model.stride": 8,
        "model.chunk_size": 50,
        "model.repeats": 2,
        "model.layers": 1,
        "model.ff_dim": 128,
        "model.heads": 4,
        "train.lr": 1e-3,
        "train.epochs": 2,
        "train.batch_size": 2,
        "train.lr_decay_start_epoch": 1,
        "data.sample_rate": 8000,
        "data.rooms": 2,
        "data.rirs_per_room": 10,
        "data.t60_min": 0.2,
        "data.t60_max": 0.2,
        "data.train_mixtures": 8,
        "data.valid_mixtures": 2,
        "data.test_mixtures": 2,
        "data.seconds": 1.0,
        "data.speakers": 6,
    },
}

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            out.update(flatten(v, key))
        else:
            out[key] = v
    return out


def load_flat(source: str | Path | None) -> dict:
    """Flat dotted-key settings from a preset name or a TOML/JSON file."""
    if source is None:
        return {}
    if str(source) in PRESETS:
        return dict(PRESETS[str(source)])
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"config {source!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    text = path.read_text()
    tree = json.loads(text) if path.suffix == ".json" else tomli.loads(text)
    return flatten(tree)


def _coerce(cls, name, value):
    ftype = {f.name: f.type for f in dataclasses.fields(cls)}[name]
    if isinstance(value, str) and not ftype.startswith("str"):
        if "bool" in ftype:
            return value.lower() in ("1", "true", "yes", "on")
        if value.lower() == "none" and "None" in ftype:
            return None
        return float(value) if "float" in ftype else int(value)
    return value


def resolve(flat: dict, overrides: dict | None = None):
    """Build (ModelConfig, TrainConfig, DataConfig) from flat dotted keys."""
    merged = {**flat, **(overrides or {})}
    parts = {name: {} for name in _SECTIONS}
    for key, value in merged.items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise KeyError(f"unknown config key {key!r}")
        cls = _SECTIONS[section]
        if name not in {f.name for f in dataclasses.fields(cls)}:
            raise KeyError(f"unknown config key {key!r}")
        parts[section][name] = _coerce(cls, name, value)
    return tuple(_SECTIONS[s](**parts[s]) for s in ("model", "train", "data"))


def to_flat(*configs) -> dict:
    names = {ModelConfig: "model", TrainConfig: "train", DataConfig: "data"}
    out = {}
    for cfg in configs:
        out.update({f"{names[type(cfg)]}.{k}": v for k, v in dataclasses.asdict(cfg).items()})
    return out
