"""JSON run configuration shared by every CLI verb."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .anonymizer import ModelConfig, TrainConfig
from .datagen import SyntheticConfig
from .evaluation import ProbeConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    frames: int = 16
    channels: int = 3
    height: int = 32
    width: int = 32
    num_actions: int = 4
    num_attrs: int = 3
    privacy_box: list = field(default_factory=lambda: [0, 8, 0, 8])
    blob: int = 8
    travel: float = 28.0
    noise: float = 0.05
    n_train: int = 512
    n_test: int = 256


@dataclass
class ModelSection:
    dt: int = 2
    dh: int = 8
    dw: int = 8
    dim: int = 64
    heads: int = 4
    depth: int = 6
    drop: float = 0.2
    attn_drop: float = 0.1


@dataclass
class PruneSection:
    layers: list = field(default_factory=lambda: [2, 4])
    keep_rate: float = 0.9
    fusion: bool = True
    lambda_priv: float = 0.5
    renormalize_alpha: bool = True


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    lambda_grl: float = 1.0


@dataclass
class EvalSection:
    epochs_act: int = 30
    epochs_priv: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    patch: int = 4
    pool: int = 2
    conv1: int = 16
    conv2: int = 32
    hidden: int = 64
    keep_rates: list = field(default_factory=lambda: [1.0, 0.9, 0.8, 0.7])
    fill: float = 0.0


@dataclass
class IOSection:
    data_dir: str = "run/data"
    checkpoint: str = "run/anonymizer.tshd"
    loss_log: str = "run/train_log.jsonl"
    anon_dir: str = "run/anon"
    metrics: str = "run/metrics.json"
    sweep_csv: str = "run/sweep.csv"
    frames_dir: str = "run/frames"


SECTIONS = {"data": DataSection, "model": ModelSection, "prune": PruneSection,
            "train": TrainSection, "eval": EvalSection, "io": IOSection}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    prune: PruneSection = field(default_factory=PruneSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    io: IOSection = field(default_factory=IOSection)
    seed: int = 42

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section in SECTIONS.items():
            body = doc.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(section)}
            bad = set(body) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            kwargs[name] = section(**body)
        if "seed" in doc:
            if not isinstance(doc["seed"], int):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = doc["seed"]
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides: list[str] | None = None) -> "RunConfig":
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(apply_overrides(doc, overrides or []))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        try:
            self.synthetic().check_alignment(self.model_config().tubelet)
            self.train_config()
            self.probe_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def synthetic(self) -> SyntheticConfig:
        d = asdict(self.data)
        d["privacy_box"] = tuple(d["privacy_box"])
        return SyntheticConfig(**d, seed=self.seed)

    def model_config(self, keep_rate: float | None = None) -> ModelConfig:
        d, m, p = self.data, self.model, self.prune
        return ModelConfig(frames=d.frames, channels=d.channels, height=d.height, width=d.width,
                           dt=m.dt, dh=m.dh, dw=m.dw, dim=m.dim, heads=m.heads, depth=m.depth,
                           num_actions=d.num_actions, num_attrs=d.num_attrs,
                           prune_layers=tuple(p.layers),
                           keep_rate=p.keep_rate if keep_rate is None else keep_rate,
                           fusion=p.fusion, lambda_priv=p.lambda_priv, renormalize_alpha=p.renormalize_alpha,
                           drop=m.drop, attn_drop=m.attn_drop)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, lambda_grl=t.lambda_grl,
                           seed=self.seed)

    def probe_config(self) -> ProbeConfig:
        e = self.eval
        return ProbeConfig(patch=e.patch, pool=e.pool, conv1=e.conv1, conv2=e.conv2, hidden=e.hidden,
                           epochs_act=e.epochs_act, epochs_priv=e.epochs_priv, batch_size=e.batch_size,
                           lr=e.lr, seed=self.seed)

    def provenance(self) -> dict:
        return {"config": self.to_dict(), "version": __version__}


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings (value parsed as JSON when possible)."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        path, value = item.split("=", 1)
        keys = path.split(".")
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-object")
        node[keys[-1]] = _coerce(value)
    return doc
