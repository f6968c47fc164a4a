"""Experiment configuration: one YAML tree drives data, model, training and evaluation."""
from __future__ import annotations

import copy
import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .adversary import DiscConfig
from .segnet import SegNetConfig
from .synthdata import SOURCE, TARGET, DatasetConfig, generate_dataset, load_dataset, read_manifest
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "BEAL_OUTPUT_ROOT"

# Presets that differ from the plain dataclass defaults. Config files and
# overrides are merged on top of this tree, so setting one key of a section
# keeps the preset values of its siblings.
DEFAULT_TREE = {
    "data": {"synth": {"n_source": 32, "n_target": 32, "n_target_test": 16}},
    "boundary_disc": {"in_channels": 1, "base_channels": 16},
    "entropy_disc": {"in_channels": 2, "base_channels": 16},
    "train": {"batch_size": 4, "epochs": 38},
}


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class DataConfig:
    path: str | None = None  # existing dataset directory; otherwise `synth` is generated
    synth: DatasetConfig = field(default_factory=lambda: DatasetConfig(**DEFAULT_TREE["data"]["synth"]))


@dataclass
class EvalOptions:
    threshold: float = 0.5
    emit_visuals: bool = False
    max_visuals: int = 4


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    boundary_disc: DiscConfig = field(default_factory=lambda: DiscConfig(**DEFAULT_TREE["boundary_disc"]))
    entropy_disc: DiscConfig = field(default_factory=lambda: DiscConfig(**DEFAULT_TREE["entropy_disc"]))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DEFAULT_TREE["train"]))
    eval: EvalOptions = field(default_factory=EvalOptions)
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.segnet.crop_size != self.train.crop_size:
            raise ConfigError(
                f"segnet.crop_size ({self.segnet.crop_size}) != train.crop_size ({self.train.crop_size})"
            )
        if self.boundary_disc.in_channels != 1 or self.entropy_disc.in_channels != 2:
            raise ConfigError("boundary_disc needs in_channels 1 and entropy_disc in_channels 2")
        if not 0 < self.eval.threshold < 1:
            raise ConfigError("eval.threshold must lie in (0, 1)")
        if self.data.path is None:
            self.data.synth.validate()

    def output_path(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return p if p.is_absolute() or not root else Path(root) / p

    def variant(self, overrides: dict) -> tuple[SegNetConfig, TrainConfig]:
        seg_keys = {f.name for f in dataclasses.fields(SegNetConfig)}
        seg_over = {k: v for k, v in overrides.items() if k in seg_keys}
        train_over = {k: v for k, v in overrides.items() if k not in seg_keys}
        return replace(self.segnet, **seg_over), replace(self.train, **train_over)

    def to_dict(self) -> dict:
        return to_dict(self)


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def from_dict(cls, data, where: str = ""):
    """Build dataclass `cls` from nested mappings, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown key(s) {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        tp = _strip_optional(hints[name])
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(tp) and isinstance(value, dict):
            kwargs[name] = from_dict(tp, value, path)
        elif typing.get_origin(tp) is tuple and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def to_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def set_key(tree: dict, dotted: str, value) -> None:
    """Set ``a.b.c`` in a nested dict, creating intermediate levels."""
    node = tree
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {p} is not a mapping")
    node[leaf] = value


def merge_tree(base: dict, update: dict) -> dict:
    """Recursive dict merge; values in `update` win."""
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_tree(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Preset tree, then the YAML file, then dotted-key overrides."""
    tree = copy.deepcopy(DEFAULT_TREE)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        tree = merge_tree(tree, loaded)
    for key, value in (overrides or {}).items():
        set_key(tree, key, value)
    return from_dict(ExperimentConfig, tree)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


def ensure_dataset(config: ExperimentConfig, out_dir: str | Path) -> Path:
    """Dataset directory for `config`, generating the synthetic one on first use."""
    if config.data.path is not None:
        return Path(config.data.path)
    path = Path(out_dir) / "data"
    stamp = path / "dataset_config.json"
    wanted = json.dumps(to_dict(config.data.synth), sort_keys=True)
    if stamp.is_file() and stamp.read_text() == wanted and (path / "manifest.jsonl").is_file():
        return path
    generate_dataset(config.data.synth, path, force=True)
    stamp.write_text(wanted)
    return path


def load_experiment_data(config: ExperimentConfig, out_dir: str | Path):
    """(source train, target train, target evaluation) sample lists.

    The target evaluation split is the ``test`` split when present, else the
    target training split (transductive evaluation).
    """
    path = ensure_dataset(config, out_dir)
    splits = {r.get("split", "train") for r in read_manifest(path) if r["domain"] == TARGET}
    source = load_dataset(path, SOURCE, "train")
    target = load_dataset(path, TARGET, "train")
    test = load_dataset(path, TARGET, "test") if "test" in splits else target
    return source, target, test

