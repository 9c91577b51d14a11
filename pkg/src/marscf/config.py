"""Flat ``key = value`` run configuration shared by config files and CLI flags.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Every key in :data:`SCHEMA` may appear at most once and unknown keys are
rejected. Empty values mean "unset" for the path-like keys.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .interpolate import InterpConfig
from .model import ConfigError, FlowConfig
from .train import TrainConfig

# key: (type, default, help)
SCHEMA: dict[str, tuple[type, object, str]] = {
    # model
    "channels": (int, 1, "image channels C"),
    "size": (int, 8, "image side N"),
    "levels": (int, 2, "number of levels n"),
    "couplings": (int, 2, "flow steps per level"),
    "coupling": (str, "affine", "coupling kind: affine | mixlogcdf"),
    "width": (int, 32, "parameter-network width"),
    "components": (int, 4, "logistic mixture components (mixlogcdf)"),
    "prior_hidden": (int, 32, "Conv-LSTM filters"),
    "prior_layers": (int, 3, "Conv-LSTM layers"),
    "model_seed": (int, 0, "seed for parameter initialization"),
    # data
    "data_format": (str, "synthetic", "idx | pnm | raw | synthetic"),
    "data_path": (str, "", "dataset file or directory"),
    "val_fraction": (float, 0.2, "fraction of records held out for validation"),
    "bits": (int, 8, "bit depth of the pixels"),
    "synthetic_count": (int, 2560, "images generated for the synthetic dataset"),
    "data_seed": (int, 0, "seed of the synthetic generator"),
    # training / evaluation
    "epochs": (int, 50, "training epochs"),
    "batch_size": (int, 64, "training batch size"),
    "lr": (float, 8e-4, "Adamax learning rate"),
    "seed": (int, 0, "seed for shuffling, dequantization and sampling"),
    "clip_norm": (float, 50.0, "global gradient-norm clip"),
    "checkpoint_every": (int, 0, "save a checkpoint every k epochs (0: final only)"),
    "init_batch_size": (int, 512, "ActNorm initialization batch size"),
    "eval_seed": (int, 1234, "dequantization seed for evaluation"),
    "eval_batch_size": (int, 256, "evaluation batch size"),
    # sampling / interpolation
    "checkpoint": (str, "", "checkpoint to load"),
    "grid": (int, 4, "sample grid side"),
    "temperature": (float, 1.0, "sampling temperature"),
    "steps": (int, 5, "interpolation waypoints k"),
    "lambda1": (float, 0.35, "prior-density weight"),
    "lambda2": (float, 0.35, "image-proximity weight"),
    "interp_lr": (float, 5e-2, "interpolation Adamax learning rate"),
    "iterations": (int, 100, "interpolation optimizer iterations"),
    "pairs": (int, 4, "image pairs to interpolate"),
    "output_dir": (str, "", "directory for all outputs"),
}

OUTPUT_ENV = "MARSCF_OUTPUT_DIR"


def _convert(key: str, raw, source: str):
    kind = SCHEMA[key][0]
    if isinstance(raw, kind) and not isinstance(raw, bool):
        return raw
    text = str(raw).strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{source}: {key} expects {kind.__name__}, got {text!r}") from exc
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, value, f"{source}:{lineno}")
    return values


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    return parse_config_text(path.read_text(), str(path))


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})

    @classmethod
    def build(cls, file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
        """Defaults, then the config file, then explicit overrides."""
        cfg = cls()
        for layer, source in ((file_values or {}, "config"), (overrides or {}, "flag")):
            for key, value in layer.items():
                if key not in SCHEMA:
                    raise ConfigError(f"unknown {source} key {key!r}")
                if value is not None:
                    cfg.values[key] = _convert(key, value, source)
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def flow(self) -> FlowConfig:
        v = self.values
        return FlowConfig(channels=v["channels"], size=v["size"], levels=v["levels"],
                          couplings=v["couplings"], coupling=v["coupling"], width=v["width"],
                          components=v["components"], prior_hidden=v["prior_hidden"],
                          prior_layers=v["prior_layers"]).validate()

    def dataset(self) -> DatasetSpec:
        v = self.values
        if not 0 <= v["val_fraction"] < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        return DatasetSpec(path=v["data_path"], format=v["data_format"],
                           shape=(v["channels"], v["size"], v["size"]), val_fraction=v["val_fraction"],
                           bits=v["bits"], synthetic_count=v["synthetic_count"], seed=v["data_seed"])

    def training(self) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(epochs=v["epochs"], batch_size=v["batch_size"], lr=v["lr"], seed=v["seed"],
                               clip_norm=v["clip_norm"], checkpoint_every=v["checkpoint_every"],
                               init_batch_size=v["init_batch_size"], eval_seed=v["eval_seed"],
                               eval_batch_size=v["eval_batch_size"]).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def interpolation(self) -> InterpConfig:
        v = self.values
        try:
            return InterpConfig(steps=v["steps"], lambda1=v["lambda1"], lambda2=v["lambda2"],
                                lr=v["interp_lr"], iterations=v["iterations"], seed=v["seed"]).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def output_dir(self) -> Path:
        return Path(self.values["output_dir"] or os.environ.get(OUTPUT_ENV) or "runs")

    def to_text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in SCHEMA)
