"""Flat dotted-key run configuration: file values, then flag overrides, then an echo file.

Grammar: a TOML document whose keys are dotted (``train.margin = 0.2``) and whose
values are scalars, except ``layout.edges`` which is a list of ``[i, j]`` pairs.
Nested tables (``[train]`` followed by ``margin = 0.2``) are flattened to the same keys.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import ProtocolSpec
from .nn import NetworkConfig
from .synth import SynthConfig
from .train import TrainConfig

EFFECTIVE_CONFIG_NAME = "effective_config.toml"

# CLI defaults are sized for the 16-identity synthetic run: 64 training
# sequences / 16 per batch = 4 steps per epoch, 75 epochs = 300 steps.
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data.dir": "data",
    "out.dir": "runs",
    "net.depth": "normal",
    "net.partition": "spatial",
    "net.temporal_kernel": 9,
    "net.layout": "coco18",
    "net.unit_norm": True,
    "net.dtype": "float32",
    "train.P": 4,
    "train.K": 4,
    "train.margin": 0.2,
    "train.learning_rate": 1e-3,
    "train.epochs": 75,
    "train.steps_per_epoch": 0,
    "train.crop_length": 32,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.checkpoint_every": 0,
    "protocol.num_train": 0,
    "synth.num_ids": 16,
    "synth.seqs_per_id": 8,
    "synth.min_frames": 50,
    "synth.max_frames": 80,
    "synth.noise": 1.0,
    "synth.clothing_jitter": 2.0,
    "synth.occlusion": 0.0,
    "synth.face_noise": 4.0,
    "synth.spread": 0.75,
    "synth.jitter": 0.03,
    "synth.tilt": 0.0,
    "synth.aspect": 0.0,
}
_OPTIONAL = {"layout.num_joints", "layout.edges", "layout.gravity_joint", "layout.name"}


class ConfigError(ValueError):
    pass


def flatten(doc: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    default = DEFAULTS.get(key)
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return bool(value)
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} expects {type(default).__name__}, got {value!r}") from None


class RunConfig:
    """Merged view of defaults, the config file and explicit overrides."""

    def __init__(self, values: Mapping[str, Any] | None = None, explicit: set[str] | None = None):
        self.values = dict(DEFAULTS)
        self.explicit: set[str] = set()
        if values:
            self.update(values)
        if explicit is not None:
            self.explicit |= explicit

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            p = Path(path)
            try:
                doc = tomllib.loads(p.read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {p}") from None
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{p}: {exc}") from None
            cfg.update(flatten(doc))
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None})
        return cfg

    def update(self, values: Mapping[str, Any]) -> None:
        for key, value in values.items():
            if key not in DEFAULTS and key not in _OPTIONAL:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, value)
            self.explicit.add(key)
        seed = self.values["seed"]
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict[str, Any]:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    def layout(self):
        lay = self.section("layout")
        if "num_joints" in lay:
            return lay
        return self["net.layout"]

    def network_config(self) -> NetworkConfig:
        n = self.section("net")
        return NetworkConfig(depth=n["depth"], partition=n["partition"],
                             temporal_kernel=n["temporal_kernel"], layout=self.layout(),
                             unit_norm=n["unit_norm"], dtype=n["dtype"])

    def train_config(self) -> TrainConfig:
        t = self.section("train")
        return TrainConfig(P=t["P"], K=t["K"], margin=t["margin"], learning_rate=t["learning_rate"],
                           epochs=t["epochs"], steps_per_epoch=t["steps_per_epoch"] or None,
                           crop_length=t["crop_length"], seed=self["seed"], beta1=t["beta1"],
                           beta2=t["beta2"], eps=t["eps"], checkpoint_every=t["checkpoint_every"])

    def synth_config(self) -> SynthConfig:
        return SynthConfig(seed=self["seed"], **self.section("synth"))

    def protocol_spec(self) -> ProtocolSpec:
        return ProtocolSpec(num_train=self["protocol.num_train"] or None)

    def to_toml(self) -> str:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, (int, float, list)):
                text = json.dumps(value)
            else:
                text = json.dumps(str(value))
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    def echo(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        path = d / EFFECTIVE_CONFIG_NAME
        path.write_text(self.to_toml())
        return path
