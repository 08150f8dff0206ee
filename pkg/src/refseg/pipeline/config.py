"""Run configuration: dimensions, loss weights, optimizer settings, data
generation knobs. Serialised as INI-style sections; unknown keys are rejected."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from ..losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class DimsConfig:
    c1: int = 96  # stride-4 channels; stride-8/16 follow at 2x/4x
    c3: int = 384
    c_text: int = 768
    c: int = 256  # shared alignment width
    c0: int = 8  # kernel width
    k: int = 50  # candidate objects
    alpha: int = 4  # per-candidate channels, first decoder stage
    alpha2: int = 2  # per-candidate channels, second decoder stage
    heads: int = 8
    t: int = 8  # frames per clip
    h: int = 320
    w: int = 576
    s_max: int = 32  # max query tokens

    @property
    def c2(self) -> int:
        return 2 * self.c1


@dataclass
class OptimConfig:
    lr: float = 1e-4
    encoder_lr: float = 5e-5
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    epochs: int = 70
    drop_epoch: int = 50  # learning rate divided by drop_factor afterwards
    drop_factor: float = 2.5
    batch_size: int = 2
    dropout: float = 0.1


@dataclass
class DataConfig:
    clips: int = 64
    val_clips: int = 16
    min_objects: int = 2
    max_objects: int = 4
    min_radius: float = 7.0
    max_radius: float = 12.0
    min_speed: float = 3.0
    max_speed: float = 6.0


@dataclass
class Config:
    dims: DimsConfig = field(default_factory=DimsConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def validate(self) -> "Config":
        d = self.dims
        if d.h % 16 or d.w % 16:
            raise ConfigError(f"frame size {d.h}x{d.w} must be divisible by 16")
        if d.c % d.heads:
            raise ConfigError(f"width {d.c} not divisible by {d.heads} heads")
        if d.c % 4:
            raise ConfigError(f"width {d.c} must be divisible by 4 for positional codes")
        return self


def paper_preset() -> Config:
    return Config().validate()


def desk_preset() -> Config:
    return Config(
        dims=DimsConfig(c1=24, c3=96, c_text=96, c=64, c0=8, k=6, alpha=4, alpha2=2,
                        heads=8, t=2, h=64, w=64, s_max=16),
        optim=OptimConfig(lr=1e-4, encoder_lr=5e-5, weight_decay=1e-4, clip_norm=0.1,
                          epochs=300, drop_epoch=240, drop_factor=2.5, batch_size=2,
                          dropout=0.1),
        data=DataConfig(),
        seed=0,
    ).validate()


PRESETS = {"paper": paper_preset, "desk": desk_preset}

_SECTIONS = {
    "dims": DimsConfig,
    "loss": LossWeights,
    "optimizer": OptimConfig,
    "data": DataConfig,
}
_SECTION_ATTR = {"dims": "dims", "loss": "loss", "optimizer": "optim", "data": "data"}


def config_to_text(cfg: Config) -> str:
    parser = configparser.ConfigParser()
    for section, attr in _SECTION_ATTR.items():
        obj = getattr(cfg, attr)
        parser[section] = {f.name: repr(getattr(obj, f.name)) for f in fields(obj)}
    parser["run"] = {"seed": repr(cfg.seed)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_from_text(text: str) -> Config:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = Config()
    for section in parser.sections():
        if section == "run":
            for key, val in parser["run"].items():
                if key != "seed":
                    raise ConfigError(f"unknown key [run] {key}")
                cfg = replace(cfg, seed=int(val))
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = _SECTIONS[section]
        known = {f.name: f.type for f in fields(cls)}
        obj = getattr(cfg, _SECTION_ATTR[section])
        for key, val in parser[section].items():
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            current = getattr(obj, key)
            cast = int if isinstance(current, int) else float
            try:
                setattr(obj, key, cast(val))
            except ValueError as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {val!r}") from exc
    return cfg.validate()


def load_config(path) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


def save_config(cfg: Config, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))
