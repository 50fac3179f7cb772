"""Flat ``key = value`` experiment configuration.

Keys carry a section prefix: ``gen.`` (scene generator), ``train.``,
``refine.``, ``loss.`` (weight overrides on top of the mode preset),
``net.``, ``icp.`` and ``out.``. Blank lines and ``#`` comments are ignored.
Unknown or repeated keys are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .data import SceneGenConfig
from .errors import InvalidConfig
from .icp import IcpConfig
from .losses import LossWeights
from .networks import NetConfig, RefineConfig
from .trainer import TrainConfig

_TRAIN_KEYS = ("mode", "epochs", "lr", "decay", "decay_every", "batch_size", "seed", "checkpoint_every",
               "eval_every", "ego_motion", "augment", "augment_rotation_deg", "augment_translation")
_LOSS_KEYS = ("w_epe3d", "w_nr", "w_r", "w_rot", "w_fb", "w_nn")


@dataclass
class ExperimentConfig:
    gen: SceneGenConfig = field(default_factory=SceneGenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    loss: dict = field(default_factory=dict)
    net: NetConfig = field(default_factory=NetConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    out_dir: Optional[Path] = None

    def train_config(self) -> TrainConfig:
        """Training settings with the refinement depth and weight overrides folded in."""
        weights = LossWeights.preset(self.train.mode, **self.loss) if self.loss else None
        return replace(self.train, k_train=self.refine.k_train, weights=weights, net=self.net)


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(float(p) for p in parts)
    return text


def _defaults(cls):
    return {f.name: getattr(cls(), f.name) for f in fields(cls)}


def _schema():
    gen = _defaults(SceneGenConfig)
    gen["m"] = 0  # integer; "none" keeps the default
    train = _defaults(TrainConfig)
    schema = {}
    schema.update({"gen." + k: v for k, v in gen.items()})
    schema.update({"train." + k: train[k] for k in _TRAIN_KEYS})
    schema.update({"refine." + k: v for k, v in _defaults(RefineConfig).items()})
    schema.update({"loss." + k: 0.0 for k in _LOSS_KEYS})
    schema.update({"net." + k: v for k, v in _defaults(NetConfig).items()})
    schema.update({"icp." + k: v for k, v in _defaults(IcpConfig).items()})
    schema["out.dir"] = ""
    return schema


SCHEMA = _schema()


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse config text; relative paths resolve against ``base_dir`` (default: cwd)."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise InvalidConfig(f"line {lineno}: key {key!r} given twice")
        try:
            if key == "gen.m" and value.lower() == "none":
                raw[key] = None
            else:
                raw[key] = _convert(value, SCHEMA[key])
        except ValueError as exc:
            raise InvalidConfig(f"line {lineno}: bad value for {key}: {exc}") from None
    return build_config(raw, base_dir)


def build_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    sections = {"gen": {}, "train": {}, "refine": {}, "loss": {}, "net": {}, "icp": {}, "out": {}}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise InvalidConfig(f"unknown key {key!r}")
        sec, name = key.split(".", 1)
        sections[sec][name] = value
    try:
        gen = SceneGenConfig(**sections["gen"]).validate()
        refine = RefineConfig(**sections["refine"])
        net = NetConfig(**sections["net"])
        if net.activation not in ("relu", "tanh"):
            raise InvalidConfig(f"unknown activation {net.activation!r}")
        train = TrainConfig(**sections["train"])
        loss = dict(sections["loss"])
        LossWeights.preset(train.mode, **loss)
        icp = IcpConfig(**sections["icp"])
        replace(train, k_train=refine.k_train).validate()
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc)) from None
    out_dir = None
    if sections["out"].get("dir"):
        out_dir = Path(sections["out"]["dir"])
        if not out_dir.is_absolute():
            out_dir = (base_dir or Path.cwd()) / out_dir
        out_dir = out_dir.resolve()
    return ExperimentConfig(gen, train, refine, loss, net, icp, out_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=path.resolve().parent)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def resolved_items(cfg: ExperimentConfig) -> list:
    """Every known key with its effective value, loss weights expanded from the preset."""
    items = [("gen." + f.name, getattr(cfg.gen, f.name)) for f in fields(SceneGenConfig)]
    items += [("train." + k, getattr(cfg.train, k)) for k in _TRAIN_KEYS]
    items += [("refine." + f.name, getattr(cfg.refine, f.name)) for f in fields(RefineConfig)]
    weights = LossWeights.preset(cfg.train.mode, **cfg.loss)
    items += [("loss." + k, getattr(weights, k)) for k in _LOSS_KEYS]
    items += [("net." + f.name, getattr(cfg.net, f.name)) for f in fields(NetConfig)]
    items += [("icp." + f.name, getattr(cfg.icp, f.name)) for f in fields(IcpConfig)]
    items.append(("out.dir", str(cfg.out_dir) if cfg.out_dir else ""))
    return items


def resolved_text(cfg: ExperimentConfig, extra: dict | None = None) -> str:
    lines = [f"{k} = {_fmt(v)}" for k, v in resolved_items(cfg)]
    for k, v in (extra or {}).items():
        lines.append(f"# {k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"
