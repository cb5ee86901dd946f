"""Run configuration: one YAML file plus ``section.key=value`` overrides.

Every section maps onto one of the package's parameter dataclasses and
starts from that dataclass's defaults, so an empty file is a valid config.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Optional

import yaml

from .edges import EdgeParams
from .errors import ConfigError
from .geometry import CameraRig, CddConfig
from .ipcm import RemapConfig
from .pipeline import Pipeline
from .synthscene import PRESETS, Photometry
from .template import FitConfig
from .tracker import TrackerConfig

_SECTIONS = {
    "rig": CameraRig,
    "edges": EdgeParams,
    "fit": FitConfig,
    "tracker": TrackerConfig,
}
# keys of the remaining sections with their defaults
_PLAIN = {
    "cdd": {"D_min": None, "D_max": 500.0, "W_max": 130.0},
    "remap": {"interpolation": "bilinear"},
    "pipeline": {"max_residual": 3.0},
    "appearance": {"model": None},
    "photometry": {name: {} for name in PRESETS},
    "run": {"seed": 0},
}


def default_tree() -> Dict[str, Dict[str, Any]]:
    tree = {}
    for name, cls in _SECTIONS.items():
        tree[name] = {f.name: _plain(getattr(cls(), f.name)) for f in dataclasses.fields(cls)}
    tree.update(copy.deepcopy(_PLAIN))
    return tree


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _build(cls, values: dict):
    kw = {}
    for f in dataclasses.fields(cls):
        v = values[f.name]
        kw[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def _merge(tree: dict, updates: dict, where: str = "") -> None:
    if not isinstance(updates, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    for key, val in updates.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in tree:
            raise ConfigError(f"unknown config key {path!r}")
        if where == "photometry":
            if not isinstance(val, dict):
                raise ConfigError(f"{path} must be a mapping of photometry fields")
            known = {f.name for f in dataclasses.fields(Photometry)}
            bad = sorted(set(val) - known)
            if bad:
                raise ConfigError(f"unknown photometry field {bad[0]!r} in {path}")
            tree[key].update(val)
        elif isinstance(tree[key], dict) and where == "":
            _merge(tree[key], val, path)
        else:
            tree[key] = val


def parse_override(text: str):
    """``section.key=value`` into (["section", "key"], value); the value is read as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if len(parts) < 2:
        raise ConfigError(f"override key {key!r} needs a section, e.g. tracker.window")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    return parts, value


@dataclass(frozen=True)
class Config:
    tree: Dict[str, Dict[str, Any]] = field(repr=False)
    rig: CameraRig
    cdd: CddConfig
    remap: RemapConfig
    edges: EdgeParams
    fit: FitConfig
    tracker: TrackerConfig
    max_residual: float
    model_path: Optional[str]
    seed: int

    def pipeline(self) -> Pipeline:
        return Pipeline(self.rig, self.cdd, self.remap, self.edges, self.fit, self.tracker, self.max_residual)

    def photometry(self, preset: str) -> Photometry:
        if preset not in PRESETS:
            raise ConfigError(f"unknown photometry preset {preset!r}")
        try:
            return Photometry.preset(preset, **self.tree["photometry"][preset])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid photometry for {preset}: {exc}") from exc

    def dump(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True)


def from_tree(tree: dict) -> Config:
    built = {name: _build(cls, tree[name]) for name, cls in _SECTIONS.items()}
    rig = built["rig"]
    c = tree["cdd"]
    try:
        if c["D_min"] is None:
            cdd = CddConfig.from_rig(rig, float(c["D_max"]), float(c["W_max"]))
        else:
            cdd = CddConfig(float(c["D_min"]), float(c["D_max"]), float(c["W_max"]))
        remap = RemapConfig.from_rig(rig, cdd.D_max, tree["remap"]["interpolation"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid detection domain or remap: {exc}") from exc
    try:
        max_residual = float(tree["pipeline"]["max_residual"])
        seed = int(tree["run"]["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    model = tree["appearance"]["model"]
    return Config(tree, rig, cdd, remap, built["edges"], built["fit"], built["tracker"], max_residual, model, seed)


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> Config:
    """Defaults, then the file at ``path`` (if any), then the overrides in order."""
    tree = default_tree()
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        if data is not None:
            _merge(tree, data)
    for text in overrides:
        parts, value = parse_override(text)
        update: Any = value
        for p in reversed(parts):
            update = {p: update}
        _merge(tree, update)
    return from_tree(tree)
