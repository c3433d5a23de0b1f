"""Run configuration: one JSON document, strictly validated.

Unknown keys are rejected outright (typos must not silently revert to
defaults), every leaf is type- and range-checked, and CLI overrides map
onto dotted key paths one-for-one.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from ..errors import ConfigError
from ..segmenter import Model

DEFAULTS = {
    "data": {"num_slices": 30, "image_size": 64, "num_classes": 6, "seed": 11},
    "encoder": {"feature_dim": 32, "seed": 0},
    "ran": {"enabled": True},
    "fspa": {"enabled": True, "num_clusters": 5, "kmeans_max_iters": 50, "seed": 1},
    "bcma": {
        "enabled": True,
        "beta": 0.2,
        "w_band": [0.3, 0.6, 0.3],
        "pool_window": [4, 4],
        "bg_threshold": 0.5,
        "freeze_a": False,
        "no_adjust": False,
        "random_init": False,
        "seed": 2,
    },
    "seg": {"temperature": 20.0, "bg_aggregate": "max"},
    "episodes": {"setting": 2, "fold": 0, "folds": 5, "seed": 3, "source": "labels"},
    "train": {
        "steps": 2000,
        "lr": 0.01,
        "checkpoint_every": 500,
        "seed": 4,
        "out_dir": "runs/default",
    },
    "eval": {"all_folds": False},
}

_RANGE_CHECKS = {
    "data.num_slices": lambda v: v >= 2,
    "data.image_size": lambda v: v >= 32 and v % 4 == 0,
    "data.num_classes": lambda v: v >= 2,
    "encoder.feature_dim": lambda v: v >= 2,
    "fspa.num_clusters": lambda v: v >= 1,
    "fspa.kmeans_max_iters": lambda v: v >= 1,
    "bcma.beta": lambda v: v >= 0,
    "bcma.bg_threshold": lambda v: 0 < v <= 1,
    "seg.temperature": lambda v: v >= 0,
    "seg.bg_aggregate": lambda v: v in ("max", "mean"),
    "episodes.setting": lambda v: v in (1, 2),
    "episodes.folds": lambda v: v >= 2,
    "episodes.fold": lambda v: v >= 0,
    "episodes.source": lambda v: v in ("labels", "pseudo"),
    "train.steps": lambda v: v >= 1,
    "train.lr": lambda v: v > 0,
    "train.checkpoint_every": lambda v: v >= 1,
}


def _check_leaf(path: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(
                f"{path}: expected a list of {len(default)} numbers, got {value!r}"
            )
        value = [_check_leaf(f"{path}[{i}]", v, default[i]) for i, v in enumerate(value)]
    check = _RANGE_CHECKS.get(path)
    if check is not None and not check(value):
        raise ConfigError(f"{path}: value {value!r} out of range")
    return value


def _merge(result: dict, user: dict, prefix: str = ""):
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in result:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(result[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a section, got {value!r}")
            _merge(result[key], value, f"{path}.")
        else:
            result[key] = _check_leaf(path, value, DEFAULTS_FLAT[path])


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{path}."))
        else:
            flat[path] = value
    return flat


DEFAULTS_FLAT = _flatten(DEFAULTS)


class RunConfig:
    """Validated configuration with dotted-path access."""

    def __init__(self, tree: dict):
        self._tree = tree

    def __getitem__(self, dotted: str):
        node = self._tree
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                raise KeyError(dotted)
            node = node[part]
        return node

    def to_dict(self) -> dict:
        return copy.deepcopy(self._tree)

    def canonical(self) -> str:
        return json.dumps(self._tree, sort_keys=True, indent=2)

    def build_model(self) -> Model:
        return Model(
            feature_dim=self["encoder.feature_dim"],
            encoder_seed=self["encoder.seed"],
            num_clusters=self["fspa.num_clusters"],
            kmeans_max_iters=self["fspa.kmeans_max_iters"],
            cluster_seed=self["fspa.seed"],
            band=tuple(self["bcma.w_band"]),
            beta=self["bcma.beta"],
            pool_window=tuple(self["bcma.pool_window"]),
            bg_threshold=self["bcma.bg_threshold"],
            temperature=self["seg.temperature"],
            bg_aggregate=self["seg.bg_aggregate"],
            use_ran=self["ran.enabled"],
            use_fspa=self["fspa.enabled"],
            use_bcma=self["bcma.enabled"],
            freeze_bank=self["bcma.freeze_a"],
            no_adjust=self["bcma.no_adjust"],
            random_bank=self["bcma.random_init"],
            bank_seed=self["bcma.seed"],
        )


def make_config(user: dict | None = None, overrides=()) -> RunConfig:
    """Defaults, then a user document, then dotted CLI overrides."""
    tree = copy.deepcopy(DEFAULTS)
    if user:
        if not isinstance(user, dict):
            raise ConfigError(f"config root must be an object, got {type(user).__name__}")
        _merge(tree, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = {}
        leaf = node
        parts = dotted.split(".")
        for part in parts[:-1]:
            leaf[part] = {}
            leaf = leaf[part]
        leaf[parts[-1]] = value
        _merge(tree, node)
    cfg = RunConfig(tree)
    if cfg["episodes.fold"] >= cfg["episodes.folds"]:
        raise ConfigError(
            f"episodes.fold {cfg['episodes.fold']} out of range for "
            f"{cfg['episodes.folds']} folds"
        )
    if cfg["episodes.folds"] > cfg["data.num_slices"]:
        raise ConfigError(
            f"{cfg['episodes.folds']} folds need at least that many slices, "
            f"got {cfg['data.num_slices']}"
        )
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    user = None
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return make_config(user, overrides)
