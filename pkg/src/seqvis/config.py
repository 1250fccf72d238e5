"""Experiment configuration: defaults, JSON-schema validation, ``key=value``
overrides and conversion into the typed per-module configs."""

import copy
import json
from dataclasses import asdict, fields

import jsonschema

from .envsim import EnvConfig, env_config_from_json, env_config_to_json
from .exceptions import ConfigError
from .policy import PolicyConfig, config_hash
from .schemas import load_schema
from .training import TrainConfig

REGION_DEFAULTS = {"n_regions": 5, "token_budget": 48, "min_area_frac": 0.01, "bins": 256,
                   "similarity": "cosine"}


def default_config(seed=None):
    """Desk-scale defaults. ``seed`` stays ``None`` until the caller sets it."""
    return {
        "seed": seed,
        "reasoner_seed": 0,
        "data": {"n_train": 5000, "n_eval": 500, "eval_difficulty": None},
        "env": env_config_to_json(EnvConfig()),
        "regions": dict(REGION_DEFAULTS),
        "policy": {**asdict(PolicyConfig()), "temperature": 0.1},
        "train": asdict(TrainConfig()),
        "io": {"out_dir": "run", "train_tasks": None, "eval_tasks": None},
    }


def _parse_value(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_override(cfg, assignment):
    """Set a dotted key in place, e.g. ``train.beta=1.0``.

    The value is parsed as JSON when possible (numbers, booleans, null,
    lists) and kept as a string otherwise. Unknown keys are rejected.
    """
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, _, raw = assignment.partition("=")
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(raw)
    return cfg


def _merge(base, update, path=""):
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, path + k + ".")
        else:
            base[k] = v
    return base


def validate_config(cfg):
    try:
        jsonschema.validate(cfg, load_schema("config"))
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    try:
        to_env_config(cfg)
        to_train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return cfg


def load_config(path=None, overrides=(), seed=None):
    """Defaults, then the JSON file at ``path``, then ``overrides``, then ``seed``.

    The result is schema-validated; a missing seed is a ConfigError.
    """
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"could not read config {path}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        _merge(cfg, user)
    for assignment in overrides:
        apply_override(cfg, assignment)
    if seed is not None:
        cfg["seed"] = seed
    if cfg["seed"] is None:
        raise ConfigError("a seed is required (set \"seed\" in the config or pass --seed)")
    return validate_config(cfg)


def to_env_config(cfg):
    return env_config_from_json(cfg["env"])


def to_train_config(cfg):
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg["train"].items() if k in names})


def to_policy_config(cfg):
    return PolicyConfig(**cfg["policy"])


def region_kwargs(cfg):
    return dict(cfg["regions"])


def experiment_hash(cfg):
    """Hash of everything that affects results (IO paths excluded)."""
    c = copy.deepcopy(cfg)
    c.pop("io", None)
    return config_hash(c)
