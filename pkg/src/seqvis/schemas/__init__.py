"""JSON schemas for every file the package emits or consumes."""

import json
from functools import lru_cache
from importlib import resources

import jsonschema

NAMES = ("config", "task", "manifest", "bank", "checkpoint", "train_report", "eval_report", "legend", "train_log")


@lru_cache(maxsize=None)
def load_schema(name):
    if name not in NAMES:
        raise KeyError(f"no schema named {name!r}")
    text = resources.files(__name__).joinpath(f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate(obj, name):
    """Raise ``jsonschema.ValidationError`` unless ``obj`` matches schema ``name``."""
    jsonschema.validate(obj, load_schema(name))
    return obj
