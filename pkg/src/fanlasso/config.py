"""Run configuration: defaults, presets, YAML files and ``--set`` overrides.

Resolution order (later wins): dataclass defaults, preset, config file,
``--seed``, then ``--set key.path=value`` flags in command-line order. The
resolved tree is echoed as JSON and re-parses to an equal config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, is_dataclass
from pathlib import Path

import yaml

from .pipeline import PipelineConfig
from .simulate import CovariateShiftConfig, PosteriorShiftConfig

SIDECAR_FORMAT = "fanlasso-run"


class ConfigError(ValueError):
    """Bad key, bad type or violated constraint; ``path`` names the field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


CONFIG_CLASSES = {
    "sim-covariate": CovariateShiftConfig,
    "sim-posterior": PosteriorShiftConfig,
    "train-source": PipelineConfig,
    "finetune": PipelineConfig,
}

_PIPELINE_DESK = {
    "depth_grid": [2, 3],
    "width_grid": [32, 64],
    "arch": {"n_sel": 10},
    "train": {"max_epochs": 60},
}

PRESETS: dict[str, dict[str, dict]] = {
    "sim-covariate": {
        "paper": {},
        "desk": {"p": 300, "n_p_grid": [100, 200, 300], "replications": 20},
    },
    "sim-posterior": {
        "paper": {},
        "desk": {
            "p": 500, "n_p_train": 2000, "n_q_grid": [50, 200, 1000], "replications": 5,
            "arch": {"depth": 3, "width": 50, "n_sel": 20},
        },
    },
    "train-source": {"paper": {}, "desk": _PIPELINE_DESK},
    "finetune": {"paper": {}, "desk": _PIPELINE_DESK},
}

# where --seed lands for each subcommand
SEED_FIELDS = {
    "sim-covariate": ("master_seed",),
    "sim-posterior": ("master_seed",),
    "train-source": ("train.seed",),
    "finetune": ("train.seed",),
}


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _is_optional(tp) -> tuple[bool, object]:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1 and len(typing.get_args(tp)) == 2:
            return True, args[0]
    return False, tp


def _scalar(tp, value, path):
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(path, f"expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if tp is float:
        if isinstance(value, bool):
            raise ConfigError(path, f"expected a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(path, f"expected a number, got {value!r}")
    if tp is str:
        if isinstance(value, str):
            return value
        raise ConfigError(path, f"expected a string, got {value!r}")
    raise ConfigError(path, f"unsupported field type {tp!r}")


def coerce(tp, value, path: str):
    """Convert ``value`` to the annotated type ``tp`` or raise ConfigError."""
    optional, inner = _is_optional(tp)
    if value is None or (optional and isinstance(value, str) and value.lower() in ("none", "null")):
        if optional:
            return None
        raise ConfigError(path, "value may not be null")
    tp = inner
    if is_dataclass(tp):
        return build(tp, value, path)
    if typing.get_origin(tp) is tuple:
        args = typing.get_args(tp)
        if isinstance(value, (str, int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} entries, got {len(value)}")
        return tuple(coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    return _scalar(tp, value, path)


def build(cls, tree, path: str = ""):
    """Instantiate dataclass ``cls`` from a (partial) nested mapping."""
    if is_dataclass(tree) and isinstance(tree, cls):
        return tree
    if not isinstance(tree, dict):
        raise ConfigError(path, f"expected a mapping, got {tree!r}")
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in tree.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(sub, "unknown key")
        kwargs[key] = coerce(hints[key], value, sub)
    try:
        obj = cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from exc
    return obj


def to_tree(cfg) -> dict:
    """Plain JSON-ready nested dict (tuples become lists)."""
    return json.loads(json.dumps(asdict(cfg)))


def merge(base: dict, patch: dict) -> dict:
    out = dict(base)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            raise ConfigError(dotted, f"{part!r} is not a section")
        node = child
    if parts[-1] not in node:
        raise ConfigError(dotted, "unknown key")
    node[parts[-1]] = value


def parse_set(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(item, "override must look like key.path=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(item, "empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    return key, value


def load_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"{path} is not valid YAML: {exc}") from exc
    if tree is None:
        return {}
    if not isinstance(tree, dict):
        raise ConfigError("--config", f"{path} must contain a mapping at the top level")
    return tree


def _check(cfg, path=""):
    validate = getattr(cfg, "validate", None)
    if validate is None:
        return
    try:
        validate()
    except ValueError as exc:
        raise ConfigError(path or type(cfg).__name__, str(exc)) from exc


def digest(tree: dict) -> str:
    return hashlib.sha256(json.dumps(tree, sort_keys=True).encode()).hexdigest()


def resolve(subcommand: str, *, preset: str | None = None, file_tree: dict | None = None,
            seed: int | None = None, sets: list[str] = ()):
    """Resolve a config; returns ``(config, record)``.

    ``record`` lists every override applied in order, and which keys were
    overridden more than once (last one wins).
    """
    if subcommand not in CONFIG_CLASSES:
        raise ConfigError("subcommand", f"{subcommand!r} takes no run configuration")
    cls = CONFIG_CLASSES[subcommand]
    preset = preset or "paper"
    if preset not in PRESETS[subcommand]:
        raise ConfigError("--preset", f"unknown preset {preset!r}")
    tree = to_tree(cls())
    build(cls, PRESETS[subcommand][preset], "preset")
    tree = merge(tree, PRESETS[subcommand][preset])
    if file_tree:
        build(cls, file_tree)  # reject unknown keys with their path before merging
        tree = merge(tree, file_tree)
    applied: list[dict] = []
    if seed is not None:
        for key in SEED_FIELDS[subcommand]:
            _set_path(tree, key, seed)
            applied.append({"key": key, "value": seed, "source": "--seed"})
    for item in sets:
        key, value = parse_set(item)
        _set_path(tree, key, value)
        applied.append({"key": key, "value": value, "source": "--set"})
    counts: dict[str, int] = {}
    for a in applied:
        counts[a["key"]] = counts.get(a["key"], 0) + 1
    cfg = build(cls, tree)
    _check(cfg)
    record = {
        "preset": preset,
        "overrides": applied,
        "repeated": sorted(k for k, c in counts.items() if c > 1),
    }
    return cfg, record


def sidecar(subcommand: str, cfg, record: dict, extra: dict | None = None) -> str:
    tree = to_tree(cfg)
    doc = {
        "format": SIDECAR_FORMAT,
        "subcommand": subcommand,
        "config": tree,
        "digest": digest(tree),
        **record,
        **(extra or {}),
    }
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def from_sidecar(text: str):
    """Rebuild the config echoed by :func:`sidecar`."""
    doc = json.loads(text)
    if doc.get("format") != SIDECAR_FORMAT:
        raise ConfigError("sidecar", "not a fanlasso run sidecar")
    cls = CONFIG_CLASSES[doc["subcommand"]]
    cfg = build(cls, doc["config"])
    if digest(to_tree(cfg)) != doc["digest"]:
        raise ConfigError("sidecar", "digest mismatch")
    return cfg
