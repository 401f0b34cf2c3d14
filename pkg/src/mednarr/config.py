"""Run configuration: one YAML tree, environment overrides, resolved manifest."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import yaml

ENV_PREFIX = "NARR_"

# every tunable, with its default; None means "unset / use the profile value"
DEFAULTS = {
    "domain": "CT",
    "seed": 0,
    "workers": 1,
    "inputs": [],
    "output": "out",
    "cache": None,  # defaults to <output>/cache
    "keyframe": {"threshold": None, "adaptive_k": 2.0, "min_threshold": 0.02, "retries": 2},
    "narrative": {"streak_candidates": 16, "similarity": 0.9, "streak_percent": None, "min_speech_seconds": None,
                  "window_before": 5.0, "window_after": 15.0},
    "stability": {"sigma": 3.0, "k": 3.0, "change_pixel_fraction": 0.002, "noise_floor": 8.0,
                  "baseline_quantile": 0.05, "min_stable_seconds": 2.0, "n_patches": 16, "patch_side": 32,
                  "ssim_min": 0.9},
    "trace": {"noise_threshold": 25.0, "min_trace_points": 5},
    "transcript": {"ngram_cutoff": 2, "lexicon": None,
                   "deictic": ["here", "this", "look", "arrow", "pointing", "region", "area"]},
    "align": {"pad_time": 3.0, "lookback": 30.0, "lookahead": 5.0, "dedup_threshold": 0.02,
              "subdomains": []},
    "export": {"shard_size": 1000},
    "clients": {
        "classifier": {"kind": "scripted", "script": None, "url": None, "label": True},
        "lm": {"kind": "scripted", "script": None, "url": None},
        "embedding": {"kind": "luma", "size": 32},
        "speech": {"kind": "sidecar", "path": None},
        "faces": {"kind": "sidecar", "path": None},
    },
}


class ConfigError(ValueError):
    pass


def _check(tree, ref, path=""):
    if not isinstance(tree, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    for key, value in tree.items():
        where = f"{path}.{key}" if path else key
        if key not in ref:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(ref[key], dict):
            _check(value, ref[key], where)
        elif value is not None and ref[key] is not None:
            _check_type(value, ref[key], where)


def _check_type(value, default, where):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(value, int):
            ok = float(value).is_integer()
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def _merge(base, over):
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def _set_path(tree, dotted, value):
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def leaf_keys(ref=DEFAULTS, prefix=""):
    for key, value in ref.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from leaf_keys(value, dotted + ".")
        else:
            yield dotted


def env_overrides(environ=None) -> dict:
    """``NARR_STABILITY__SIGMA=2.5`` -> ``{"stability": {"sigma": 2.5}}``.

    Values are parsed as YAML scalars; unknown names are rejected like file keys.
    """
    environ = os.environ if environ is None else environ
    tree = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        _set_path(tree, dotted, yaml.safe_load(raw) if raw != "" else None)
    return tree


class RunConfig:
    """Resolved configuration tree (defaults < file < environment < flags)."""

    def __init__(self, tree=None):
        tree = tree or {}
        _check(tree, DEFAULTS)
        self.tree = _merge(copy.deepcopy(DEFAULTS), copy.deepcopy(tree))

    @classmethod
    def load(cls, path=None, overrides=None, environ=None) -> "RunConfig":
        tree = {}
        if path is not None:
            text = Path(path).read_text()
            loaded = yaml.safe_load(text)
            if loaded is not None and not isinstance(loaded, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            tree = loaded or {}
            base = Path(path).resolve().parent
            tree = _resolve_paths(tree, base)
        _check(tree, DEFAULTS)
        env = env_overrides(environ)
        _check(env, DEFAULTS)
        _merge(tree, env)
        for dotted, value in (overrides or {}).items():
            _set_path(tree, dotted, value)
        return cls(tree)

    def __getitem__(self, dotted: str):
        node = self.tree
        for p in dotted.split("."):
            node = node[p]
        return node

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.tree[name])

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True)

    def digest(self, *sections) -> str:
        """Hash of the named sections (all when none given)."""
        sub = {s: self.tree[s] for s in sections} if sections else self.tree
        return hashlib.sha256(json.dumps(sub, sort_keys=True, default=str).encode()).hexdigest()

    def write_manifest(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "resolved_config.yaml"
        path.write_text(self.to_yaml())
        return path


_PATH_KEYS = ("output", "cache", "transcript.lexicon", "clients.classifier.script", "clients.lm.script",
              "clients.speech.path", "clients.faces.path")


def _resolve_paths(tree, base: Path):
    """Relative paths in a config file are taken relative to that file."""
    tree = copy.deepcopy(tree)

    def fix(v):
        return v if v is None or Path(v).is_absolute() else str(base / v)

    if isinstance(tree.get("inputs"), list):
        tree["inputs"] = [fix(v) for v in tree["inputs"]]
    for dotted in _PATH_KEYS:
        parts = dotted.split(".")
        node = tree
        for p in parts[:-1]:
            node = node.get(p) if isinstance(node, dict) else None
            if node is None:
                break
        if isinstance(node, dict) and isinstance(node.get(parts[-1]), str):
            node[parts[-1]] = fix(node[parts[-1]])
    return tree
