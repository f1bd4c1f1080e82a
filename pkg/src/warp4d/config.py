"""Run configuration: one YAML file with a section per subcommand.

Layout::

    seed: 0
    workers: 1
    gen-data: {num_samples: 4, synth: {...SynthConfig fields...}}
    warp:     {src_dir: ..., src_cam: ..., tgt_cam: ...}
    train:    {data: ..., eval_every: 0, dump_examples: 4, ...TrainConfig fields...}
    eval:     {checkpoint: ..., data: ..., n_steps: 20, n_samples: 10000, dump_examples: 4}
    checks:   {attn_instances: 1000, grad_projections: 5, consensus_size: 5, ...}

Command-line flags override file values. Path-valued keys are resolved to
absolute paths before anything runs. The output root is not stored in the
config; it is the directory the resolved copy is written to.
"""

from __future__ import annotations

import copy
from dataclasses import fields
from pathlib import Path

import yaml

from .errors import ValidationError
from .flowmatch.train import TrainConfig
from .synthdata import SynthConfig

CONFIG_NAME = "config.yaml"

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "gen-data": {"num_samples": 4, "synth": {}},
    "warp": {"src_dir": None, "src_cam": None, "tgt_cam": None},
    "train": {"data": None, "eval_every": 0, "dump_examples": 4, "n_steps": 20},
    "eval": {"checkpoint": None, "data": None, "n_steps": 20, "n_samples": 10_000, "dump_examples": 4,
             "stage": 1},
    "checks": {"attn_instances": 1000, "grad_projections": 5, "grad_tol": 1e-3, "consensus_size": 5,
               "sample": None, "depth_noise": 0.0, "demo_frames": 24, "demo_hw": [96, 168]},
}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
PATH_KEYS = {
    "warp": ("src_dir", "src_cam", "tgt_cam"),
    "train": ("data", "init_checkpoint"),
    "eval": ("checkpoint", "data"),
    "checks": ("sample",),
}
SECTIONS = ("gen-data", "warp", "train", "eval", "checks")


def _merge_section(name, base, override):
    allowed = set(base)
    if name == "train":
        allowed |= TRAIN_KEYS - {"seed"}   # training uses the global seed
    unknown = set(override) - allowed
    if unknown:
        raise ValidationError(f"unknown keys in [{name}]: {sorted(unknown)}")
    out = dict(base)
    out.update(override)
    return out


def merge(user: dict | None) -> dict:
    """Defaults overlaid with ``user``; unknown keys at any level are rejected."""
    user = user or {}
    if not isinstance(user, dict):
        raise ValidationError("config root must be a mapping")
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULTS)
    for k in ("seed", "workers"):
        if k in user:
            cfg[k] = user[k]
    for sec in SECTIONS:
        part = user.get(sec) or {}
        if not isinstance(part, dict):
            raise ValidationError(f"[{sec}] must be a mapping")
        cfg[sec] = _merge_section(sec, cfg[sec], part)
    try:
        cfg["seed"] = int(cfg["seed"])
        cfg["workers"] = int(cfg["workers"])
    except (TypeError, ValueError):
        raise ValidationError("seed and workers must be integers") from None
    if not 0 <= cfg["seed"] < 2**64:
        raise ValidationError("seed must be an unsigned 64-bit integer")
    if cfg["workers"] < 1:
        raise ValidationError("workers must be at least 1")
    SynthConfig.from_dict(cfg["gen-data"]["synth"])
    train_config(cfg)
    return cfg


def load(path) -> dict:
    if path is None:
        return merge({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return merge(data)


def override(cfg: dict, section: str | None, **flags) -> dict:
    """Apply command-line values (``None`` means "not given")."""
    cfg = copy.deepcopy(cfg)
    for k, v in flags.items():
        if v is None:
            continue
        if k in ("seed", "workers"):
            cfg[k] = v
        else:
            cfg[section][k] = v
    return merge(cfg)


def resolve_paths(cfg: dict) -> dict:
    cfg = copy.deepcopy(cfg)
    for sec, keys in PATH_KEYS.items():
        for k in keys:
            v = cfg[sec].get(k)
            if v is not None:
                cfg[sec][k] = str(Path(v).expanduser().resolve())
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k in TRAIN_KEYS}
    t["seed"] = int(cfg["seed"])
    return TrainConfig.from_dict(t)


def dump(cfg: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / CONFIG_NAME
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path
