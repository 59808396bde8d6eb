"""Experiment configuration: defaults, strict validation, hashing."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError

UNLEARN_DEFAULTS = {
    "retrain": {},
    "finetune": {"steps": 50, "learning_rate": 0.05, "batch_size": 32},
    "grad_ascent": {"steps": 5, "learning_rate": 0.01, "batch_size": 32, "repair_steps": 50},
    "fisher_dampen": {"alpha": 10.0, "beta": 1.0},
    "saliency": {"steps": 10, "learning_rate": 0.05, "batch_size": 32, "gamma": 0.5},
}

DEFAULTS = {
    "dataset": {
        "source": "synthetic",
        "path": None,
        "n_samples": 2000,
        "num_classes": 2,
        "feature_dim": 8,
        "cluster_spread": 1.0,
        "grid": None,
        "seed": 0,
    },
    "model": {
        "hidden": [32],
        "shared_init": False,
        "init_seed": 0,
        "train": {"learning_rate": 0.1, "epochs": 100, "batch_size": 32, "weight_decay": 0.0},
        "dp": None,
    },
    "pool": {"m": 32, "base_seed": 0},
    "attack": {
        "kind": "alira",
        "n_aug": 100,
        "scheme": {"kind": "jitter", "eta": 0.05, "allow_flip": True, "max_shift": 1},
        "pairing": "halves",
        "seed": 0,
        "shadow_seed": 100000,
        "shadow_models": 64,
        "bench_samples": 32,
        "bench_fpr": 0.01,
        "calibration_models": 0,
    },
    "unlearn": {"methods": ["fisher_dampen"], "seed": 0, **copy.deepcopy(UNLEARN_DEFAULTS)},
    "audit": {
        "t1": 0.0,
        "t_abs": 0.01,
        "epsilon": None,
        "t2": 0.0,
        "dp_mode": None,
        "k": [0.05, 0.10, 0.15, 0.20, 0.25, 0.30],
        "directions": ["top", "bottom"],
    },
    "output_dir": "runs/default",
}

DP_DEFAULTS = {"clip_norm": 1.0, "noise_multiplier": None, "target_epsilon": None, "delta": 1e-5}
UNLEARN_KEYS = {"steps", "learning_rate", "batch_size", "alpha", "beta", "gamma", "repair_steps", "weight_decay"}


def _merge(defaults, given, path):
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict) and value is not None:
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def resolve(raw: dict) -> dict:
    """Fill defaults and validate; raises :class:`ConfigError`."""
    cfg = _merge(DEFAULTS, raw, "")
    unlearn_raw = raw.get("unlearn", {}) or {}
    for method in UNLEARN_DEFAULTS:
        section = unlearn_raw.get(method, {}) or {}
        bad = set(section) - UNLEARN_KEYS
        if bad:
            raise ConfigError(f"unknown keys in unlearn.{method}: {sorted(bad)}")
        cfg["unlearn"][method] = {**UNLEARN_DEFAULTS[method], **section}
    dp = cfg["model"]["dp"]
    if dp is not None:
        cfg["model"]["dp"] = _merge(DP_DEFAULTS, dp, "model.dp")
    _validate(cfg)
    return cfg


def _validate(cfg):
    ds = cfg["dataset"]
    if ds["source"] not in ("synthetic", "file"):
        raise ConfigError("dataset.source must be 'synthetic' or 'file'")
    if ds["source"] == "file" and not ds["path"]:
        raise ConfigError("dataset.path is required for source 'file'")
    for key in ("n_samples", "num_classes", "feature_dim"):
        if not isinstance(ds[key], int) or ds[key] < 1:
            raise ConfigError(f"dataset.{key} must be a positive integer")
    if not (isinstance(ds["cluster_spread"], (int, float)) and ds["cluster_spread"] > 0):
        raise ConfigError("dataset.cluster_spread must be > 0")
    if ds["grid"] is not None and (len(ds["grid"]) != 2 or ds["grid"][0] * ds["grid"][1] != ds["feature_dim"]):
        raise ConfigError("dataset.grid must be [h, w] with h*w == feature_dim")
    model = cfg["model"]
    if not all(isinstance(h, int) and h > 0 for h in model["hidden"]):
        raise ConfigError("model.hidden must list positive widths")
    dp = model["dp"]
    if dp is not None:
        if (dp["noise_multiplier"] is None) == (dp["target_epsilon"] is None):
            raise ConfigError("model.dp needs exactly one of noise_multiplier or target_epsilon")
        if not 0 < dp["delta"] < 1:
            raise ConfigError("model.dp.delta must lie in (0, 1)")
        if ds["source"] == "synthetic" and dp["delta"] >= 1 / ds["n_samples"]:
            raise ConfigError("model.dp.delta must be below 1/|D|")
    pool = cfg["pool"]
    if not isinstance(pool["m"], int) or pool["m"] < 4 or pool["m"] % 2:
        raise ConfigError("pool.m must be an even integer >= 4")
    attack = cfg["attack"]
    if attack["kind"] not in ("alira", "online", "offline"):
        raise ConfigError("attack.kind must be alira, online or offline")
    if attack["pairing"] not in ("halves", "leave_one_out"):
        raise ConfigError("attack.pairing must be 'halves' or 'leave_one_out'")
    if attack["n_aug"] < 2:
        raise ConfigError("attack.n_aug must be >= 2")
    if attack["shadow_models"] < 4:
        raise ConfigError("attack.shadow_models must be >= 4")
    if not 0 < attack["bench_fpr"] <= 1:
        raise ConfigError("attack.bench_fpr must lie in (0, 1]")
    methods = cfg["unlearn"]["methods"]
    if not methods or any(m not in UNLEARN_DEFAULTS for m in methods):
        raise ConfigError(f"unlearn.methods must be a non-empty subset of {sorted(UNLEARN_DEFAULTS)}")
    if len(set(methods)) != len(methods):
        raise ConfigError("unlearn.methods has duplicates")
    audit = cfg["audit"]
    if not audit["k"] or any(not 0 < k <= 0.5 for k in audit["k"]):
        raise ConfigError("audit.k values must lie in (0, 0.5]")
    if not audit["directions"] or any(d not in ("top", "bottom") for d in audit["directions"]):
        raise ConfigError("audit.directions must be drawn from top/bottom")
    if audit["t1"] < 0 or audit["t_abs"] < 0:
        raise ConfigError("audit.t1 and audit.t_abs must be >= 0")
    if audit["epsilon"] is not None and not audit["epsilon"] > 0:
        raise ConfigError("audit.epsilon must be > 0")


def load(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve(raw)


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical config, ignoring where outputs are written."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def k_label(k: float) -> str:
    return f"k{round(k * 100):03d}"
