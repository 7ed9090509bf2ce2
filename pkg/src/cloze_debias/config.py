"""JSON run configuration: defaults, validation and seed derivation.

A config document has a top-level ``seed`` plus the sections ``data``,
``synth``, ``train``, ``eval``, ``loop`` and ``verify``. Unknown keys are
rejected. Every section has a ``seed`` field; unset seeds are derived from
the master seed and the section name, so a resolved config pins every RNG.
"""

import copy
import json
from dataclasses import fields

from ._validation import derive_seed
from .loop import LoopConfig
from .synth import WorldConfig
from .trainer import MODEL_KINDS, TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


def _dataclass_defaults(cls, skip=()):
    return {f.name: f.default for f in fields(cls) if f.name not in skip}


DEFAULTS = {
    "seed": 0,
    "data": {
        "source": "synthetic",
        "path": None,
        "T": 20,
        "n_sequences": 100,
        "n_items": 50,
        "d": 4,
        "zipf": 1.0,
        "quality": 0.0,
        "drift_width": 0.15,
        "seed": None,
    },
    "synth": dict(_dataclass_defaults(WorldConfig, skip=("T", "seed")), p=2.0, seed=None, draw_seed=None),
    "train": dict(_dataclass_defaults(TrainConfig, skip=("seed",)),
                  epochs=100, lr=3e-3, propensity_source="oracle", seed=None),
    "eval": {
        "mode": "unbiased",
        "sampler": "uniform",
        "ks": [5, 10],
        "n_negatives": 25,
        "replicates": 5,
        "models": ["cloze", "ips", "itps", "oracle"],
        "seed": None,
    },
    "loop": dict(_dataclass_defaults(LoopConfig, skip=("seed",)),
                 iterations=3, n_negatives=25, models=["cloze", "ips", "itps"], seed=None),
    "verify": {
        "n_draws": 10_000,
        "dims": [2, 4, 3],
        "seed": None,
    },
}


def _merge(section, base, override):
    if not isinstance(override, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    unknown = sorted(set(override) - set(base))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    out = dict(base)
    out.update(override)
    return out


def resolve(raw=None, seed=None):
    """Fill defaults, validate, and derive missing seeds. Returns a plain dict."""
    raw = {} if raw is None else copy.deepcopy(raw)
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = {"seed": raw.get("seed", DEFAULTS["seed"])}
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    for section in ("data", "synth", "train", "eval", "loop", "verify"):
        cfg[section] = _merge(section, DEFAULTS[section], raw.get(section, {}))
        if cfg[section]["seed"] is None:
            cfg[section]["seed"] = derive_seed(cfg["seed"], section)
    if cfg["synth"]["draw_seed"] is None:
        cfg["synth"]["draw_seed"] = derive_seed(cfg["seed"], "draw")
    validate(cfg)
    return cfg


def _ps(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


def validate(cfg):
    """Raise :class:`ConfigError` on values the pipeline would reject."""
    try:
        world_config(cfg, _ps(cfg["synth"]["p"])[0])
        train_config(cfg)
        loop_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    for p in _ps(cfg["synth"]["p"]):
        if not isinstance(p, (int, float)) or p < 1:
            raise ConfigError(f"bias power p must be a number >= 1, got {p!r}")
    if cfg["data"]["source"] not in ("synthetic", "tsv"):
        raise ConfigError("data.source must be 'synthetic' or 'tsv'")
    if cfg["data"]["source"] == "tsv" and not cfg["data"]["path"]:
        raise ConfigError("data.path is required when data.source is 'tsv'")
    ev = cfg["eval"]
    if ev["mode"] not in ("unbiased", "standard"):
        raise ConfigError("eval.mode must be 'unbiased' or 'standard'")
    if ev["sampler"] not in ("uniform", "popularity"):
        raise ConfigError("eval.sampler must be 'uniform' or 'popularity'")
    for m in ev["models"]:
        if m not in MODEL_KINDS:
            raise ConfigError(f"unknown model {m!r} in eval.models")
    for m in cfg["loop"]["models"]:
        if m not in ("cloze", "ips", "itps"):
            raise ConfigError(f"unknown model {m!r} in loop.models")
    if not isinstance(ev["replicates"], int) or ev["replicates"] < 1:
        raise ConfigError("eval.replicates must be a positive integer")
    if cfg["verify"]["n_draws"] < 100:
        raise ConfigError("verify.n_draws must be >= 100")
    if len(cfg["verify"]["dims"]) != 3 or min(cfg["verify"]["dims"]) < 1:
        raise ConfigError("verify.dims must be three positive integers")


def world_config(cfg, p=None):
    s = cfg["synth"]
    kwargs = {k: s[k] for k in _dataclass_defaults(WorldConfig, skip=("T", "seed", "p"))}
    return WorldConfig(T=cfg["data"]["T"], seed=s["seed"], p=float(s["p"] if p is None else p), **kwargs)


def train_config(cfg, **overrides):
    t = dict(cfg["train"], **overrides)
    return TrainConfig(**{f.name: t[f.name] for f in fields(TrainConfig)})


def loop_config(cfg):
    lp = cfg["loop"]
    return LoopConfig(**{f.name: lp[f.name] for f in fields(LoopConfig)})


def load(path, seed=None):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve(raw, seed)


def dump(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
