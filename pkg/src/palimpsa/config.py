"""Run configuration: one YAML document, strict schema, content digest.

The document has four optional command sections (verify, train, bench,
oracle) plus global keys. Unknown keys anywhere are rejected so a typo
cannot silently fall back to a default. The digest is a sha256 over the
fully merged document in canonical JSON form; every output file records
it next to the seed, which is what makes runs attributable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import yaml

from .errors import ConfigError

_PRECISIONS = ("f32", "f64")
_VARIANTS = ("palimpsa-d", "palimpsa-m", "ablation")
_FAULTS = ("combine-sign-flip",)

# Schema leaves are (type_tuple, default). `list` leaves validate every
# element against elem_type. None defaults mean "absent unless given".
_GLOBAL_SCHEMA: dict[str, tuple] = {
    "seed": ((int,), 0),
    "precision": ((str,), "f64"),
    "workers": ((int,), 1),
    "out": ((str,), "runs"),
}

_VERIFY_SCHEMA: dict[str, tuple] = {
    "filter": ((str, type(None)), None),
    "fault": ((str, type(None)), None),
    "samples": ((int,), 25),  # cases per randomized suite; acceptance reruns with its own counts
}

_TRAIN_SCHEMA: dict[str, tuple] = {
    "preset": ((str, type(None)), None),
    "variants": ((list,), ["palimpsa-d"]),
    "lrs": ((list,), [3e-3]),
    "seeds": ((list,), [1]),
    "d_model": ((int,), 64),
    "n_layers": ((int,), 2),
    "n_heads": ((int,), 4),
    "d_state": ((int,), 16),
    "expand_v": ((int,), 2),
    "expand_k": ((int,), 1),
    "beta_rank": ((int,), 4),
    "b_scale_init": ((int, float), 1.0),
    "chunk_len": ((int,), 32),
    "vocab_size": ((int,), 256),
    "key_vocab": ((int,), 128),
    "value_vocab": ((int,), 128),
    "stages": ((list,), [[64, 16]]),
    "steps_per_stage": ((int,), 5000),
    "batch_size": ((int,), 32),
    "weight_decay": ((int, float), 0.0),
    "eval_every": ((int,), 25),
    "eval_samples": ((int,), 256),
    "early_stop_accuracy": ((int, float, type(None)), 0.95),
    "log_every": ((int,), 10),
    "precision": ((str, type(None)), None),  # null -> global precision
    "save_every": ((int, type(None)), None),
}

_BENCH_SCHEMA: dict[str, tuple] = {
    "rules": ((list,), ["palimpsa", "mamba2-limit"]),
    "engines": ((list,), ["sequential", "chunked"]),
    "seq_lens": ((list,), [16384]),
    "d_models": ((list,), [64]),
    "chunk_lens": ((list,), [16, 64, 256]),
    "workers": ((list,), [1, 2, 4, 8]),
    "reps": ((int,), 5),
    "warmup": ((int,), 2),
}

_ORACLE_SCHEMA: dict[str, tuple] = {}

_SECTIONS = {
    "verify": _VERIFY_SCHEMA,
    "train": _TRAIN_SCHEMA,
    "bench": _BENCH_SCHEMA,
    "oracle": _ORACLE_SCHEMA,
}

# Named train presets; explicit keys in the document override these.
TRAIN_PRESETS: dict[str, dict] = {
    # Desk-scale recall run: the gated configuration.
    "desk": {
        "variants": ["palimpsa-d"],
        "lrs": [1e-3, 3e-3],
        "seeds": [1, 2, 3],
        "stages": [[64, 16]],
        "steps_per_stage": 5000,
        "early_stop_accuracy": 0.95,
        "precision": "f32",
    },
    # Metaplastic-vs-frozen gap table, 8 runs per variant.
    "comparison": {
        "variants": ["palimpsa-d", "ablation"],
        "lrs": [3e-3],
        "seeds": [1, 2, 3, 4, 5, 6, 7, 8],
        "stages": [[64, 16]],
        "steps_per_stage": 5000,
        "early_stop_accuracy": 0.95,
        "precision": "f32",
    },
    # Harder setting where importance differentiation should matter:
    # longer sequences, more pairs, narrower state.
    "trend": {
        "variants": ["palimpsa-d", "ablation"],
        "lrs": [3e-3],
        "seeds": [1, 2, 3],
        "d_state": 8,
        "stages": [[256, 64]],
        "steps_per_stage": 2000,
        "batch_size": 16,
        "early_stop_accuracy": 0.98,
        "eval_samples": 128,
        "precision": "f32",
    },
    # Full four-stage curriculum at the largest supported scale. Exists as
    # a preset; long-running, never part of the test gate.
    "curriculum": {
        "variants": ["palimpsa-d"],
        "lrs": [1e-3, 2.15e-3, 4.64e-3, 1e-2],
        "seeds": [1, 2, 3, 4, 5, 6, 7, 8],
        "d_model": 128,
        "n_heads": 8,
        "beta_rank": 8,
        "vocab_size": 8192,
        "key_vocab": 4096,
        "value_vocab": 4096,
        "stages": [[128, 32], [256, 64], [512, 128], [1024, 256]],
        "steps_per_stage": 4000,
        "batch_size": 64,
        "early_stop_accuracy": None,
        "precision": "f32",
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Merged, validated configuration plus its content digest."""

    seed: int = 0
    precision: str = "f64"
    workers: int = 1
    out: str = "runs"
    verify: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        # The output directory is where results land, not an input to any
        # computation, so it stays out of the hash: the same run written to
        # two locations gets the same digest.
        doc = {
            "seed": self.seed,
            "precision": self.precision,
            "workers": self.workers,
            "verify": self.verify,
            "train": self.train,
            "bench": self.bench,
            "oracle": self.oracle,
        }
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_section(name: str, given: dict, schema: dict[str, tuple]) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"section '{name}' must be a mapping, got {type(given).__name__}")
    unknown = set(given) - set(schema)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    merged = {}
    for key, (types, default) in schema.items():
        val = given.get(key, default)
        if not isinstance(val, types) or isinstance(val, bool) and bool not in types:
            want = "/".join(t.__name__ for t in types)
            raise ConfigError(f"'{name}.{key}' must be {want}, got {type(val).__name__}")
        merged[key] = val
    return merged


def _validate_values(cfg: RunConfig) -> None:
    if cfg.precision not in _PRECISIONS:
        raise ConfigError(f"precision must be one of {_PRECISIONS}, got {cfg.precision!r}")
    if cfg.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {cfg.workers}")
    v = cfg.verify
    if v["fault"] is not None and v["fault"] not in _FAULTS:
        raise ConfigError(f"verify.fault must be one of {_FAULTS} or null, got {v['fault']!r}")
    if v["samples"] < 1:
        raise ConfigError("verify.samples must be >= 1")
    t = cfg.train
    if t["preset"] is not None and t["preset"] not in TRAIN_PRESETS:
        raise ConfigError(f"train.preset must be one of {sorted(TRAIN_PRESETS)} or null, got {t['preset']!r}")
    for var in t["variants"]:
        if var not in _VARIANTS:
            raise ConfigError(f"train.variants entries must be in {_VARIANTS}, got {var!r}")
    if t["precision"] is not None and t["precision"] not in _PRECISIONS:
        raise ConfigError(f"train.precision must be one of {_PRECISIONS} or null")
    for lr in t["lrs"]:
        if not isinstance(lr, (int, float)) or lr <= 0:
            raise ConfigError(f"train.lrs entries must be positive numbers, got {lr!r}")
    for s in t["seeds"]:
        if not isinstance(s, int):
            raise ConfigError(f"train.seeds entries must be integers, got {s!r}")
    for stage in t["stages"]:
        if not (isinstance(stage, (list, tuple)) and len(stage) == 2 and all(isinstance(x, int) for x in stage)):
            raise ConfigError(f"train.stages entries must be [seq_len, num_kv] pairs, got {stage!r}")
    b = cfg.bench
    for rule in b["rules"]:
        if rule not in ("palimpsa", "mamba2-limit"):
            raise ConfigError(f"bench.rules entries must be 'palimpsa' or 'mamba2-limit', got {rule!r}")
    for eng in b["engines"]:
        if eng not in ("sequential", "chunked"):
            raise ConfigError(f"bench.engines entries must be 'sequential' or 'chunked', got {eng!r}")
    for key in ("seq_lens", "d_models", "chunk_lens", "workers"):
        for x in b[key]:
            if not isinstance(x, int) or x < 1:
                raise ConfigError(f"bench.{key} entries must be positive integers, got {x!r}")
    if b["reps"] < 5:
        raise ConfigError(f"bench.reps must be >= 5, got {b['reps']}")
    if b["warmup"] < 0:
        raise ConfigError("bench.warmup must be >= 0")


def _apply_preset(train: dict, given_keys: set) -> dict:
    """Preset fills defaults; keys the user wrote explicitly win."""
    preset = train.get("preset")
    if preset is None:
        return train
    if preset not in TRAIN_PRESETS:
        raise ConfigError(f"train.preset must be one of {sorted(TRAIN_PRESETS)} or null, got {preset!r}")
    out = dict(train)
    for key, val in TRAIN_PRESETS[preset].items():
        if key not in given_keys:
            out[key] = val
    return out


def load_config(path: str | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Load and validate a run configuration.

    `path` may be None (pure defaults). `overrides` carries CLI flags
    (seed/precision/workers/out and section sub-keys like verify.filter);
    they are applied after the file, before validation.
    """
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                loaded = yaml.safe_load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file is not valid YAML: {e}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config document must be a mapping at top level")
        doc = loaded

    known_top = set(_GLOBAL_SCHEMA) | set(_SECTIONS)
    unknown = set(doc) - known_top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if "." in key:
            section, sub = key.split(".", 1)
            doc.setdefault(section, {})
            if not isinstance(doc[section], dict):
                raise ConfigError(f"section '{section}' must be a mapping")
            doc[section][sub] = val
        else:
            doc[key] = val

    glob = _check_section("(global)", {k: doc[k] for k in _GLOBAL_SCHEMA if k in doc}, _GLOBAL_SCHEMA)
    sections = {}
    for name, schema in _SECTIONS.items():
        raw = doc.get(name, {})
        merged = _check_section(name, raw, schema)
        if name == "train":
            merged = _apply_preset(merged, set(raw) if isinstance(raw, dict) else set())
        sections[name] = merged

    cfg = RunConfig(**glob, **sections)
    _validate_values(cfg)
    return cfg
