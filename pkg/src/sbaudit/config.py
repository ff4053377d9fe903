"""JSON audit configuration.

Example (every key except the two seeds is optional)::

    {
      "gen":   {"seed": 1, "counts": {"A_bonafide": 500, "A_attack": 500,
                                      "B_bonafide": 500, "B_attack": 500},
                "noise_sigma": 0.3, "attack_amp_A": 0.3, "attack_amp_B": 0.3,
                "group_cue_amp": 0.1},
      "test_seed": 17,
      "train": {"seed": 0, "epochs": 10, "batch_size": 32,
                "learning_rate": 0.02, "momentum": 0.9, "grad_clip": 1.0},
      "fractions": [0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
      "normalization_anchor": "first_point",
      "explainers": ["GradCAM", "GradCAMpp"],
      "threshold_mode": "pooled",
      "include_anchor": true,
      "output_dir": "out",
      "threads": 1
    }

``test_seed`` defaults to a hash of ``gen.seed``.  The environment variable
``SBA_SEED_OVERRIDE`` replaces ``gen.seed`` and ``train.seed`` and re-derives
``test_seed``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .evaluation import AuditSettings
from .nn import TrainConfig
from .rng import MASK64, mix64
from .synthgen import GenConfig

SEED_OVERRIDE_ENV = "SBA_SEED_OVERRIDE"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def derive_test_seed(gen_seed: int) -> int:
    return mix64(gen_seed ^ 0x7E57) & MASK64


@dataclass
class AuditConfig:
    gen: GenConfig
    train: TrainConfig
    test_seed: int
    audit: AuditSettings = field(default_factory=AuditSettings)
    output_dir: str = "out"

    @property
    def test_gen(self) -> GenConfig:
        return replace(self.gen, seed=self.test_seed)

    def with_seed(self, seed: int) -> "AuditConfig":
        return replace(self, gen=replace(self.gen, seed=seed), train=replace(self.train, seed=seed),
                       test_seed=derive_test_seed(seed))

    def to_dict(self) -> dict:
        return {
            "gen": self.gen.to_dict(),
            "test_seed": self.test_seed,
            "train": {f.name: getattr(self.train, f.name) for f in fields(self.train)},
            "fractions": list(self.audit.fractions),
            "normalization_anchor": self.audit.normalization_anchor,
            "explainers": list(self.audit.explainers),
            "threshold_mode": self.audit.threshold_mode,
            "include_anchor": self.audit.include_anchor,
            "output_dir": self.output_dir,
            "threads": self.audit.threads,
        }


def _section(doc: dict, name: str) -> dict:
    if name not in doc:
        raise ConfigError(name, "missing required field")
    sec = doc[name]
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be an object")
    if "seed" not in sec:
        raise ConfigError(f"{name}.seed", "missing required field")
    if not isinstance(sec["seed"], int) or isinstance(sec["seed"], bool):
        raise ConfigError(f"{name}.seed", "must be an integer")
    return sec


def _build(cls, name: str, values: dict):
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


_TOP_LEVEL = {"gen", "test_seed", "train", "fractions", "normalization_anchor", "explainers",
              "threshold_mode", "include_anchor", "output_dir", "threads"}


def parse_config(doc: dict) -> AuditConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in doc:
        if key not in _TOP_LEVEL:
            raise ConfigError(key, "unknown field")
    gen = _build(GenConfig, "gen", dict(_section(doc, "gen")))
    train = _build(TrainConfig, "train", dict(_section(doc, "train")))
    audit_values = {k: doc[k] for k in ("fractions", "normalization_anchor", "explainers",
                                        "threshold_mode", "include_anchor", "threads") if k in doc}
    for key in ("fractions", "explainers"):
        if key in audit_values:
            if not isinstance(audit_values[key], list):
                raise ConfigError(key, "must be a list")
            audit_values[key] = tuple(audit_values[key])
    try:
        audit = AuditSettings(**audit_values)
    except ValueError as exc:
        bad = next((k for k in audit_values if k in str(exc)), "audit")
        raise ConfigError(bad, str(exc)) from exc
    test_seed = doc.get("test_seed", derive_test_seed(gen.seed))
    if not isinstance(test_seed, int):
        raise ConfigError("test_seed", "must be an integer")
    cfg = AuditConfig(gen, train, test_seed, audit, str(doc.get("output_dir", "out")))

    override = os.environ.get(SEED_OVERRIDE_ENV)
    if override is not None:
        try:
            cfg = cfg.with_seed(int(override))
        except ValueError as exc:
            raise ConfigError(SEED_OVERRIDE_ENV, "must be an integer") from exc
    return cfg


def load_config(path) -> AuditConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return parse_config(doc)


def default_config(seed: int = 0, **gen_overrides) -> AuditConfig:
    return AuditConfig(GenConfig(seed=seed, **gen_overrides), TrainConfig(seed=seed),
                       derive_test_seed(seed))
