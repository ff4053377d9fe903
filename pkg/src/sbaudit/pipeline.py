"""End-to-end experiment: generate data, train the three model regimes, audit."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import nn
from .config import AuditConfig
from .evaluation import BiasReport, run_audit
from .synthgen import Dataset, Group, generate, split_by

log = logging.getLogger(__name__)

MODEL_FILES = {"PAD_B": "pad_b.sbaw", "PAD_M": "pad_m.sbaw", "PAD_F": "pad_f.sbaw"}


def make_datasets(cfg: AuditConfig) -> tuple[Dataset, Dataset]:
    return generate(cfg.gen), generate(cfg.test_gen)


def training_splits(train: Dataset) -> dict[str, Dataset]:
    """Balanced set for PAD_B, group A only for PAD_M, group B only for PAD_F."""
    return {
        "PAD_B": train,
        "PAD_M": split_by(train, group=Group.A),
        "PAD_F": split_by(train, group=Group.B),
    }


def train_models(cfg: AuditConfig, train: Dataset) -> dict[str, nn.MiniPadNet]:
    init = nn.init_model(cfg.train.seed)
    models = {}
    for tag, data in training_splits(train).items():
        model, history = nn.train_with_history(init, data, cfg.train)
        log.info("%s trained on %d images, epoch losses %s", tag, len(data),
                 " ".join(f"{h:.4f}" for h in history))
        models[tag] = model
    return models


@dataclass
class Experiment:
    config: AuditConfig
    train: Dataset
    test: Dataset
    models: dict[str, nn.MiniPadNet]
    report: BiasReport


def run_experiment(cfg: AuditConfig) -> Experiment:
    train, test = make_datasets(cfg)
    models = train_models(cfg, train)
    report = run_audit(models, test, cfg.audit)
    report.seeds = {"gen": cfg.gen.seed, "test": cfg.test_seed, "train": cfg.train.seed}
    return Experiment(cfg, train, test, models, report)
