"""``sba`` command line: gen, train, audit, report.

Exit codes: 0 success, 2 config error, 3 missing input, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nn
from .config import AuditConfig, ConfigError, load_config
from .evaluation import InvariantError, read_curves_csv, run_audit, write_curves_csv, write_report_csv
from .metrics import ScoreSet, eer_by_group, eer_operating_point, write_scores_csv
from .pipeline import MODEL_FILES, train_models
from .plots import write_curve_plots
from .saliency import explain, overlay_svg
from .synthgen import Dataset, DatasetFormatError, Group, Label, generate, load_dir, save_dir

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_INVARIANT = 0, 2, 3, 4

log = logging.getLogger("sbaudit")


class MissingInput(Exception):
    pass


def _paths(out: Path) -> dict[str, Path]:
    return {
        "train": out / "data" / "train",
        "test": out / "data" / "test",
        "models": out / "models",
        "curves": out / "curves.csv",
        "report": out / "report.csv",
        "plots": out / "plots",
    }


def _settings(args) -> tuple[AuditConfig, Path]:
    cfg = load_config(args.config)
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise ConfigError("threads", "must be a positive integer")
        cfg = replace(cfg, audit=replace(cfg.audit, threads=args.threads))
    out = Path(args.out if args.out is not None else cfg.output_dir)
    return cfg, out


def _load_data(path: Path, expected_fp: str, what: str) -> Dataset:
    if not (path / "manifest.json").exists():
        raise MissingInput(f"{what} dataset not found at {path}; run `sba gen` first")
    data = load_dir(path)
    if data.fingerprint != expected_fp:
        raise MissingInput(f"{what} dataset at {path} was generated from a different config; "
                           f"rerun `sba gen`")
    return data


def _load_models(models_dir: Path) -> dict[str, nn.MiniPadNet]:
    models = {}
    for tag, name in MODEL_FILES.items():
        path = models_dir / name
        if not path.exists():
            raise MissingInput(f"weight file {path} not found; run `sba train` first")
        models[tag] = nn.load_model(path)
    return models


def cmd_gen(args) -> int:
    cfg, out = _settings(args)
    p = _paths(out)
    for split, gen_cfg in (("train", cfg.gen), ("test", cfg.test_gen)):
        data = generate(gen_cfg)
        save_dir(data, p[split])
        print(f"{split}: {len(data)} samples, fingerprint {data.fingerprint}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _settings(args)
    p = _paths(out)
    train = _load_data(p["train"], cfg.gen.fingerprint(), "train")
    test = _load_data(p["test"], cfg.test_gen.fingerprint(), "test")
    models = train_models(cfg, train)
    p["models"].mkdir(parents=True, exist_ok=True)
    for tag, model in models.items():
        nn.save_model(model, p["models"] / MODEL_FILES[tag])
        scores = ScoreSet.from_dataset(nn.score_images(model, test.images), test)
        pooled = eer_operating_point(scores)
        per_group = eer_by_group(scores)
        print(f"{tag}: test EER {pooled.eer:.4f} (threshold {pooled.threshold:.6f}); "
              f"group A {per_group[Group.A].eer:.4f}, group B {per_group[Group.B].eer:.4f}")
    return EXIT_OK


def _write_overlays(models, test: Dataset, thresholds: dict, explainers, out_dir: Path) -> None:
    # one attack and one bona fide sample per group
    out_dir.mkdir(parents=True, exist_ok=True)
    picks = []
    for g in Group:
        for l in Label:
            idx = np.flatnonzero((test.groups == g) & (test.labels == l))
            if len(idx):
                picks.append(int(idx[0]))
    for tag, model in models.items():
        for i in picks:
            sample = test[i]
            for explainer in explainers:
                smap = explain(model, sample.image, thresholds[tag], explainer, sample.id)
                name = f"overlay_{tag}_{explainer}_{sample.group.tag}_{sample.label.tag}_{sample.id}.svg"
                (out_dir / name).write_text(overlay_svg(sample.image, smap.map))


def cmd_audit(args) -> int:
    cfg, out = _settings(args)
    p = _paths(out)
    test = _load_data(p["test"], cfg.test_gen.fingerprint(), "test")
    models = _load_models(p["models"])
    report = run_audit(models, test, cfg.audit)

    executor = ThreadPoolExecutor(cfg.audit.threads) if cfg.audit.threads > 1 else None
    try:
        for tag, model in models.items():
            scores = ScoreSet.from_dataset(nn.score_images(model, test.images, executor), test)
            write_scores_csv(scores, out / f"scores_{tag}.csv")
    finally:
        if executor is not None:
            executor.shutdown()
    write_curves_csv(report.curves, p["curves"])
    write_report_csv(report, p["report"])
    for e in report.sorted_entries():
        print(f"{e.model_tag} {e.explainer} {e.mode}: auc_A {e.auc_male:.4f} "
              f"auc_B_norm {e.auc_female_norm:.4f} delta {e.delta:.4f}")
    if args.svg:
        write_curve_plots(read_curves_csv(p["curves"]), p["plots"])
        _write_overlays(models, test, report.thresholds, cfg.audit.explainers, p["plots"])
    return EXIT_OK


def cmd_report(args) -> int:
    if args.out is not None:
        out = Path(args.out)
    elif args.config is not None:
        out = Path(load_config(args.config).output_dir)
    else:
        raise ConfigError("--out", "give --out or --config")
    p = _paths(out)
    if not p["curves"].exists():
        raise MissingInput(f"{p['curves']} not found; run `sba audit` first")
    written = write_curve_plots(read_curves_csv(p["curves"]), p["plots"])
    print(f"wrote {len(written)} plots to {p['plots']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sba", description="Audit saliency explanations of PAD models for group bias.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON audit config")
        sp.add_argument("--out", help="output directory (default: config output_dir)")

    sp = sub.add_parser("gen", help="generate train and test datasets")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train the balanced, group-A and group-B models")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("audit", help="run the insertion/deletion bias audit")
    common(sp)
    sp.add_argument("--threads", type=int, help="worker threads (output does not depend on it)")
    sp.add_argument("--svg", action="store_true", help="also write curve plots and saliency overlays")
    sp.set_defaults(func=cmd_audit)

    sp = sub.add_parser("report", help="re-render SVG curve plots from an existing curves.csv")
    common(sp, config_required=False)
    sp.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInput, FileNotFoundError, nn.WeightFormatError, DatasetFormatError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
