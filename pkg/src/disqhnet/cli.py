"""Command-line entry point.

    disqhnet gen        --config C --out DATA
    disqhnet train      --config C --manifest DATA/manifest.tsv --out RUN [--resume CKPT] [--epochs N]
    disqhnet synthesize --checkpoint CKPT --manifest M --out PRED
    disqhnet evaluate   --pred PRED --manifest M [--config C] --out REPORT
    disqhnet attribute  --checkpoint CKPT --manifest M [--config C] --out ATTR

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import checkpoint as ckpt
from . import config as config_mod
from . import evalkit, phantom, shapley, training
from . import ndgrad as nd
from .errors import ConfigError, FormatError, NormalizationError, NumericsError, ShapeError

log = logging.getLogger("disqhnet")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICS = 0, 2, 3
PRED_FIELDS = ("subject_id", "pred")


def _load_config(path: Optional[str], fallback: Optional[config_mod.RunConfig] = None) -> config_mod.RunConfig:
    if path:
        return config_mod.load(path)
    return fallback if fallback is not None else config_mod.RunConfig().validate()


def _with_seed(cfg: config_mod.RunConfig, seed: Optional[int]) -> config_mod.RunConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed),
                               data=dataclasses.replace(cfg.data, seed=seed),
                               model=dataclasses.replace(cfg.model, seed=seed)).validate()


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_tsv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _manifest_path(args, cfg: config_mod.RunConfig) -> Path:
    path = args.manifest or cfg.train.manifest
    if not path:
        raise ConfigError("no manifest given (use --manifest or [train] manifest)")
    if not Path(path).exists():
        raise FileNotFoundError(f"manifest {path} not found")
    return Path(path)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------
def cmd_gen(args) -> int:
    cfg = _with_seed(_load_config(args.config), args.seed)
    out = _out_dir(args.out)
    subjects = phantom.cohort(cfg.data.n_subjects, cfg.data.phantom_spec(), cfg.data.stages)
    rows = [phantom.write_subject(s, out) for s in subjects]
    phantom.write_manifest(rows, out / "manifest.tsv")
    (out / "config.ini").write_text(config_mod.to_ini(cfg))
    print(out / "manifest.tsv")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        ck = ckpt.load(args.resume)
        cfg = config_mod.from_ini(ck.config_text)
    else:
        ck = None
        cfg = _with_seed(_load_config(args.config, config_mod.RunConfig.toy().validate()), args.seed)
    subjects = phantom.load_manifest(_manifest_path(args, cfg))
    train_set, val_set = training.split_subjects(subjects, cfg.train.val_fraction, cfg.train.seed)
    out = _out_dir(args.out)
    if ck is None:
        trainer = training.Trainer(cfg, train_set, val_set, out)
    else:
        trainer = training.Trainer.from_checkpoint(ck, train_set, val_set, out)
    log_path = out / "train_log.tsv"
    fresh = ck is None or not log_path.exists()
    with open(log_path, "w" if fresh else "a", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        fh.write(f"# started {time.strftime('%Y-%m-%dT%H:%M:%S')} at epoch {trainer.epoch}\n")
        if fresh:
            w.writerow(training.LOG_COLUMNS)

        def on_epoch(rec):
            w.writerow(rec.row())
            fh.flush()

        trainer.run(args.epochs, on_epoch)
    ckpt.save(trainer.checkpoint(), out / "checkpoint_last.dqck")
    print(out / "checkpoint_last.dqck")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    model, _ = training.model_from_checkpoint(ckpt.load(args.checkpoint))
    subjects = phantom.load_manifest(Path(args.manifest))
    out = _out_dir(args.out)
    rows = []
    with nd.no_grad():
        for s in subjects:
            y_hat = model.forward(s.x1, s.x2, mode="infer", track_usage=False).y_hat.data
            name = f"{s.subject_id}_pred.dvol"
            phantom.write_volume(y_hat, out / name)
            rows.append((s.subject_id, name))
    _write_tsv(out / "predictions.tsv", PRED_FIELDS, rows)
    print(out / "predictions.tsv")
    return EXIT_OK


def _read_predictions(pred_dir: Path) -> dict[str, Path]:
    index = pred_dir / "predictions.tsv"
    if not index.exists():
        raise FileNotFoundError(f"prediction index {index} not found")
    with open(index, newline="") as fh:
        return {r["subject_id"]: pred_dir / r["pred"] for r in csv.DictReader(fh, delimiter="\t")}


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    preds = _read_predictions(Path(args.pred))
    subjects = phantom.load_manifest(Path(args.manifest))
    records = []
    for s in subjects:
        if s.subject_id not in preds:
            raise FormatError(f"no prediction for subject {s.subject_id}")
        y_hat = phantom.read_volume(preds[s.subject_id])
        records.append(evalkit.evaluate_subject(y_hat, s.y, s.roi_mask, s.subject_id, cfg.eval.ssim_window,
                                                cfg.eval.high_uptake_threshold))
    report = evalkit.EvalReport(records, cfg.eval.high_uptake_threshold)
    out = _out_dir(args.out)
    (out / "subjects.tsv").write_text(report.subject_table())
    (out / "bland_altman.tsv").write_text(report.bland_altman_table())
    (out / "summary.tsv").write_text(report.summary())
    sys.stdout.write(report.summary())
    return EXIT_OK


def cmd_attribute(args) -> int:
    model, ck_cfg = training.model_from_checkpoint(ckpt.load(args.checkpoint))
    cfg = _load_config(args.config, ck_cfg)
    subjects = phantom.load_manifest(Path(args.manifest))
    if not subjects:
        raise FormatError("manifest lists no subjects")
    ablation = shapley.ablation_values(model, subjects, cfg.attribute.ablation)
    attrs = [shapley.attribute_subject(model, s, ablation, cfg.eval.ssim_window) for s in subjects]
    out = _out_dir(args.out)
    (out / "shapley.tsv").write_text(shapley.attribution_tsv(attrs))
    (out / "coalitions.tsv").write_text(shapley.coalitions_tsv(attrs))
    (out / "violin.tsv").write_text(shapley.violin_tsv(attrs))
    table = shapley.table_tsv(shapley.coalition_table(attrs))
    (out / "coalition_table.tsv").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="disqhnet", description="PID-quantized PET synthesis toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=False):
        if config:
            sp.add_argument("--config", help="run configuration file")
        if seed:
            sp.add_argument("--seed", type=int, help="override every configured seed")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen", help="generate a phantom cohort")
    common(sp, seed=True)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a model")
    common(sp, seed=True)
    sp.add_argument("--manifest", help="training manifest (overrides [train] manifest)")
    sp.add_argument("--resume", help="checkpoint to resume from; its embedded config is used")
    sp.add_argument("--epochs", type=int, help="stop after this many total epochs")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("synthesize", help="predict target volumes")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("evaluate", help="score predictions against references")
    common(sp)
    sp.add_argument("--pred", required=True, help="directory written by synthesize")
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("attribute", help="Shapley attribution over the latent partitions")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=cmd_attribute)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericsError, NormalizationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except (ConfigError, FormatError, ShapeError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
