"""Command-line surface: generate, train, eval, infer, report.

Exit codes: 0 success, 1 usage/configuration error, 2 data error
(missing or malformed inputs), 3 numerical failure (non-finite loss or
gradients).  Flags win over the config file, which wins over defaults;
the fully resolved configuration is echoed beside every artifact.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import CONFIG_ENV_VAR, ConfigError, load_config, write_resolved
from .dataset import DatasetError, generate_dataset, load_dataset, load_study, save_dataset
from .metrics import (
    compare_variants,
    evaluate_studies,
    predict_study,
    read_report_csv,
    write_comparison_csv,
)
from .overlay import overlay_rgb, write_ppm
from .phantom import apply_brain_window
from .tensor import NumericalError
from .train import run_protocol
from .windows import make_slice_windows


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract is exit 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="hemonet",
                     description="synthetic-phantom hemorrhage detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", type=Path, default=None,
                       help=f"TOML config (default: ${CONFIG_ENV_VAR} if set)")

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    add_config(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--studies", type=int, default=None, help="override generate.n_studies")
    p.add_argument("--start-index", type=int, default=None, help="override generate.start_index")
    p.add_argument("--seed", type=int, default=None, help="override phantom.seed")

    p = sub.add_parser("train", help="run the training protocol for one variant")
    add_config(p)
    p.add_argument("--data", type=Path, required=True, help="training dataset directory")
    p.add_argument("--val-data", type=Path, default=None, help="validation dataset directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", default=None,
                   choices=["single_task", "multi_task", "task_dependent"],
                   help="override arch.variant")
    p.add_argument("--init-seed", type=int, default=None, help="override train.init_seed")

    p = sub.add_parser("eval", help="score a dataset and write report CSVs")
    add_config(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--level", default=None, choices=["slice", "study"],
                   help="override eval.level")

    p = sub.add_parser("infer", help="print '<study> <probability> <mm3>' for one study")
    add_config(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--study", type=Path, required=True, help="one study directory")

    p = sub.add_parser("report", help="comparison table and/or mask-contour overlays")
    add_config(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--eval", action="append", default=[], metavar="VARIANT=REPORT_CSV",
                   help="evaluation report to include in the comparison table")
    p.add_argument("--checkpoint", type=Path, default=None, help="model for overlays")
    p.add_argument("--data", type=Path, default=None, help="dataset for overlays")
    p.add_argument("--max-studies", type=int, default=None)
    return parser


def _overrides(args) -> dict:
    mapping = {
        "studies": "generate.n_studies",
        "start_index": "generate.start_index",
        "seed": "phantom.seed",
        "variant": "arch.variant",
        "init_seed": "train.init_seed",
        "level": "eval.level",
    }
    out = {}
    for attr, spec in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[spec] = value
    return out


def _cmd_generate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    studies = generate_dataset(cfg.phantom, cfg.generate.n_studies, cfg.generate.start_index)
    save_dataset(studies, args.out)
    write_resolved(cfg, args.out)
    positives = sum(s.study_label for s in studies)
    print(f"wrote {len(studies)} studies ({positives} positive) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    train_studies = load_dataset(args.data)
    val_studies = load_dataset(args.val_data) if args.val_data else []
    proto = cfg.protocol_with_windowing()
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        model, log, summary = run_protocol(train_studies, val_studies, cfg.arch, proto)
    except NumericalError as exc:
        partial = getattr(exc, "train_log", None)
        if partial is not None:
            partial.to_csv(args.out / "trainlog.csv")
        raise
    meta = {
        "window_level": cfg.data.window_level,
        "window_width": cfg.data.window_width,
        "init_seed": proto.init_seed,
        "shuffle_seed": proto.shuffle_seed,
    }
    save_checkpoint(args.out / "model.ckpt", model, meta=meta)
    log.to_csv(args.out / "trainlog.csv")
    write_resolved(cfg, args.out)
    best = summary["best_val_auc"]
    print(f"trained {cfg.arch.variant}: checkpoint {args.out / 'model.ckpt'}")
    if best is not None:
        stage, epoch = summary["best_at"]
        print(f"best validation auc {best:.4f} at stage {stage} epoch {epoch}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    model, meta = load_checkpoint(args.checkpoint)
    studies = load_dataset(args.data)
    report = evaluate_studies(
        model,
        studies,
        level=cfg.eval.level,
        n_bootstrap=cfg.eval.n_bootstrap,
        seed=cfg.eval.seed,
        window_level=meta.get("window_level", cfg.data.window_level),
        window_width=meta.get("window_width", cfg.data.window_width),
    )
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out / "report.csv")
    report.write_roc_csv(args.out / "roc.csv")
    write_resolved(cfg, args.out)
    print(
        f"{cfg.eval.level}-level auc {report.auc:.4f} "
        f"[{report.ci_low:.4f}, {report.ci_high:.4f}] "
        f"(bootstrap n={report.n_bootstrap}) over {len(report.ids)} items"
    )
    return 0


def _cmd_infer(args) -> int:
    cfg = load_config(args.config)
    model, meta = load_checkpoint(args.checkpoint)
    study = load_study(args.study)
    pred = predict_study(
        model,
        study,
        window_level=meta.get("window_level", cfg.data.window_level),
        window_width=meta.get("window_width", cfg.data.window_width),
    )
    mm3 = float("nan") if pred.volume_mm3 is None else pred.volume_mm3
    print(f"{pred.study_id} {pred.study_prob:.6f} {mm3:.3f}")
    return 0


def _write_overlays(model, meta, cfg, studies, out_dir: Path, limit) -> int:
    """One overlay per interesting slice: every slice with mask content,
    plus each study's highest-probability slice (the triage view)."""
    count = 0
    level = meta.get("window_level", cfg.data.window_level)
    width = meta.get("window_width", cfg.data.window_width)
    for study in studies[: limit if limit else len(studies)]:
        windows = make_slice_windows(study, model.arch.input_slices, level, width)
        display = apply_brain_window(study.slices, level, width)
        probs = np.empty(len(windows))
        pred_masks = np.zeros(study.slices.shape, dtype=bool)
        for start in range(0, len(windows), 16):
            chunk = windows[start : start + 16]
            batch = np.stack([w.context for w in chunk]).astype(model.dtype)
            preds = model.forward(batch, voxel_volume=study.voxel_volume)
            probs[start : start + len(chunk)] = preds.cls_prob.data
            if preds.seg_probs is not None:
                pred_masks[start : start + len(chunk)] = preds.seg_probs.data >= 0.5
        wanted = {int(np.argmax(probs))}
        wanted.update(
            k for k in range(study.n_slices)
            if pred_masks[k].any() or study.masks[k].any()
        )
        for k in sorted(wanted):
            rgb = overlay_rgb(display[k], pred_masks[k], study.masks[k].astype(bool))
            write_ppm(out_dir / f"{study.study_id}_slice{k:02d}.ppm", rgb)
            count += 1
    return count


def _cmd_report(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    wants_table = bool(args.eval)
    wants_overlays = args.checkpoint is not None and args.data is not None
    if not wants_table and not wants_overlays:
        raise UsageError("report needs --eval entries and/or --checkpoint with --data")
    args.out.mkdir(parents=True, exist_ok=True)
    if wants_table:
        reports = {}
        for item in args.eval:
            name, _, path = item.partition("=")
            if not path:
                raise UsageError(f"--eval expects VARIANT=REPORT_CSV, got {item!r}")
            reports[name] = read_report_csv(Path(path))
        rows, text = compare_variants(reports)
        write_comparison_csv(rows, args.out / "comparison.csv")
        (args.out / "comparison.txt").write_text(text + "\n")
        print(text)
    if wants_overlays:
        model, meta = load_checkpoint(args.checkpoint)
        studies = load_dataset(args.data)
        n = _write_overlays(model, meta, cfg, studies, args.out / "overlays", args.max_studies)
        print(f"wrote {n} overlay images to {args.out / 'overlays'}")
    write_resolved(cfg, args.out)
    return 0


_HANDLERS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
