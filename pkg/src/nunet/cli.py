"""Command-line entry point.

Commands mirror the experiments: `prepare` builds manifests and fold
plans, `ablate` cross-validates the variant ladder, `depth-sweep`
scores plain backbones over a depth range, `complexity` prints the
calibration table, and `eval`/`external`/`compare` turn completed runs
into tables, failure-rate charts, and contour overlays.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .arch import (NUNetConfig, BackboneConfig, ChannelSchedule, VARIANT_NAMES,
                   variant_config)
from .complexity import calibration_report, complexity_table
from .data import DatasetManifest, FoldPlan, ingest_busi, ingest_flat, make_folds
from .errors import ConfigError, NUNetError
from .metrics import (DEFAULT_JACCARD_FLOOR, METRIC_NAMES, EvalReport, binarize,
                      format_mean_std)
from .stats import DEFAULT_ALPHA, build_comparison_table
from .train import Checkpoint, TrainConfig, cross_validate, external_validate, load_split
from .viz import depth_sweep_plot, failure_rate_chart, save_overlay


def _out_dir(args, command: str) -> Path:
    if args.out is not None:
        out = Path(args.out)
    else:
        out = Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, command: str, args, extra: dict | None = None) -> None:
    payload = {"command": command}
    payload.update({k: v for k, v in sorted(vars(args).items()) if k != "func"})
    if extra:
        payload.update(extra)
    (out / "run_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True,
                                                    default=str) + "\n")


def _ingest(args) -> DatasetManifest:
    if args.dataset == "busi":
        return ingest_busi(args.data_root, include_normal=args.include_normal)
    return ingest_flat(args.data_root, images_dir=args.images_dir, masks_dir=args.masks_dir,
                       class_file=args.class_file)


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.learning_rate, seed=args.seed,
                       device=args.device, input_size=args.input_size)


def _arch_for_variant(args, name: str) -> NUNetConfig:
    if getattr(args, "arch", None):
        cfg = NUNetConfig.from_text(Path(args.arch).read_text())
        return replace(cfg, input_size=args.input_size, seed=args.seed)
    return variant_config(name, base_width=args.base_width, input_size=args.input_size,
                          seed=args.seed)


def _summary_table(reports: list[EvalReport]) -> tuple[str, str]:
    """Plain mean +- std table (CSV and markdown) without significance tests."""
    fingerprints = " ".join(f"{r.method}={r.config_fingerprint}" for r in reports)
    csv_lines = [f"# config: {fingerprints}"]
    header = ["method"]
    for name in METRIC_NAMES:
        header += [f"{name}_mean", f"{name}_std"]
    header.append("failure_rate")
    csv_lines.append(",".join(header))
    md = [f"<!-- config: {fingerprints} -->",
          "| Method | " + " | ".join(m.capitalize() for m in METRIC_NAMES) + " | Failures |",
          "|" + "---|" * (len(METRIC_NAMES) + 2)]
    for report in reports:
        s = report.summary
        row = [report.method]
        cells = [report.method]
        for name in METRIC_NAMES:
            mean, std = s.by_fold[name]
            row += [f"{mean:.6f}", f"{std:.6f}"]
            cells.append(format_mean_std(mean, std))
        row.append(f"{s.failure_rate:.6f}")
        cells.append(f"{100 * s.failure_rate:.2f}%")
        csv_lines.append(",".join(row))
        md.append("| " + " | ".join(cells) + " |")
    return "\n".join(csv_lines) + "\n", "\n".join(md) + "\n"


def _write_overlays(run_dir: Path, manifest: DatasetManifest, plan: FoldPlan,
                    cfg: TrainConfig, limit: int) -> None:
    """Contour overlays for the first test images of each fold."""
    if limit <= 0:
        return
    for fold in range(plan.k):
        ckpt_path = run_dir / f"fold_{fold}" / "checkpoint.pt"
        if not ckpt_path.exists():
            continue
        ckpt = Checkpoint.load(ckpt_path)
        model = ckpt.build_model()
        ids = plan.test_ids(fold)[:limit]
        data = load_split(manifest, ids, cfg.input_size, model.divisor)
        with torch.no_grad():
            probs = model(data.images)
        for idx, sid in enumerate(ids):
            pred = binarize(probs[idx, 0].numpy())
            gt = data.targets[idx, 0].numpy().astype(np.uint8)
            safe = sid.replace("/", "_").replace(" ", "_")
            save_overlay(run_dir / "overlays" / f"fold{fold}_{safe}.png",
                         data.images[idx, 0].numpy(), pred, gt)


def cmd_prepare(args) -> int:
    out = _out_dir(args, "prepare")
    manifest = _ingest(args)
    manifest.save(out / "manifest.tsv")
    counts = manifest.class_counts
    detail = ", ".join(f"{counts[c]} {c}" for c in sorted(counts))
    print(f"{len(manifest)} samples ({detail})")
    if len(manifest) >= args.folds:
        plan = make_folds(manifest, k=args.folds, seed=args.seed,
                          class_filter=args.class_filter)
        plan.save(out / "folds.tsv")
        print(f"fold sizes: {plan.fold_sizes} (k={plan.k}, seed={plan.seed}, "
              f"filter={plan.class_filter or 'none'})")
    else:
        print("too few samples for a fold plan; wrote manifest only")
    _write_run_config(out, "prepare", args, {"manifest_fingerprint": manifest.fingerprint()})
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args, "ablate")
    manifest = DatasetManifest.load(args.manifest)
    plan = FoldPlan.load(args.folds_file)
    cfg = _train_config(args)
    variants = args.variants.split(",") if args.variants else list(VARIANT_NAMES)
    for name in variants:
        if name not in VARIANT_NAMES:
            raise ConfigError(f"unknown variant {name!r}; valid: {', '.join(VARIANT_NAMES)}")
    reports = []
    for name in variants:
        arch = _arch_for_variant(args, name)
        run_dir = out / name
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "arch.cfg").write_text(arch.to_text())
        print(f"[ablate] cross-validating {name} "
              f"(k={plan.k}, epochs={cfg.epochs}, input={cfg.input_size})", flush=True)
        report = cross_validate(arch, manifest, plan, cfg, out_dir=run_dir,
                                method=name, jobs=args.jobs)
        _write_overlays(run_dir, manifest, plan, cfg, args.overlays)
        reports.append(report)
        mean, std = report.summary.by_fold["dice"]
        print(f"[ablate] {name}: dice {format_mean_std(mean, std)}")
    csv_text, md_text = _summary_table(reports)
    (out / "ablation_table.csv").write_text(csv_text)
    (out / "ablation_table.md").write_text(md_text)
    _write_run_config(out, "ablate", args, {"fold_plan": plan.fingerprint()})
    print(f"[ablate] wrote {out / 'ablation_table.csv'}")
    return 0


def cmd_depth_sweep(args) -> int:
    out = _out_dir(args, "depth-sweep")
    manifest = DatasetManifest.load(args.manifest)
    plan = FoldPlan.load(args.folds_file)
    cfg = _train_config(args)
    depths = [int(d) for d in args.depths.split(",")]
    for depth in depths:
        if depth < 3 or depth % 2 == 0:
            raise ConfigError(f"depths must be odd integers >= 3, got {depth}")
    rows = []
    for depth in depths:
        backbone = BackboneConfig(depth=depth,
                                  channels=ChannelSchedule(base_width=args.base_width))
        arch = NUNetConfig(backbone=backbone, input_size=args.input_size, seed=args.seed)
        print(f"[depth-sweep] depth {depth}", flush=True)
        report = cross_validate(arch, manifest, plan, cfg, out_dir=out / f"depth_{depth}",
                                method=f"depth{depth}", jobs=args.jobs)
        summary = report.summary
        rows.append({"depth": depth, **{m: summary.by_fold[m] for m in METRIC_NAMES}})
    lines = ["depth," + ",".join(f"{m}_mean,{m}_std" for m in METRIC_NAMES)]
    for row in rows:
        cells = [str(row["depth"])]
        for m in METRIC_NAMES:
            mean, std = row[m]
            cells += [f"{mean:.6f}", f"{std:.6f}"]
        lines.append(",".join(cells))
    (out / "depth_sweep.csv").write_text("\n".join(lines) + "\n")
    if len(depths) >= 2:
        series = {m: [row[m][0] for row in rows] for m in METRIC_NAMES}
        depth_sweep_plot(depths, series, out / "depth_sweep.png")
    else:
        print("[depth-sweep] single depth; skipping the plot")
    _write_run_config(out, "depth-sweep", args)
    print(f"[depth-sweep] wrote {out / 'depth_sweep.csv'}")
    return 0


def cmd_complexity(args) -> int:
    out = _out_dir(args, "complexity")
    variants = args.variants.split(",") if args.variants else list(VARIANT_NAMES)
    rows = complexity_table(variants, input_size=args.input_size,
                            base_width=args.base_width)
    report = calibration_report(rows, input_size=args.input_size)
    print(report)
    (out / "calibration.txt").write_text(report)
    lines = ["variant,params,param_multiple,flops_macs,flop_multiple"]
    for row in rows:
        lines.append(f"{row['variant']},{row['params']},{row['param_multiple']:.4f},"
                     f"{row['flops']},{row['flop_multiple']:.4f}")
    (out / "complexity.csv").write_text("\n".join(lines) + "\n")
    _write_run_config(out, "complexity", args)
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args, "eval")
    report = EvalReport.load(args.run)
    csv_text, md_text = _summary_table([report])
    (out / "metrics.csv").write_text(csv_text)
    (out / "metrics.md").write_text(md_text)
    failure_rate_chart({report.method: report.summary.failure_rate},
                       out / "failure_rates.png")
    print(md_text)
    _write_run_config(out, "eval", args)
    return 0


def cmd_external(args) -> int:
    out = _out_dir(args, "external")
    if args.manifest is None and args.data_root is None:
        raise ConfigError("external needs --manifest or --data-root for the external corpus")
    manifest = (DatasetManifest.load(args.manifest) if args.manifest
                else _ingest(args))
    run = Path(args.run)
    checkpoints = sorted(run.glob("fold_*/checkpoint.pt"))
    if not checkpoints:
        raise ConfigError(f"no fold_*/checkpoint.pt found under {run}")
    cfg = _train_config(args)
    report = external_validate(list(checkpoints), manifest, cfg,
                               method=args.method or f"{run.name}-external",
                               out_dir=out)
    csv_text, md_text = _summary_table([report])
    (out / "metrics.csv").write_text(csv_text)
    (out / "metrics.md").write_text(md_text)
    failure_rate_chart({report.method: report.summary.failure_rate},
                       out / "failure_rates.png")
    print(md_text)
    _write_run_config(out, "external", args)
    return 0


def cmd_compare(args) -> int:
    out = _out_dir(args, "compare")
    reports = [EvalReport.load(d) for d in args.runs]
    fingerprints = " ".join(f"{r.method}={r.config_fingerprint}" for r in reports)
    table = build_comparison_table(reports, reference_method=args.reference,
                                   alpha=args.alpha, pairing=args.pairing,
                                   header_comment=f"config: {fingerprints}")
    (out / "comparison.csv").write_text(table.to_csv())
    (out / "comparison.md").write_text(table.to_markdown())
    failure_rate_chart({r.method: r.summary.failure_rate for r in reports},
                       out / "failure_rates.png")
    print(table.to_markdown())
    _write_run_config(out, "compare", args)
    print(f"[compare] wrote {out / 'comparison.md'}")
    return 0


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-root", required=True, help="dataset root directory")
    p.add_argument("--dataset", choices=("busi", "flat"), default="busi")
    p.add_argument("--include-normal", action="store_true",
                   help="keep normal-class images (excluded by default)")
    p.add_argument("--images-dir", default="images", help="flat layout: image subdirectory")
    p.add_argument("--masks-dir", default="masks", help="flat layout: mask subdirectory")
    p.add_argument("--class-file", default=None,
                   help="optional TSV (id<TAB>class) assigning class labels")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="manifest.tsv from `prepare`")
    p.add_argument("--folds-file", required=True, help="folds.tsv from `prepare`")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=12)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--base-width", type=int, default=32)
    p.add_argument("--device", default="cpu")
    p.add_argument("--jobs", type=int, default=1, help="fold worker processes")
    p.add_argument("--overlays", type=int, default=2,
                   help="contour overlays per fold (0 disables)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nunet",
                                     description="nested U-net segmentation toolkit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="output directory "
                        "(default: runs/<command>-<timestamp>)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest a corpus and write manifest + fold plan")
    _add_data_flags(p)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--class-filter", choices=("benign", "malignant", "normal"), default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("ablate", help="cross-validate the architecture variant ladder")
    _add_train_flags(p)
    p.add_argument("--variants", default=None,
                   help=f"comma list from {{{','.join(VARIANT_NAMES)}}} (default: all)")
    p.add_argument("--arch", default=None,
                   help="architecture config file overriding the variant definitions")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("depth-sweep", help="cross-validate plain backbones over depths")
    _add_train_flags(p)
    p.add_argument("--depths", default="9,11,13,15,17", help="comma list of odd depths")
    p.set_defaults(func=cmd_depth_sweep)

    p = sub.add_parser("complexity", help="params/FLOPs calibration table")
    p.add_argument("--variants", default=None)
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--base-width", type=int, default=32)
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("eval", help="re-report a completed run directory")
    p.add_argument("--run", required=True, help="run directory with records.csv/summary.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("external", help="score a trained run's checkpoints on another corpus")
    p.add_argument("--run", required=True, help="training run directory (fold_*/checkpoint.pt)")
    p.add_argument("--manifest", default=None, help="manifest.tsv of the external corpus")
    _add_data_flags_optional(p)
    p.add_argument("--method", default=None)
    p.add_argument("--epochs", type=int, default=1, help=argparse.SUPPRESS)
    p.add_argument("--batch-size", type=int, default=4, help=argparse.SUPPRESS)
    p.add_argument("--learning-rate", type=float, default=0.001, help=argparse.SUPPRESS)
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_external)

    p = sub.add_parser("compare", help="significance-tested comparison of completed runs")
    p.add_argument("--runs", nargs="+", required=True, help="run directories to compare")
    p.add_argument("--reference", default=None,
                   help="reference method for paired tests (default: last run)")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--pairing", choices=("image", "fold"), default="image")
    p.add_argument("--jaccard-floor", type=float, default=DEFAULT_JACCARD_FLOOR)
    p.set_defaults(func=cmd_compare)
    return parser


def _add_data_flags_optional(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-root", default=None, help="external dataset root")
    p.add_argument("--dataset", choices=("busi", "flat"), default="flat")
    p.add_argument("--include-normal", action="store_true")
    p.add_argument("--images-dir", default="images")
    p.add_argument("--masks-dir", default="masks")
    p.add_argument("--class-file", default=None)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NUNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
