"""Command-line entry point: ``suft <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_run_config
from .data import (
    DataError,
    DatasetManifest,
    DegradationSpec,
    ManifestRecord,
    make_pair,
    normalize_depth,
    read_depth_file,
    read_manifest,
    read_rgb_file,
    write_depth_png,
    write_manifest,
)
from .evaluation import (
    baseline_bicubic,
    evaluate,
    export_uncertainty_png,
    write_report,
)
from .network import pixel_space_uncertainty
from .training import CheckpointError, fit, load_checkpoint, model_from_checkpoint

log = logging.getLogger("suft")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

ABLATION_VARIANTS = {
    "baseline": ("pre_upsample", False),
    "iterative": ("iterative", False),
    "uncertainty": ("pre_upsample", True),
    "full": ("iterative", True),
}


class UsageError(Exception):
    pass


def _run_config(args, need_epochs=False) -> RunConfig:
    cfg = load_run_config(args.config, args.set or (), args.seed)
    if need_epochs and not cfg.epochs_given:
        raise UsageError("the epoch count is required (set train.epochs in the config or --set epochs=N)")
    return cfg


def _manifest(path, what: str) -> DatasetManifest:
    if not path:
        raise UsageError(f"no {what} manifest given (set data.{what}_manifest)")
    return read_manifest(path)


def _checkpoint(path):
    if not path:
        raise UsageError("no checkpoint given")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = Path(args.out or (cfg.out_dir if cfg else "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ----------------------------------------------------------------


def cmd_toy(args) -> int:
    from .toyset import write_toy_dataset

    paths = write_toy_dataset(args.out, args.count, args.size, args.seed if args.seed is not None else 0,
                              args.d_max)
    print(f"wrote {args.count} scenes; manifests: {paths['train']}, {paths['test']}")
    return EXIT_OK


def scan_pairs(root: Path):
    """Find ``<id>_depth.{png,bin}`` / ``<id>_rgb.png`` (optional ``<id>_lr.*``) triples."""
    pairs = []
    for depth in sorted(root.rglob("*_depth.*")):
        if depth.suffix.lower() not in (".png", ".bin"):
            continue
        stem = depth.name[: -len("_depth" + depth.suffix)]
        rgb = depth.with_name(f"{stem}_rgb.png")
        if not rgb.is_file():
            log.warning("skipping %s: no matching %s", depth, rgb.name)
            continue
        lr = next((p for p in (depth.with_name(f"{stem}_lr{ext}") for ext in (".png", ".bin"))
                   if p.is_file()), None)
        pairs.append((depth, rgb, lr))
    return pairs


def cmd_prepare(args) -> int:
    root = Path(args.data_root or os.environ.get("SUFT_DATA_ROOT", ""))
    if not str(root) or not root.is_dir():
        raise UsageError(f"data root not found: {root or '(unset; pass --data-root or SUFT_DATA_ROOT)'}")
    records = []
    for depth, rgb, lr in scan_pairs(root):
        record = ManifestRecord(str(depth), str(rgb), args.unit_to_cm, str(lr) if lr else None)
        try:
            make_pair(record, DegradationSpec(args.scale, "provided_lr" if lr else "synthetic_bicubic"))
        except (DataError, ValueError) as exc:
            raise DataError(f"{depth}: {exc}") from exc
        records.append(record)
    if not records:
        raise DataError(f"no depth/rgb pairs found under {root}")
    n_train = len(records) if args.train_count is None else args.train_count
    if not 0 <= n_train <= len(records):
        raise UsageError(f"--train-count {n_train} outside [0, {len(records)}]")
    out = _out_dir(args)
    for split, subset in (("train", records[:n_train]), ("test", records[n_train:])):
        write_manifest(out / f"{split}.txt", DatasetManifest(subset, split, args.d_max))
    print(f"{n_train} train / {len(records) - n_train} test records -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args, need_epochs=True)
    manifest = _manifest(cfg.train_manifest, "train")
    resume = _checkpoint(args.resume) if args.resume else None
    net_cfg = resume.network if resume else cfg.network
    spec = DegradationSpec(net_cfg.scale, cfg.degradation)
    out = _out_dir(args, cfg)
    ckpt = fit(net_cfg, cfg.train, manifest, spec, out, resume)
    print(f"trained to epoch {ckpt.state.epoch} ({ckpt.state.step} steps); checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    ckpt = _checkpoint(args.checkpoint or cfg.checkpoint)
    manifest = _manifest(cfg.test_manifest, "test")
    spec = DegradationSpec(ckpt.network.scale, cfg.degradation)
    out = _out_dir(args, cfg)
    model = model_from_checkpoint(ckpt)
    report = evaluate(model, ckpt.network, manifest, spec, out / "maps" if args.export else None)
    write_report(out / "report.txt", report)
    print(f"mean RMSE {report.mean_rmse:.4f} {report.unit} over {len(report.per_sample)} samples")
    if args.baseline:
        base = baseline_bicubic(manifest, spec)
        write_report(out / "report_bicubic.txt", base)
        print(f"bicubic baseline {base.mean_rmse:.4f} {base.unit}")
    if report.failures:
        log.error("%d samples failed", len(report.failures))
        return EXIT_RUNTIME
    return EXIT_OK


def _lr_inputs(ckpt, depth_path, rgb_path, unit_to_cm):
    depth = read_depth_file(depth_path, unit_to_cm)
    guidance = read_rgb_file(rgb_path)
    s = ckpt.network.scale
    if guidance.shape != (depth.shape[0] * s, depth.shape[1] * s):
        raise DataError(f"RGB {guidance.shape} is not x{s} of depth {depth.shape}")
    d = torch.from_numpy(normalize_depth(depth, ckpt.d_max).astype(np.float32))[None, None]
    g = torch.from_numpy(guidance.values.astype(np.float32))[None]
    return d, g


def cmd_infer(args) -> int:
    ckpt = _checkpoint(args.checkpoint)
    if args.scale is not None and args.scale != ckpt.network.scale:
        raise UsageError(f"--scale {args.scale} does not match checkpoint scale {ckpt.network.scale}")
    d, g = _lr_inputs(ckpt, args.depth, args.rgb, args.unit_to_cm)
    model = model_from_checkpoint(ckpt)
    with torch.no_grad():
        pred = model(d, g).depth_sr[0, 0].double().numpy() * ckpt.d_max
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_depth_png(out, np.maximum(pred, 0.0), args.unit_to_cm)
    print(f"wrote {out}")
    return EXIT_OK


def run_ablation(cfg: RunConfig, out: Path, seeds=None) -> dict[str, list[float]]:
    """Train and evaluate the four fusion/uncertainty variants; returns mean RMSE per seed."""
    train_m = _manifest(cfg.train_manifest, "train")
    test_m = _manifest(cfg.test_manifest, "test")
    seeds = seeds or [cfg.train.seed]
    results: dict[str, list[float]] = {name: [] for name in ABLATION_VARIANTS}
    for name, (mode, unc) in ABLATION_VARIANTS.items():
        for seed in seeds:
            net = dataclasses.replace(cfg.network, fusion_mode=mode, uncertainty=unc, seed=seed)
            train = dataclasses.replace(cfg.train, seed=seed, checkpoint_every=0)
            spec = DegradationSpec(net.scale, cfg.degradation)
            ckpt = fit(net, train, train_m, spec)
            report = evaluate(model_from_checkpoint(ckpt), net, test_m, spec)
            suffix = "" if len(seeds) == 1 else f"_seed{seed}"
            write_report(out / f"ablation_{name}{suffix}.txt", report)
            results[name].append(report.mean_rmse)
            log.info("ablation %s seed %d: %.4f", name, seed, report.mean_rmse)
    return results


def ablation_table(results: dict[str, list[float]], unit: str = "cm") -> str:
    mark = lambda b: "x" if b else " "  # noqa: E731
    lines = [f"baseline\titerative_upsampling\tsymmetric_uncertainty\tmedian_rmse_{unit}"]
    for name, (mode, unc) in ABLATION_VARIANTS.items():
        lines.append(f"x\t{mark(mode == 'iterative')}\t{mark(unc)}\t{float(np.median(results[name])):.4f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = _run_config(args, need_epochs=True)
    out = _out_dir(args, cfg)
    seeds = [int(x) for x in args.seeds.split(",")] if args.seeds else None
    results = run_ablation(cfg, out, seeds)
    table = ablation_table(results)
    (out / "ablation_table.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_uncertainty_demo(args) -> int:
    ckpt = _checkpoint(args.checkpoint)
    if args.manifest:
        manifest = read_manifest(args.manifest)
        records = {r.sample_id: r for r in manifest.records}
        sample = args.sample or next(iter(records))
        record = records.get(sample)
        if record is None:
            if not sample.isdigit() or int(sample) >= len(manifest.records):
                raise UsageError(f"sample {sample!r} not in {args.manifest}")
            record = manifest.records[int(sample)]
        pair = make_pair(record, DegradationSpec(ckpt.network.scale, ckpt.degradation))
        d = torch.from_numpy(normalize_depth(pair.depth_lr, ckpt.d_max).astype(np.float32))[None, None]
        g = torch.from_numpy(pair.guidance.values.astype(np.float32))[None]
    elif args.depth and args.rgb:
        d, g = _lr_inputs(ckpt, args.depth, args.rgb, args.unit_to_cm)
    else:
        raise UsageError("give either --manifest [--sample] or --depth and --rgb")
    sigma = pixel_space_uncertainty(model_from_checkpoint(ckpt), d, g)[0, 0].double().numpy()
    sigma *= ckpt.d_max
    out = Path(args.out)
    vmax = export_uncertainty_png(out, sigma)
    out.with_suffix(".txt").write_text(f"colormap\tviridis\nsigma\t0\t{vmax!r}\n")
    print(f"wrote {out} (max flip disagreement {vmax:.4g})")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="suft", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key = value run configuration file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory or file")
        return p

    p = common(sub.add_parser("toy", help="write a synthetic toy dataset"), config=False)
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--d-max", type=float, default=10.0)
    p.set_defaults(func=cmd_toy)

    p = common(sub.add_parser("prepare", help="scan a data root and write train/test manifests"),
               config=False)
    p.add_argument("--data-root", help="defaults to $SUFT_DATA_ROOT")
    p.add_argument("--train-count", type=int, help="first N pairs go to train, the rest to test")
    p.add_argument("--d-max", type=float, default=10.0)
    p.add_argument("--unit-to-cm", type=float, default=100.0)
    p.add_argument("--scale", type=int, default=4, help="scale used to validate pairs")
    p.set_defaults(func=cmd_prepare)

    p = common(sub.add_parser("train"))
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval"))
    p.add_argument("--checkpoint")
    p.add_argument("--export", action="store_true", help="write prediction/error/uncertainty PNGs")
    p.add_argument("--baseline", action="store_true", help="also report the bicubic baseline")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("infer"), config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--depth", required=True, help="LR depth (16-bit PNG or raw float)")
    p.add_argument("--rgb", required=True, help="HR guidance PNG")
    p.add_argument("--scale", type=int)
    p.add_argument("--unit-to-cm", type=float, default=100.0)
    p.set_defaults(func=cmd_infer)

    p = common(sub.add_parser("ablate", help="train and score the four fusion/uncertainty variants"))
    p.add_argument("--seeds", help="comma-separated seeds; the table reports the median")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("uncertainty-demo"), config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--sample", help="sample id or index within --manifest")
    p.add_argument("--depth")
    p.add_argument("--rgb")
    p.add_argument("--unit-to-cm", type=float, default=100.0)
    p.set_defaults(func=cmd_uncertainty_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "out", None) is None and args.command in ("infer", "uncertainty-demo", "toy"):
        parser.error(f"{args.command} requires --out")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"suft {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, RuntimeError, ValueError, OSError) as exc:
        print(f"suft {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
