"""Command-line entry point: ``cisunet {train,evaluate,predict,info,gen-synth}``.

Errors exit with status 1 (2 for usage errors) and print one line to stderr:
``error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .backbone import count_parameters, parameter_breakdown, CISUNet
from .config import (PRESET_NAMES, AttentionVariant, ConfigError, DataConfig, ModelConfig,
                     TrainConfig, load_config, preset)
from .training import (TrainingError, evaluate, load_cases, load_checkpoint, model_from_checkpoint,
                       predict_volume, train)


def _resolve_configs(args) -> tuple[ModelConfig, TrainConfig, DataConfig]:
    if getattr(args, "config", None):
        model, train_cfg, data_cfg = load_config(args.config)
    else:
        model, train_cfg, data_cfg = ModelConfig(), TrainConfig(), DataConfig()
    overrides = {}
    if getattr(args, "preset", None):
        base = preset(args.preset)
        overrides.update(stage_depths=base.stage_depths, stage_channels=base.stage_channels,
                         embed_dim=base.embed_dim)
    if getattr(args, "attention", None):
        overrides["attention_variant"] = AttentionVariant(args.attention)
    if getattr(args, "classes", None):
        overrides["num_classes"] = args.classes
    if overrides:
        model = replace(model, **overrides)
    if getattr(args, "seed", None) is not None:
        train_cfg = replace(train_cfg, rng_seed=args.seed)
    if getattr(args, "iterations", None):
        train_cfg = replace(train_cfg, iterations=args.iterations)
    return model, train_cfg, data_cfg


def cmd_info(args) -> int:
    model_cfg, _, _ = _resolve_configs(args)
    with torch.device("meta"):
        model = CISUNet(model_cfg)
    breakdown = parameter_breakdown(model)
    total = count_parameters(model)
    name = args.preset or "custom"
    print(f"variant: {name}")
    print(f"stage_depths (L): {model_cfg.stage_depths}")
    print(f"stage_channels (C): {model_cfg.stage_channels}")
    print(f"embed_dim (F): {model_cfg.embed_dim}")
    print(f"attention: {model_cfg.attention_variant.value}")
    print(f"window_size: {model_cfg.window_size} shift_size: {model_cfg.shift_size} "
          f"num_heads: {model_cfg.num_heads}")
    print(f"num_classes: {model_cfg.num_classes}")
    print(f"total_parameters: {total} ({total / 1e6:.3f}M)")
    for key, n in breakdown.items():
        print(f"  {key}: {n}")
    return 0


def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    rng = np.random.default_rng(args.seed or 0)
    for i in range(args.count):
        seed = int(rng.integers(2 ** 31))
        img, lbl = D.synthetic_phantom(seed, args.size, args.classes or 3)
        D.write_volume(img, out / "images" / f"phantom_{i:03d}.nii.gz")
        D.write_volume(lbl, out / "labels" / f"phantom_{i:03d}.nii.gz")
    print(f"wrote {args.count} phantoms to {out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg, data_cfg = _resolve_configs(args)
    cases = load_cases(args.data_dir, data_cfg)
    if not cases:
        raise TrainingError(f"no cases found under {args.data_dir} (expected images/ and labels/)")
    val_dir = Path(args.data_dir) / "val"
    val_cases = load_cases(val_dir, data_cfg) if val_dir.is_dir() else None
    _, tlog = train(model_cfg, train_cfg, data_cfg, cases, args.out, val_cases=val_cases)
    print(f"trained {len(tlog.records)} iterations; final loss {tlog.losses[-1]:.6f}; "
          f"checkpoint {Path(args.out) / 'checkpoint.pt'}")
    return 0


def _patch_size(args, train_cfg: TrainConfig):
    return tuple(args.patch) * 3 if getattr(args, "patch", None) else train_cfg.patch_size


def cmd_evaluate(args) -> int:
    _, train_cfg, data_cfg = _resolve_configs(args)
    if args.identity:
        model = None
    else:
        if not args.ckpt:
            raise ConfigError("--ckpt is required unless --identity is given")
        model = model_from_checkpoint(args.ckpt)
    report = evaluate(model, args.data_dir, data_cfg, _patch_size(args, train_cfg),
                      report_path=args.out, identity=args.identity, num_classes=args.classes)
    if args.out is None:
        sys.stdout.write(report)
    else:
        print(f"report written to {args.out}")
    return 0


def cmd_predict(args) -> int:
    _, train_cfg, data_cfg = _resolve_configs(args)
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    image = D.read_volume(args.input)
    pred = predict_volume(model, image, data_cfg, _patch_size(args, train_cfg))
    D.write_volume(pred, args.out)
    print(f"prediction written to {args.out}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: usage: {' '.join(message.split())}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cisunet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--seed", type=int)
        if model:
            p.add_argument("--preset", choices=PRESET_NAMES)
            p.add_argument("--attention", choices=[v.value for v in AttentionVariant])
            p.add_argument("--classes", type=int, help="number of classes incl. background")

    p = sub.add_parser("info", help="print the architecture and parameter counts")
    common(p)
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("gen-synth", help="write synthetic phantoms in the dataset layout")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a network on a dataset directory")
    common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    common(p, model=False)
    p.add_argument("--ckpt")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.add_argument("--patch", type=int, nargs=1, help="sliding-window patch edge")
    p.add_argument("--classes", type=int, help="class count for --identity")
    p.add_argument("--identity", action="store_true",
                   help="score the ground truth against itself (no model)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="segment one NIfTI volume")
    common(p, model=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, nargs=1)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        kind = "config"
        msg = str(exc)
    except (FileNotFoundError, OSError) as exc:
        kind = "io"
        msg = str(exc)
    except (ValueError, RuntimeError) as exc:
        kind = type(exc).__name__
        msg = str(exc)
    print(f"error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
