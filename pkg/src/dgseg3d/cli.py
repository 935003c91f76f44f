"""Command-line interface.

Subcommands: generate, augment, train, eval, ablate, report.  Exit
codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments, synthgen
from .cinmix import MixConfig, cinmix, cuboid_mix, mix3d
from .clustering import DbscanParams
from .encoder import save_model, load_model
from .errors import ConfigError, DgsegError, IoFailure, ValidationError
from .evaluation import confusion_matrix, EvalResult, infer
from .pattern_aug import ScanSimParams, virtual_scan
from .prototypes import PrototypeBank, load_bank, save_bank
from .report import EvalRow, read_results_csv, report
from .scene import NUM_CLASSES, load_manifest, load_scene, load_split, save_manifest, save_scene
from .training import TrainConfig, train, write_train_log, _rng
from .experiments import _eval_scenes

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage errors to 1
        raise ConfigError(message)


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def _style_from_dict(data: dict) -> synthgen.SceneStyle:
    data = dict(data)
    if "scan" in data and isinstance(data["scan"], dict):
        data["scan"] = ScanSimParams(**data["scan"])
    for key in ("clutter_range", "tucked_chairs", "room_side"):
        if key in data and isinstance(data[key], list):
            data[key] = tuple(data[key])
    base = (
        synthgen.target_real_style()
        if data.get("name") == "target_real"
        else synthgen.source_clean_style()
    )
    try:
        return replace(base, **data)
    except TypeError as exc:
        raise ConfigError(f"bad scene style: {exc}") from exc


def _cmd_generate(args) -> int:
    cfg_dict = _load_json(args.config)
    kwargs = {}
    for key in ("train", "val", "test"):
        value = getattr(args, key) if getattr(args, key) is not None else cfg_dict.get(key)
        if value is not None:
            kwargs[key] = int(value)
    if "source_style" in cfg_dict:
        kwargs["source_style"] = _style_from_dict(cfg_dict["source_style"])
    if "target_style" in cfg_dict:
        kwargs["target_style"] = _style_from_dict(cfg_dict["target_style"])
    unknown = set(cfg_dict) - {"train", "val", "test", "source_style", "target_style"}
    if unknown:
        raise ConfigError(f"unknown generate config keys: {sorted(unknown)}")
    ds_cfg = synthgen.DatasetConfig(**kwargs)
    splits = synthgen.generate_dataset(ds_cfg, args.out, args.seed)
    total = sum(len(v) for v in splits.values())
    print(f"wrote {total} scenes to {args.out}")
    return 0


def _scan_params_from_args(args) -> ScanSimParams:
    return ScanSimParams(
        num_cameras=args.scan_cameras,
        camera_height=args.scan_camera_height,
        azimuth_bins=args.scan_azimuth_bins,
        elevation_bins=args.scan_elevation_bins,
        noise_sigma=args.scan_noise_sigma,
        keep_prob=args.scan_keep_prob,
    )


def _cmd_augment(args) -> int:
    in_dir = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(in_dir)
    if args.split not in manifest:
        raise ValidationError(f"{in_dir}: manifest has no split {args.split!r}")
    mix_cfg = MixConfig(
        cell_size=args.cell_size,
        num_instances=args.num_instances,
        dbscan=DbscanParams(args.dbscan_eps, args.dbscan_min_pts),
    )
    scan_params = _scan_params_from_args(args)
    for split, names in manifest.items():
        scenes = [load_scene(in_dir / name) for name in names]
        for idx, (name, pc) in enumerate(zip(names, scenes)):
            if split == args.split:
                rng = _rng(args.seed, 21, idx)
                if args.mode == "cinmix":
                    vendor = scenes[int(rng.integers(len(scenes)))]
                    pc = cinmix(vendor, pc, mix_cfg, rng)
                elif args.mode == "mix3d":
                    vendor = scenes[int(rng.integers(len(scenes)))]
                    pc = mix3d(pc, vendor)
                elif args.mode == "cuboid":
                    vendor = scenes[int(rng.integers(len(scenes)))]
                    pc, _ = cuboid_mix(pc, vendor, rng=rng)
                if args.scan_sim:
                    pc = virtual_scan(pc, scan_params, rng)
            save_scene(pc, out_dir / name)
    save_manifest(out_dir, manifest)
    print(f"augmented split {args.split!r} ({args.mode}) into {out_dir}")
    return 0


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_dict(_load_json(args.config))
    if args.data is not None:
        cfg = replace(cfg, data_dir=str(args.data))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(cfg, log_path=out_dir / "train_log.csv")
    save_model(result.model, out_dir / "model.bin")
    bank = result.bank or PrototypeBank.empty(
        cfg.embed_dim, cfg.num_prototypes, momentum=cfg.proto_momentum, sharpness=cfg.sharpness
    )
    save_bank(bank, out_dir / "bank.bin")
    final = result.history[-1]
    print(
        f"trained {cfg.epochs} epochs: ce={final['ce_loss']:.4f} "
        f"proto={final['proto_loss']:.4f}; artifacts in {out_dir}"
    )
    return 0


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    bank = load_bank(args.bank) if args.bank else None
    scenes = [pc for _, pc in load_split(args.data, args.split)]
    if not scenes:
        raise ValidationError(f"split {args.split!r} is empty")
    scenes = _eval_scenes(scenes, args.eval_points, args.seed)
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for pc in scenes:
        confusion += confusion_matrix(infer(model, bank, pc, args.rectify), pc.labels)
    result = EvalResult.from_confusion(confusion)
    row = EvalRow(args.method_name, args.split, result.per_class_iou, result.miou)
    report([row], args.out)
    print(f"mIoU on {args.split}: {result.miou:.4f} (report in {args.out})")
    return 0


def _cmd_ablate(args) -> int:
    base = TrainConfig.from_dict(_load_json(args.config))
    rows = experiments.run_ablation(
        base,
        args.data,
        args.out,
        master_seed=args.seed,
        num_seeds=args.seeds,
        include_nonparam=args.nonparam_only,
        eval_points=args.eval_points,
    )
    print(f"ablation finished: {len(rows)} result rows in {args.out}")
    return 0


def _cmd_report(args) -> int:
    rows = read_results_csv(args.results)
    written = report(rows, args.out)
    print(f"wrote {len(written)} report files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    # note: parent parsers share Action objects between subparsers, so the
    # per-command --seed (whose default varies) is added per subparser
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", default="out", help="output directory")

    def add_seed(sub_parser, default=0):
        sub_parser.add_argument("--seed", type=int, default=default, help="master random seed")

    parser = _Parser(prog="dgseg3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="generate a synthetic dataset")
    add_seed(p)
    p.add_argument("--train", type=int, default=None, help="source-style training scenes")
    p.add_argument("--val", type=int, default=None, help="source-style validation scenes")
    p.add_argument("--test", type=int, default=None, help="target-style test scenes")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("augment", parents=[common], help="materialize an augmented dataset")
    add_seed(p)
    p.add_argument("--data", required=True, help="input dataset directory")
    p.add_argument("--mode", choices=["cinmix", "mix3d", "cuboid", "none"], default="cinmix")
    p.add_argument("--split", default="train", help="split to augment (others are copied)")
    p.add_argument("--cell-size", type=float, default=0.10)
    p.add_argument("--num-instances", type=int, default=None)
    p.add_argument("--dbscan-eps", type=float, default=0.2)
    p.add_argument("--dbscan-min-pts", type=int, default=100)
    p.add_argument("--scan-sim", action="store_true", help="also apply the virtual scan")
    p.add_argument("--scan-cameras", type=int, default=4)
    p.add_argument("--scan-camera-height", type=float, default=1.5)
    p.add_argument("--scan-azimuth-bins", type=int, default=360)
    p.add_argument("--scan-elevation-bins", type=int, default=180)
    p.add_argument("--scan-noise-sigma", type=float, default=0.01)
    p.add_argument("--scan-keep-prob", type=float, default=0.95)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", parents=[common], help="train a model")
    add_seed(p, default=None)  # the config file's seed wins unless --seed is given
    p.add_argument("--data", default=None, help="dataset directory (overrides config)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained model")
    add_seed(p)
    p.add_argument("--model", required=True)
    p.add_argument("--bank", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--method-name", default="model")
    p.add_argument("--eval-points", type=int, default=None, help="subsample eval scenes")
    p.add_argument("--rectify", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    add_seed(p)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=1, help="runs per configuration")
    p.add_argument("--eval-points", type=int, default=2048)
    p.add_argument("--nonparam-only", action="store_true", help="add the prototype-only row")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("report", parents=[common], help="re-render tables and charts")
    add_seed(p)
    p.add_argument("--results", required=True, help="a previously written results.csv")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except IoFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, DgsegError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
