"""Multi-configuration, multi-seed experiment harness.

Runs the augmentation/prototype grids used for the generalization
studies: every configuration trains on the same scenes with paired
seeds, evaluates on the held-out source-style and target-style splits,
and the aggregated rows feed the report writer.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import IoFailure, ValidationError
from .evaluation import confusion_matrix, EvalResult, infer, infer_prototype_only
from .report import EvalRow, report
from .scene import NUM_CLASSES, PointCloud, load_split
from .training import TrainConfig, TrainResult, train, _rng, _sample_points

logger = logging.getLogger(__name__)

_SALT_EVAL_POINTS = 8
_SALT_RUN_SEED = 9


@dataclass(frozen=True)
class ExperimentSpec:
    """One grid cell: augmentation mode plus prototype usage."""

    name: str
    mix_mode: str = "none"
    proto_train: bool = False
    rectify: bool = False
    nonparam_only: bool = False

    def __post_init__(self):
        if self.rectify and not self.proto_train:
            raise ValidationError("rectification requires prototype training")
        if self.nonparam_only and not self.proto_train:
            raise ValidationError("the non-parametric row requires prototype training")


ABLATION_GRID = (
    ExperimentSpec("base", "none", False, False),
    ExperimentSpec("base+proto", "none", True, False),
    ExperimentSpec("base+proto+rect", "none", True, True),
    ExperimentSpec("cinmix", "cinmix", False, False),
    ExperimentSpec("cinmix+proto", "cinmix", True, False),
    ExperimentSpec("cinmix+proto+rect", "cinmix", True, True),
)

NONPARAM_SPEC = ExperimentSpec("cinmix+nonparam", "cinmix", True, False, nonparam_only=True)

AUGMENTATION_GRID = (
    ExperimentSpec("no_mix+proto+rect", "none", True, True),
    ExperimentSpec("mix3d+proto+rect", "mix3d", True, True),
    ExperimentSpec("cuboid+proto+rect", "cuboid", True, True),
    ExperimentSpec("cinmix+proto+rect", "cinmix", True, True),
)


@dataclass
class RunRecord:
    """One trained configuration under one seed."""

    spec: ExperimentSpec
    seed_index: int
    results: dict[str, EvalResult]
    train_seconds: float


def derive_seeds(master_seed: int, count: int) -> list[int]:
    return [
        int(np.random.SeedSequence([master_seed, _SALT_RUN_SEED, i]).generate_state(1)[0])
        for i in range(count)
    ]


def _eval_scenes(
    scenes: list[PointCloud], eval_points: int | None, master_seed: int
) -> list[PointCloud]:
    """Deterministic per-scene subsample shared by every run so that all
    configurations are scored on identical points."""
    if eval_points is None:
        return scenes
    return [
        _sample_points(pc, eval_points, _rng(master_seed, _SALT_EVAL_POINTS, idx))
        for idx, pc in enumerate(scenes)
    ]


def _evaluate_run(result: TrainResult, spec: ExperimentSpec, scenes: list[PointCloud]) -> EvalResult:
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for pc in scenes:
        if spec.nonparam_only and result.bank is not None:
            pred = infer_prototype_only(result.model, result.bank, pc)
        else:
            pred = infer(result.model, result.bank, pc, rectify_probs=spec.rectify)
        confusion += confusion_matrix(pred, pc.labels)
    return EvalResult.from_confusion(confusion)


def run_experiment(
    base_cfg: TrainConfig,
    specs: list[ExperimentSpec] | tuple[ExperimentSpec, ...],
    train_scenes: list[PointCloud],
    eval_sets: dict[str, list[PointCloud]],
    master_seed: int,
    num_seeds: int,
    eval_points: int | None = 2048,
) -> list[RunRecord]:
    """Train every spec under every derived seed and score it on every
    eval set.  Seeds are paired across specs."""
    seeds = derive_seeds(master_seed, num_seeds)
    sampled_sets = {
        name: _eval_scenes(scenes, eval_points, master_seed) for name, scenes in eval_sets.items()
    }
    records: list[RunRecord] = []
    for spec in specs:
        for seed_index, seed in enumerate(seeds):
            cfg = replace(
                base_cfg,
                seed=seed,
                mix_mode=spec.mix_mode,
                proto_enabled=spec.proto_train,
                nonparam_only=spec.nonparam_only,
            )
            start = time.perf_counter()
            result = train(cfg, scenes=train_scenes)
            elapsed = time.perf_counter() - start
            results = {
                name: _evaluate_run(result, spec, scenes)
                for name, scenes in sampled_sets.items()
            }
            logger.info(
                "%s seed %d: %s (%.1f s train)",
                spec.name,
                seed_index,
                " ".join(f"{n}={r.miou:.3f}" for n, r in results.items()),
                elapsed,
            )
            records.append(RunRecord(spec, seed_index, results, elapsed))
    return records


def aggregate_rows(records: list[RunRecord]) -> list[EvalRow]:
    """Mean per-class IoU and mean ± sd mIoU per (spec, eval set)."""
    rows: list[EvalRow] = []
    specs = []
    for rec in records:
        if rec.spec not in specs:
            specs.append(rec.spec)
    targets = list(records[0].results.keys()) if records else []
    for spec in specs:
        for target in targets:
            runs = [r.results[target] for r in records if r.spec == spec]
            ious = np.array([r.per_class_iou for r in runs])
            mious = np.array([r.miou for r in runs])
            sd = float(mious.std(ddof=1)) if len(mious) > 1 else 0.0
            rows.append(
                EvalRow(
                    spec.name,
                    target,
                    np.nanmean(ious, axis=0),
                    float(mious.mean()),
                    sd,
                )
            )
    return rows


def mean_miou(records: list[RunRecord], spec_name: str, target: str) -> float:
    vals = [r.results[target].miou for r in records if r.spec.name == spec_name]
    if not vals:
        raise ValidationError(f"no runs recorded for {spec_name!r}")
    return float(np.mean(vals))


def _write_summary(
    records: list[RunRecord], specs, targets: list[str], path: Path
) -> None:
    """Grid-shaped summary: one row per configuration, mIoU mean and sd
    per eval set plus the overall mean."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["method", "mix_mode", "proto_train", "rectify"]
            for target in targets:
                header += [f"miou_{target}", f"miou_{target}_sd"]
            header.append("miou_mean")
            writer.writerow(header)
            for spec in specs:
                runs = [r for r in records if r.spec == spec]
                row = [spec.name, spec.mix_mode, int(spec.proto_train), int(spec.rectify)]
                all_means = []
                for target in targets:
                    mious = np.array([r.results[target].miou for r in runs])
                    sd = float(mious.std(ddof=1)) if len(mious) > 1 else 0.0
                    row += [repr(float(mious.mean())), repr(sd)]
                    all_means.append(mious.mean())
                row.append(repr(float(np.mean(all_means))))
                writer.writerow(row)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def run_ablation(
    base_cfg: TrainConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    master_seed: int,
    num_seeds: int = 1,
    include_nonparam: bool = False,
    eval_points: int | None = 2048,
) -> list[EvalRow]:
    """Train the {mixing} x {prototype usage} grid and emit the summary
    (results.csv / results.md) plus detailed per-class tables and charts
    under detail/.

    Evaluates each model on the source-style val split and the
    target-style test split.
    """
    train_scenes = [pc for _, pc in load_split(data_dir, base_cfg.split)]
    eval_sets: dict[str, list[PointCloud]] = {}
    for split, label in (("val", "source_val"), ("test", "target_test")):
        try:
            eval_sets[label] = [pc for _, pc in load_split(data_dir, split)]
        except Exception:
            logger.warning("dataset has no %s split; skipping that eval set", split)
    if not eval_sets:
        raise ValidationError("dataset has neither val nor test split to evaluate on")

    specs = list(ABLATION_GRID) + ([NONPARAM_SPEC] if include_nonparam else [])
    records = run_experiment(
        base_cfg, specs, train_scenes, eval_sets, master_seed, num_seeds, eval_points
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = list(eval_sets.keys())
    _write_summary(records, specs, targets, out_dir / "results.csv")
    _write_summary_md(records, specs, targets, out_dir / "results.md")
    rows = aggregate_rows(records)
    report(rows, out_dir / "detail")
    return rows


def _write_summary_md(records: list[RunRecord], specs, targets: list[str], path: Path) -> None:
    header = ["method", "mix", "proto", "rectify", *[f"mIoU {t}" for t in targets], "mean"]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join(["---"] * len(header)) + "|",
    ]
    for spec in specs:
        runs = [r for r in records if r.spec == spec]
        cells = [
            spec.name,
            spec.mix_mode,
            "yes" if spec.proto_train else "no",
            "yes" if spec.rectify else "no",
        ]
        means = []
        for target in targets:
            mious = np.array([r.results[target].miou for r in runs])
            sd = float(mious.std(ddof=1)) if len(mious) > 1 else 0.0
            cells.append(f"{mious.mean():.3f} ± {sd:.3f}")
            means.append(mious.mean())
        cells.append(f"{np.mean(means):.3f}")
        lines.append("| " + " | ".join(cells) + " |")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
