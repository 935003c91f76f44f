"""End-to-end training: augmentation pipeline, warm-up, prototype bank
maintenance, and the epoch loop.

Each scene pass draws a vendor partner, applies the configured mixing
mode, the virtual scan, and the rigid jitter, then subsamples points for
the batch.  After the warm-up epochs the prototype bank is initialized
from per-scene class means and updated once per step from the batch
embeddings.  Everything is derived deterministically from the config
seed.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cinmix import MixConfig, build_floor_grid, cinmix, cuboid_mix, extract_instance_groups, mix3d
from .clustering import DbscanParams
from .encoder import (
    EncoderModel,
    OptimState,
    combined_loss,
    extract_point_features,
    forward,
    learning_rate,
    optimizer_step,
)
from .errors import ConfigError, EmptyResult, IoFailure, NoFloor
from .pattern_aug import RigidAugParams, ScanSimParams, random_rigid, virtual_scan
from .prototypes import PrototypeBank, init_bank, momentum_update, sinkhorn_assign
from .scene import IGNORE_LABEL, NUM_CLASSES, PointCloud, load_split

logger = logging.getLogger(__name__)

MIX_MODES = ("cinmix", "mix3d", "cuboid", "none")

# rng stream salts so independent draws never collide
_SALT_MODEL = 0
_SALT_SCENE_CAP = 1
_SALT_EPOCH = 2
_SALT_STEP_SCENE = 3
_SALT_GROUPS = 4
_SALT_BANK_SCENE = 5
_SALT_BANK_KMEANS = 6


@dataclass
class TrainConfig:
    """Everything the training loop needs, JSON round-trippable."""

    data_dir: str | None = None
    split: str = "train"
    epochs: int = 30
    batch_scenes: int = 8
    points_per_scene: int = 4096
    max_points_per_scene: int = 20000
    seed: int = 0
    # model
    hidden_dims: tuple[int, ...] = (64, 128)
    embed_dim: int = 32
    knn: int = 16
    # optimizer
    base_lr: float = 6e-4
    weight_decay: float = 0.01
    poly_power: float = 0.9
    # prototypes
    proto_enabled: bool = True
    num_prototypes: int = 3
    sharpness: float = 20.0
    proto_momentum: float = 0.999
    sinkhorn_iters: int = 3
    proto_loss_weight: float = 1.0
    warmup_epochs: int = 5
    nonparam_only: bool = False
    # augmentation
    mix_mode: str = "cinmix"
    num_instances: int | None = None
    cell_size: float = 0.10
    occupy_height: float = 2.0
    dbscan_eps: float = 0.2
    dbscan_min_pts: int = 100
    cluster_subsample: int | None = None
    cuboid_splits: tuple[int, int, int] = (2, 2, 1)
    scan_sim: bool = True
    scan: ScanSimParams = field(default_factory=ScanSimParams)
    rigid: RigidAugParams = field(default_factory=RigidAugParams)

    def __post_init__(self):
        if self.mix_mode not in MIX_MODES:
            raise ConfigError(f"mix_mode must be one of {MIX_MODES}, got {self.mix_mode!r}")
        if self.epochs < 1 or self.batch_scenes < 1 or self.points_per_scene < 1:
            raise ConfigError("epochs, batch_scenes, points_per_scene must be >= 1")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")

    def mix_config(self) -> MixConfig:
        return MixConfig(
            cell_size=self.cell_size,
            occupy_height=self.occupy_height,
            num_instances=self.num_instances,
            dbscan=DbscanParams(self.dbscan_eps, self.dbscan_min_pts),
            cluster_subsample=self.cluster_subsample,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "scan" in data and isinstance(data["scan"], dict):
                data["scan"] = ScanSimParams(**data["scan"])
            if "rigid" in data and isinstance(data["rigid"], dict):
                data["rigid"] = RigidAugParams(**data["rigid"])
        except TypeError as exc:
            raise ConfigError(f"bad nested config: {exc}") from exc
        for key in ("hidden_dims", "cuboid_splits"):
            if key in data and isinstance(data[key], list):
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


class ScenePool:
    """Training scenes plus lazily cached per-scene mixing assets."""

    def __init__(self, scenes: list[PointCloud], cfg: TrainConfig):
        self.cfg = cfg
        self.scenes = []
        for idx, pc in enumerate(scenes):
            if len(pc) > cfg.max_points_per_scene:
                rng = _rng(cfg.seed, _SALT_SCENE_CAP, idx)
                keep = rng.choice(len(pc), size=cfg.max_points_per_scene, replace=False)
                keep.sort()
                pc = pc.select(keep)
            self.scenes.append(pc)
        self._groups: dict[int, list] = {}
        self._grids: dict[int, object] = {}

    def __len__(self) -> int:
        return len(self.scenes)

    def groups(self, idx: int):
        if idx not in self._groups:
            cfg = self.cfg
            self._groups[idx] = extract_instance_groups(
                self.scenes[idx],
                DbscanParams(cfg.dbscan_eps, cfg.dbscan_min_pts),
                cfg.cell_size,
                cfg.cluster_subsample,
                _rng(cfg.seed, _SALT_GROUPS, idx),
                source=str(idx),
            )
        return self._groups[idx]

    def grid(self, idx: int):
        if idx not in self._grids:
            self._grids[idx] = build_floor_grid(
                self.scenes[idx], self.cfg.cell_size, self.cfg.occupy_height
            )
        return self._grids[idx]


def _augment_scene(pool: ScenePool, idx: int, cfg: TrainConfig, rng: np.random.Generator) -> PointCloud:
    pc = pool.scenes[idx]
    if cfg.mix_mode == "cinmix":
        vendor = int(rng.integers(len(pool)))
        try:
            pc = cinmix(
                pool.scenes[vendor],
                pc,
                cfg.mix_config(),
                rng,
                groups=pool.groups(vendor),
                grid=pool.grid(idx),
            )
        except NoFloor:
            logger.warning("scene %d has no floor; skipping instance mix", idx)
    elif cfg.mix_mode == "mix3d":
        vendor = int(rng.integers(len(pool)))
        pc = mix3d(pc, pool.scenes[vendor])
    elif cfg.mix_mode == "cuboid":
        vendor = int(rng.integers(len(pool)))
        pc, _ = cuboid_mix(pc, pool.scenes[vendor], cfg.cuboid_splits, rng)
    if cfg.scan_sim:
        try:
            pc = virtual_scan(pc, cfg.scan, rng)
        except EmptyResult:
            logger.warning("virtual scan emptied scene %d; keeping unscanned points", idx)
    return random_rigid(pc, cfg.rigid, rng)


def _sample_points(pc: PointCloud, count: int, rng: np.random.Generator) -> PointCloud:
    if len(pc) <= count:
        return pc
    keep = rng.choice(len(pc), size=count, replace=False)
    keep.sort()
    return pc.select(keep)


def _scene_batch(pool: ScenePool, indices, cfg: TrainConfig, epoch: int):
    feats, labels = [], []
    for idx in indices:
        rng = _rng(cfg.seed, _SALT_STEP_SCENE, epoch, int(idx))
        pc = _augment_scene(pool, int(idx), cfg, rng)
        pc = _sample_points(pc, cfg.points_per_scene, rng)
        feats.append(extract_point_features(pc, cfg.knn))
        labels.append(pc.labels)
    return np.concatenate(feats), np.concatenate(labels)


def _init_bank_from_pool(pool: ScenePool, model: EncoderModel, cfg: TrainConfig) -> PrototypeBank:
    """One augmented pass over the pool collecting per-scene class-mean
    embeddings, then k-means per class."""
    means: dict[int, list[np.ndarray]] = {c: [] for c in range(NUM_CLASSES)}
    for idx in range(len(pool)):
        rng = _rng(cfg.seed, _SALT_BANK_SCENE, idx)
        pc = _augment_scene(pool, idx, cfg, rng)
        pc = _sample_points(pc, cfg.points_per_scene, rng)
        emb, _ = forward(model, extract_point_features(pc, cfg.knn))
        for c in np.unique(pc.labels):
            if c == IGNORE_LABEL:
                continue
            means[int(c)].append(emb[pc.labels == c].mean(axis=0))
    stacked = {c: np.asarray(v) for c, v in means.items() if v}
    return init_bank(
        stacked,
        cfg.num_prototypes,
        _rng(cfg.seed, _SALT_BANK_KMEANS),
        momentum=cfg.proto_momentum,
        sharpness=cfg.sharpness,
        sinkhorn_iters=cfg.sinkhorn_iters,
    )


def _update_bank(bank: PrototypeBank, embeddings: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> None:
    valid = labels != IGNORE_LABEL
    for c in np.unique(labels[valid]):
        c = int(c)
        if not bank.initialized[c]:
            continue
        batch_feats = embeddings[labels == c]
        plan = sinkhorn_assign(batch_feats, bank.prototypes[c], cfg.sharpness, cfg.sinkhorn_iters)
        momentum_update(bank, c, plan, batch_feats)


@dataclass
class TrainResult:
    model: EncoderModel
    bank: PrototypeBank | None
    history: list[dict]


def train(
    cfg: TrainConfig,
    scenes: list[PointCloud] | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Run the full training loop.

    ``scenes`` bypasses dataset loading (used by the experiment harness);
    otherwise cfg.data_dir/cfg.split is loaded.  When ``log_path`` is
    given, per-epoch metrics are written there as CSV.
    """
    if scenes is None:
        if cfg.data_dir is None:
            raise ConfigError("either pass scenes or set data_dir in the config")
        scenes = [pc for _, pc in load_split(cfg.data_dir, cfg.split)]
    if not scenes:
        raise ConfigError("training requires at least one scene")
    pool = ScenePool(scenes, cfg)

    model = EncoderModel.init(
        _rng(cfg.seed, _SALT_MODEL),
        hidden_dims=tuple(cfg.hidden_dims),
        embed_dim=cfg.embed_dim,
        knn=cfg.knn,
    )
    steps_per_epoch = (len(pool) + cfg.batch_scenes - 1) // cfg.batch_scenes
    opt = OptimState(
        total_steps=cfg.epochs * steps_per_epoch,
        base_lr=cfg.base_lr,
        weight_decay=cfg.weight_decay,
        poly_power=cfg.poly_power,
    )
    bank: PrototypeBank | None = None
    history: list[dict] = []

    for epoch in range(1, cfg.epochs + 1):
        if bank is None and cfg.proto_enabled and epoch > cfg.warmup_epochs:
            bank = _init_bank_from_pool(pool, model, cfg)
            logger.info("prototype bank initialized at epoch %d", epoch)
        order = _rng(cfg.seed, _SALT_EPOCH, epoch).permutation(len(pool))
        ce_sum = proto_sum = 0.0
        for start in range(0, len(order), cfg.batch_scenes):
            batch_idx = order[start : start + cfg.batch_scenes]
            feats, labels = _scene_batch(pool, batch_idx, cfg, epoch)
            ce_weight = 0.0 if (cfg.nonparam_only and bank is not None) else 1.0
            result = combined_loss(
                model, feats, labels, bank, proto_weight=cfg.proto_loss_weight, ce_weight=ce_weight
            )
            if bank is not None:
                _update_bank(bank, result.embeddings, labels, cfg)
            optimizer_step(model, result.grads, opt)
            ce_sum += result.ce
            proto_sum += result.proto
        history.append(
            {
                "epoch": epoch,
                "ce_loss": ce_sum / steps_per_epoch,
                "proto_loss": proto_sum / steps_per_epoch,
                "lr": learning_rate(opt),
            }
        )
    if log_path is not None:
        write_train_log(history, log_path)
    return TrainResult(model, bank, history)


def write_train_log(history: list[dict], path: str | Path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "ce_loss", "proto_loss", "lr"])
            for row in history:
                writer.writerow(
                    [row["epoch"], repr(row["ce_loss"]), repr(row["proto_loss"]), repr(row["lr"])]
                )
    except OSError as exc:
        raise IoFailure(f"cannot write training log to {path}: {exc}") from exc
