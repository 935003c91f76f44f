"""Synthetic-to-real domain-generalized 3D indoor semantic segmentation.

Library layout:

- ``scene``: point-cloud model, label space, IPC1 file I/O
- ``clustering``: DBSCAN and k-means(++)
- ``cinmix``: instance-mix augmentation plus mix3d / cuboid baselines
- ``pattern_aug``: virtual scan simulation and rigid jitter
- ``synthgen``: procedural two-style scene generator
- ``encoder``: point features, MLP encoder, loss, optimizer
- ``prototypes``: multi-prototype bank (transport updates, rectification)
- ``training`` / ``evaluation`` / ``experiments`` / ``report``: pipeline
- ``cli``: the ``dgseg3d`` command
"""

from .scene import (
    Aabb,
    CLASS_NAMES,
    IGNORE_LABEL,
    MIXABLE_CLASSES,
    NUM_CLASSES,
    PointCloud,
    THING_CLASSES,
    bounding_box,
    class_indices,
    load_scene,
    save_scene,
)
from .clustering import DbscanParams, dbscan, kmeans, kmeanspp_seed
from .cinmix import (
    FloorOccupancyGrid,
    InstanceGroup,
    MixConfig,
    Placement,
    build_floor_grid,
    cinmix,
    cuboid_mix,
    erode_free_map,
    extract_instance_groups,
    mix3d,
    place_instance,
)
from .pattern_aug import RigidAugParams, ScanSimParams, random_rigid, virtual_scan
from .synthgen import DatasetConfig, SceneStyle, generate_dataset, generate_scene
from .encoder import (
    EncoderModel,
    OptimState,
    combined_loss,
    extract_point_features,
    forward,
    learning_rate,
    optimizer_step,
)
from .prototypes import (
    PrototypeBank,
    class_mean_feature,
    init_bank,
    momentum_update,
    proto_loss,
    proto_similarity,
    rectify,
    sinkhorn_assign,
)
from .training import TrainConfig, TrainResult, train
from .evaluation import EvalResult, evaluate, infer
from .report import EvalRow, report

__version__ = "0.1.0"
