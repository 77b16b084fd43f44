"""Unsupervised per-point distinctiveness fields on 3D shapes.

Train a small point encoder against a shape set so that regions a shape
does not share with the rest of the set light up; read fields back per
point, project them to meshes, and drive retrieval, adaptive sampling,
and view selection with them.
"""

from .geometry import Mesh, PointCloud, normalize_unit_sphere
from .synthdata import Dataset, DatasetRecord, build_preset_dataset
from .pipeline import (Checkpoint, TrainConfig, TrainingDiverged,
                       canonical_view, train)
from .distinctiveness import (DistinctivenessField, extract,
                              project_to_mesh, threshold_regions)
from .evalmetrics import (adjusted_rand_index, best_permutation_accuracy,
                          cluster_retention, downsample_with_preference,
                          fne_fpe, match_coverage, wme)
from .applications import (RetrievalIndex, ViewScore,
                           adaptive_poisson_sample, build_retrieval_index,
                           distinctive_global_feature, retrieve,
                           scene_distinctiveness, select_views,
                           visible_points)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Mesh",
    "PointCloud",
    "normalize_unit_sphere",
    "Dataset",
    "DatasetRecord",
    "build_preset_dataset",
    "Checkpoint",
    "TrainConfig",
    "TrainingDiverged",
    "canonical_view",
    "train",
    "DistinctivenessField",
    "extract",
    "project_to_mesh",
    "threshold_regions",
    "adjusted_rand_index",
    "best_permutation_accuracy",
    "cluster_retention",
    "downsample_with_preference",
    "fne_fpe",
    "match_coverage",
    "wme",
    "RetrievalIndex",
    "ViewScore",
    "adaptive_poisson_sample",
    "build_retrieval_index",
    "distinctive_global_feature",
    "retrieve",
    "scene_distinctiveness",
    "select_views",
    "visible_points",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
