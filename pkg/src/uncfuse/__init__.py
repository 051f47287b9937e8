"""Probabilistic LiDAR-camera fusion for 3D object detection on synthetic scenes.

The package covers the full experiment lifecycle: procedural scene
generation with a simulated LiDAR and camera, a probabilistic bird's-eye-view
proposal network with Gaussian uncertainty heads, a sampling-trained fusion
network, distance-binned average-precision evaluation, a sensor-misalignment
robustness sweep, and a statistical analysis suite linking predicted
uncertainties to annotation difficulty.
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config, paper_scale
from .detector import (Detection, FusionContext, FusionModel, ProposalModel,
                       infer, train_fusion, train_proposal_network)
from .estimators import FusionDetector, ProposalDetector
from .evaluation import (average_precision, evaluate, match_detections,
                         robustness_sweep, run_experiment_matrix)
from .geometry import Box3D, BoxEncoding8, CameraModel, PriorBox, Rect2D
from .synthworld import (Frame, SceneObject, generate_scene,
                         inject_temporal_misalignment, make_dataset,
                         read_dataset, write_dataset)
from .uncstats import (UncertaintyRecord, analyze, collect_records, ols_fit,
                       shannon_entropy, student_t_cdf)

__all__ = [
    "Box3D",
    "BoxEncoding8",
    "CameraModel",
    "Detection",
    "Frame",
    "FusionContext",
    "FusionDetector",
    "FusionModel",
    "PriorBox",
    "ProposalDetector",
    "ProposalModel",
    "Rect2D",
    "RunConfig",
    "SceneObject",
    "UncertaintyRecord",
    "__version__",
    "analyze",
    "average_precision",
    "collect_records",
    "evaluate",
    "generate_scene",
    "infer",
    "inject_temporal_misalignment",
    "load_config",
    "make_dataset",
    "match_detections",
    "ols_fit",
    "paper_scale",
    "read_dataset",
    "robustness_sweep",
    "run_experiment_matrix",
    "shannon_entropy",
    "student_t_cdf",
    "train_fusion",
    "train_proposal_network",
    "write_dataset",
]
