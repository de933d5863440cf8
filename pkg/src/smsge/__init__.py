"""Self-supervised multi-scale skeleton graph encoding for person re-identification."""

from .config import TrainConfig, apply_ablation
from .graph import SkeletonSpec, build_merge_maps, build_multiscale, build_topology
from .model import SMSGEModel

__all__ = ["SMSGEModel", "SkeletonSpec", "TrainConfig", "apply_ablation", "build_merge_maps",
           "build_multiscale", "build_topology"]
__version__ = "0.1.0"
