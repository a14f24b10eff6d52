"""Coarse-to-fine point-cloud registration with geometric-structure attention.

The usual entry point is :func:`run_pipeline`; the submodules expose every
stage separately.
"""

from .cloud import PointCloud, RigidTransform, read_points
from .config import PipelineConfig, load_config
from .errors import GeoError
from .model import Model
from .pipeline import PipelineResult, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "GeoError",
    "Model",
    "PipelineConfig",
    "PipelineResult",
    "PointCloud",
    "RigidTransform",
    "load_config",
    "read_points",
    "run_pipeline",
]
