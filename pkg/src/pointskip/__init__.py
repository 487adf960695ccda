"""Point-cloud classification with skip-joined set abstraction, plus ModelNet-R refinement tools."""
from .autograd import Tensor, backward
from .geometry import (
    GroupedNeighborhood,
    PointCloud,
    ball_query,
    farthest_point_sample,
    gather_features,
    normalize_unit_sphere,
    sample_and_group,
)
from .kernels import USE_NUMBA
from .model import ModelConfig, StageConfig, forward, init_params, parameter_count

__version__ = "0.1.0"
