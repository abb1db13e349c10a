"""Structure from motion and camera relocalization over precomputed
monocular depth maps, optimized with a density-weighted inlier-count loss."""

from .distribution import (
    ResidualHistogram,
    build_histogram,
    cdf_at,
    marginalized_score,
    mba_loss,
    merge_histograms,
    pdf_at,
)
from .errors import MbaError
from .evaluation import ate, auc_pose, pairwise_pose_errors, reloc_accuracy, rra_rta
from .geometry import (
    AffineDepthCorrection,
    CameraIntrinsics,
    CameraPose,
    FrameState,
    TrainableFlags,
)
from .io_formats import load_scene, read_result, write_result
from .ransac2v import estimate_essential_marginalized, sampson_residual
from .reloc import RelocProblem, RelocResult, relocalize
from .solver import OptimizerConfig, SceneInputs, SfmResult, run_sfm
from .synthetic import SyntheticConfig, SyntheticScene, generate, oracle_metrics

__version__ = "0.1.0"

__all__ = [
    "AffineDepthCorrection",
    "CameraIntrinsics",
    "CameraPose",
    "FrameState",
    "MbaError",
    "OptimizerConfig",
    "RelocProblem",
    "RelocResult",
    "ResidualHistogram",
    "SceneInputs",
    "SfmResult",
    "SyntheticConfig",
    "SyntheticScene",
    "TrainableFlags",
    "ate",
    "auc_pose",
    "build_histogram",
    "cdf_at",
    "estimate_essential_marginalized",
    "generate",
    "load_scene",
    "marginalized_score",
    "mba_loss",
    "merge_histograms",
    "oracle_metrics",
    "pairwise_pose_errors",
    "pdf_at",
    "read_result",
    "reloc_accuracy",
    "relocalize",
    "rra_rta",
    "run_sfm",
    "sampson_residual",
    "write_result",
    "__version__",
]
