"""Dynamic 3D point-cloud temporal interpolation.

Builds high-temporal-resolution point-cloud sequences from sparsely sampled
ones: a learned row-stochastic alignment matrix establishes soft point-wise
correspondence between consecutive frames, a linear blend through the
alignment gives coarse in-between frames, and a shared per-point MLP
regresses bounded increments that compensate nonlinear trajectory
components.  Both directions of the pair are estimated and supervised.
"""

from .data import Sequence, SyntheticTruth, gen_synthetic, load_sequence, save_sequence, subsample_ltr
from .estimator import PointCloudInterpolator
from .evaluation import AblationSpec, EvalReport, evaluate, run_ablation, write_report
from .geometry import Assignment, chamfer, emd, emd_approx, emd_exact, emd_loss, knn_indices, normalize_pair
from .model import InterpolationModel, ModelConfig
from .training import TrainConfig, dual_loss, make_samples, train

__version__ = "0.1.0"

__all__ = [
    "AblationSpec",
    "Assignment",
    "EvalReport",
    "InterpolationModel",
    "ModelConfig",
    "PointCloudInterpolator",
    "Sequence",
    "SyntheticTruth",
    "TrainConfig",
    "chamfer",
    "dual_loss",
    "emd",
    "emd_approx",
    "emd_exact",
    "emd_loss",
    "evaluate",
    "gen_synthetic",
    "knn_indices",
    "load_sequence",
    "make_samples",
    "normalize_pair",
    "run_ablation",
    "save_sequence",
    "subsample_ltr",
    "train",
    "write_report",
    "__version__",
]
