"""Scene-scale point-cloud diffusion for lidar completion.

Global denoising diffusion on metric coordinates with guided sampling and a
fast deterministic solver, a local offset-diffusion baseline, preprocessing
and evaluation utilities, and a CLI driving the full pipeline.
"""

from .cloud import (
    PointCloud,
    VoxelGrid,
    disc_augment,
    duplicate,
    estimate_ground_height,
    farthest_point_sample,
    range_crop,
    uniform_sample,
    voxelize,
)
from .denoiser import (
    Denoiser,
    DenoiserQuery,
    GaussianOracleDenoiser,
    ToyDenoiser,
    diffusion_loss,
    gradient_check,
    noise_stats,
)
from .errors import NumericalError
from .metrics import MetricReport, chamfer, evaluate_pair, jsd, voxel_iou
from .sampler_global import (
    SamplerConfig,
    fast_solve,
    forward_noise,
    guided_noise,
    make_start,
    reverse_step,
    sample,
)
from .sampler_local import (
    LocalRegConfig,
    forward_noise_local,
    make_start_local,
    reg_loss,
    reverse_step_local,
    reverse_step_local_exact,
    sample_local,
    train_step_local,
)
from .schedule import NoiseSchedule

__version__ = "0.1.0"

__all__ = [
    "Denoiser",
    "DenoiserQuery",
    "GaussianOracleDenoiser",
    "LocalRegConfig",
    "MetricReport",
    "NoiseSchedule",
    "NumericalError",
    "PointCloud",
    "SamplerConfig",
    "ToyDenoiser",
    "VoxelGrid",
    "chamfer",
    "diffusion_loss",
    "disc_augment",
    "duplicate",
    "estimate_ground_height",
    "evaluate_pair",
    "farthest_point_sample",
    "fast_solve",
    "forward_noise",
    "forward_noise_local",
    "gradient_check",
    "guided_noise",
    "jsd",
    "make_start",
    "make_start_local",
    "noise_stats",
    "range_crop",
    "reg_loss",
    "reverse_step",
    "reverse_step_local",
    "reverse_step_local_exact",
    "sample",
    "sample_local",
    "train_step_local",
    "uniform_sample",
    "voxel_iou",
    "voxelize",
]
