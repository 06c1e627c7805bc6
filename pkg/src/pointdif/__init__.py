"""Diffusion-based pre-training for point-cloud encoders.

The encoder sees a patch-masked cloud, an aggregation network turns its latents
into one condition vector, and a conditional point denoiser is trained to
recover the full cloud from Gaussian noise under that condition.
"""
from .config import PROFILES, TrainConfig
from .diffusion import NoiseSchedule, linear_schedule, recurrent_uniform_sample
from .evaluation import chamfer, linear_probe, reconstruct
from .networks import DESK_DIMS, PAPER_DIMS, ModelDims, PointDif
from .pointcloud_io import load_xyz, make_toy_dataset, save_xyz
from .training import fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "PROFILES", "TrainConfig", "NoiseSchedule", "linear_schedule", "recurrent_uniform_sample",
    "chamfer", "linear_probe", "reconstruct", "DESK_DIMS", "PAPER_DIMS", "ModelDims", "PointDif",
    "load_xyz", "make_toy_dataset", "save_xyz", "fit", "load_checkpoint", "save_checkpoint",
]
