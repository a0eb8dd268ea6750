"""Animatable Gaussian avatars: skinned isotropic splats fitted to posed
image sequences on the CPU, with joint motion/appearance optimization."""

__version__ = "0.1.0"

from .gaussians import GaussianCloud, init_cloud
from .rasterizer import Camera, RenderOutput, Splats, project, render
from .template import (Pose, SkinnedTemplate, SurfaceSamples, UvPositionalMap,
                       forward_kinematics, lbs, load_template,
                       make_test_template, sample_surface)
from .trainer import AvatarModel, MotionUpdate, TrainConfig

__all__ = [
    "AvatarModel", "Camera", "GaussianCloud", "MotionUpdate", "Pose",
    "RenderOutput", "SkinnedTemplate", "Splats", "SurfaceSamples",
    "TrainConfig", "UvPositionalMap", "forward_kinematics", "init_cloud",
    "lbs", "load_template", "make_test_template", "project", "render",
    "sample_surface", "__version__",
]
