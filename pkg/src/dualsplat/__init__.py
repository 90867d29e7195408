"""Dual-branch splatting: 3D Gaussians for appearance with reflections, 2D surfels for geometry."""

from .geometry import Camera
from .losses import LossWeights
from .meshing import TriangleMesh, chamfer_distance, mesh_metrics, normal_consistency
from .primitives import GaussianSet, SurfelSet, init_from_points, load_checkpoint, save_checkpoint
from .scenes import Dataset, SyntheticSceneSpec, build_synthetic, generate_synthetic, load_dataset
from .splatting import render_2d, render_3d
from .training import TrainConfig, Trainer, train

__version__ = "0.1.0"
