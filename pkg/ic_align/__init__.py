"""Robust inverse compositional image alignment (affine and RGB-D rigid)."""
from .geometry import AffineParams, RigidTransform, TwistSE3
from .imaging import Frame, InverseDepthImage, ScalarImage
from .solver import AlignmentResult, SolverConfig, align
from .warp import CameraIntrinsics

__version__ = "1"

__all__ = ["AffineParams", "AlignmentResult", "CameraIntrinsics", "Frame", "InverseDepthImage",
           "RigidTransform", "ScalarImage", "SolverConfig", "TwistSE3", "align"]
