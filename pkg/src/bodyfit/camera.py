"""Perspective and weak-perspective cameras."""
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NumericError, ParameterError

# focal length as a multiple of image width for the default camera
DEFAULT_FOCAL_FACTOR = 1.1


@dataclass
class PerspectiveCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")
        r = self.rotation
        if r.shape != (3, 3) or np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0:
            raise ParameterError("camera rotation must be a proper rotation matrix")

    def with_translation(self, translation):
        return PerspectiveCamera(self.fx, self.fy, self.cx, self.cy, self.rotation, translation)


def default_camera(height=256, width=256, translation=(0.0, -0.2, 2.5)):
    """Pinhole camera whose focal length scales with the image width."""
    f = DEFAULT_FOCAL_FACTOR * width
    return PerspectiveCamera(f, f, width / 2.0, height / 2.0, np.eye(3), np.asarray(translation, float))


@dataclass
class WeakPerspectiveCamera:
    scale: float
    translation2d: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.translation2d = np.asarray(self.translation2d, dtype=np.float64)
        if not self.scale > 0:
            raise ParameterError("weak-perspective scale must be positive")


def perspective_project_t(points, fx, fy, cx, cy, rotation, translation):
    """Differentiable pinhole projection of (..., M, 3) points; returns pixels and depths."""
    cam = points @ rotation.transpose(-1, -2) + translation[..., None, :]
    z = cam[..., 2]
    uv = torch.stack([fx * cam[..., 0] / z + cx, fy * cam[..., 1] / z + cy], dim=-1)
    return uv, z


def perspective_project(points, cam):
    """Project (M, 3) model-space points to (M, 2) pixel coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    cam_pts = pts @ cam.rotation.T + cam.translation
    z = cam_pts[:, 2]
    bad = np.nonzero(~(z > 0))[0]
    if bad.size:
        raise NumericError(f"point {int(bad[0])} has non-positive depth {z[bad[0]]:.4g}")
    u = cam.fx * cam_pts[:, 0] / z + cam.cx
    v = cam.fy * cam_pts[:, 1] / z + cam.cy
    return np.stack([u, v], axis=1)


def weak_perspective_project_t(points, scale, translation2d, image_size):
    """Differentiable s * (x + t) in normalised coordinates, mapped to pixels.

    ``scale`` has shape (...,), ``translation2d`` (..., 2) and ``points`` (..., M, 3).
    """
    h, w = image_size
    ndc = scale[..., None, None] * (points[..., :2] + translation2d[..., None, :])
    half = torch.tensor([w / 2.0, h / 2.0], dtype=points.dtype)
    return half * (1.0 + ndc)


def weak_perspective_project(joints3d, cam, image_size=(256, 256)):
    """Orthographic drop of z, scaled and shifted; pixel = half-size * (1 + s(x + t))."""
    j = np.asarray(joints3d, dtype=np.float64)
    h, w = image_size
    ndc = cam.scale * (j[:, :2] + cam.translation2d)
    return np.array([w / 2.0, h / 2.0]) * (1.0 + ndc)


def pixels_to_ndc(uv, image_size):
    """Pixel coordinates to the [-1, 1] normalised frame used by the regressor losses."""
    h, w = image_size
    half = [w / 2.0, h / 2.0]
    if isinstance(uv, torch.Tensor):
        return uv / torch.tensor(half, dtype=uv.dtype) - 1.0
    return np.asarray(uv, dtype=np.float64) / np.array(half) - 1.0
