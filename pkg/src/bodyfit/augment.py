"""Shape augmentation and proxy-representation corruption.

All functions draw from a caller-supplied ``numpy.random.Generator`` so a fixed
stream reproduces the output bit for bit.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .body_model import ShapeParams
from .errors import ParameterError
from .render import ProxyRepresentation, joint_heatmaps

DEFAULT_SHAPE_SIGMA = 1.5


@dataclass
class ShapeAugConfig:
    mu: np.ndarray = field(default_factory=lambda: np.zeros(10))
    sigma: np.ndarray = field(default_factory=lambda: np.full(10, DEFAULT_SHAPE_SIGMA))

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if self.sigma.shape == (1,) and self.mu.shape != (1,):
            self.sigma = np.full(self.mu.shape, self.sigma[0])
        if self.mu.shape != self.sigma.shape:
            raise ParameterError("mu and sigma must have the same length")
        if np.any(self.sigma < 0):
            raise ParameterError("sigma must be nonnegative")

    @classmethod
    def default(cls, num_betas=10, sigma=DEFAULT_SHAPE_SIGMA):
        return cls(np.zeros(num_betas), np.full(num_betas, float(sigma)))

    def check_against_bank(self, bank_betas):
        """Require more shape spread than the pose bank's own shapes."""
        bank_sigma = np.asarray(bank_betas, dtype=np.float64).std(axis=0)
        if np.any(self.sigma <= bank_sigma):
            raise ParameterError(
                f"shape augmentation sigma {self.sigma.min():.3g} does not exceed the pose bank's "
                f"empirical std {bank_sigma.max():.3g}")


@dataclass
class PrAugConfig:
    """Corruption magnitudes. Pixel sizes are for a 256x256 image; see ``scaled``."""

    joint_jitter_max: float = 8.0
    edge_noise_amplitude: float = 4.0
    edge_noise_probability: float = 0.5
    part_removal_probability: float = 0.1
    occlusion_box_probability: float = 0.3
    occlusion_box_size_range: tuple = (48.0, 96.0)
    boxes_per_image_max: int = 2

    def __post_init__(self):
        self.occlusion_box_size_range = tuple(float(v) for v in self.occlusion_box_size_range)
        for name in ("edge_noise_probability", "part_removal_probability", "occlusion_box_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.occlusion_box_size_range
        if not (0 < lo <= hi):
            raise ParameterError("occlusion box sizes must satisfy 0 < min <= max")
        if self.joint_jitter_max < 0 or self.edge_noise_amplitude < 0 or self.boxes_per_image_max < 0:
            raise ParameterError("jitter, amplitude and box count must be nonnegative")

    @classmethod
    def disabled(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, (1.0, 1.0), 0)

    def scaled(self, width, reference=256):
        """Copy with pixel magnitudes rescaled from ``reference`` to ``width`` pixels."""
        f = width / reference
        lo, hi = self.occlusion_box_size_range
        return PrAugConfig(self.joint_jitter_max * f, self.edge_noise_amplitude * f,
                           self.edge_noise_probability, self.part_removal_probability,
                           self.occlusion_box_probability, (lo * f, hi * f), self.boxes_per_image_max)


def augment_shape(cfg, rng):
    return ShapeParams(cfg.mu + cfg.sigma * rng.standard_normal(cfg.mu.shape))


def jitter_joints(joints2d, cfg, rng):
    j = np.asarray(joints2d, dtype=np.float64)
    delta = cfg.joint_jitter_max
    return j + rng.uniform(-delta, delta, size=j.shape)


_CROSS = ndimage.generate_binary_structure(2, 1)


def _boundary(mask):
    # outside the image counts as background
    inner = ndimage.binary_erosion(mask, _CROSS, border_value=0)
    outer = ndimage.binary_dilation(mask, _CROSS, border_value=0)
    return (mask & ~inner) | (outer & ~mask)


def perturb_silhouette_edges(silhouette, cfg, rng):
    """Randomly flip boundary pixels, repeated ``edge_noise_amplitude`` times.

    Each pass flips pixels that differ from a 4-neighbour with probability
    ``edge_noise_probability``, so changes stay within the amplitude (in pixels)
    of the original boundary.
    """
    mask = np.asarray(silhouette) > 0.5
    passes = int(round(cfg.edge_noise_amplitude))
    p = cfg.edge_noise_probability
    for _ in range(passes):
        edge = _boundary(mask)
        flip = edge & (rng.random(mask.shape) < p)
        mask = mask ^ flip
    return mask.astype(np.float64)


def remove_body_parts(silhouette, part_masks, cfg, rng):
    """Zero each part mask independently with ``part_removal_probability``."""
    out = np.asarray(silhouette, dtype=np.float64).copy()
    masks = np.asarray(part_masks)
    if masks.size == 0:
        return out
    drop = rng.random(len(masks)) < cfg.part_removal_probability
    if drop.any():
        out[masks[drop].any(axis=0) > 0] = 0.0
    return out


def add_occluding_boxes(silhouette, cfg, rng):
    """Zero up to ``boxes_per_image_max`` random axis-aligned boxes."""
    out = np.asarray(silhouette, dtype=np.float64).copy()
    h, w = out.shape
    lo, hi = cfg.occlusion_box_size_range
    for _ in range(cfg.boxes_per_image_max):
        apply, bh, bw, cy, cx = (rng.random(), rng.uniform(lo, hi), rng.uniform(lo, hi),
                                 rng.uniform(0, h), rng.uniform(0, w))
        if apply >= cfg.occlusion_box_probability:
            continue
        y0, y1 = int(np.floor(cy - bh / 2)), int(np.ceil(cy + bh / 2))
        x0, x1 = int(np.floor(cx - bw / 2)), int(np.ceil(cx + bw / 2))
        out[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = 0.0
    return out


def augment_pr(pr, cfg, part_masks, rng):
    """Corrupt a proxy representation.

    Silhouette: edge noise, then part removal, then occluding boxes. Heatmaps are
    regenerated from jittered joints, which needs ``pr.joints2d``.
    """
    sil = perturb_silhouette_edges(pr.silhouette, cfg, rng)
    sil = remove_body_parts(sil, part_masks, cfg, rng)
    sil = add_occluding_boxes(sil, cfg, rng)
    heat, joints = pr.heatmaps, pr.joints2d
    if cfg.joint_jitter_max > 0:
        if pr.joints2d is None or pr.sigma_g is None:
            raise ParameterError("joint jitter needs the joint locations stored on the PR")
        joints = jitter_joints(pr.joints2d, cfg, rng)
        heat = joint_heatmaps(joints, pr.height, pr.width, pr.sigma_g)
    return ProxyRepresentation(sil, heat, joints, pr.sigma_g)
