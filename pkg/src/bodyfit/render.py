"""Silhouette rasterization, joint heatmaps and proxy-representation assembly.

Pixel (row j, column i) has its centre at (i + 0.5, j + 0.5) in the (u, v)
pixel frame used by the cameras.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import _raster_kernels as _k
from .errors import ParameterError, ParseError

DEFAULT_TAU = 1.0
# faces only influence pixels within this many temperatures of their bounding box
SOFT_CUTOFF = 10.0


def _faces_array(faces):
    return np.ascontiguousarray(np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def rasterize_hard(vertices2d, faces, height, width):
    """Binary silhouette: a pixel is on iff its centre lies in (or on) some triangle."""
    faces = _faces_array(faces)
    out = np.zeros((1, height, width))
    if faces.size:
        verts = np.ascontiguousarray(vertices2d, dtype=np.float64)
        _k.hard_labels(verts, faces, np.zeros(len(faces), dtype=np.int64), height, width, out)
    return out[0]


def rasterize_parts(vertices2d, faces, face_labels, num_labels, height, width):
    """(num_labels, H, W) binary masks, one per face label."""
    faces = _faces_array(faces)
    out = np.zeros((num_labels, height, width))
    if faces.size:
        verts = np.ascontiguousarray(vertices2d, dtype=np.float64)
        labels = np.ascontiguousarray(face_labels, dtype=np.int64)
        _k.hard_labels(verts, faces, labels, height, width, out)
    return out


class _SoftLogKeep(torch.autograd.Function):
    """Per-pixel sum over faces of log(1 - sigmoid(-d_f / tau)), flat (H*W,)."""

    @staticmethod
    def forward(ctx, verts, faces, height, width, tau, margin):
        v = np.ascontiguousarray(verts.detach().numpy(), dtype=np.float64)
        out = np.zeros(height * width)
        _k.soft_forward(v, faces, height, width, tau, margin, out)
        ctx.save_for_backward(verts)
        ctx.args = (faces, height, width, tau, margin)
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        (verts,) = ctx.saved_tensors
        faces, height, width, tau, margin = ctx.args
        v = np.ascontiguousarray(verts.detach().numpy(), dtype=np.float64)
        grad = np.zeros_like(v)
        g = np.ascontiguousarray(grad_out.detach().numpy(), dtype=np.float64)
        _k.soft_backward(v, faces, height, width, tau, margin, g, grad)
        return torch.from_numpy(grad), None, None, None, None, None


def rasterize_soft(vertices2d, faces, height, width, tau=DEFAULT_TAU):
    """Differentiable silhouette 1 - prod_f (1 - sigmoid(-d_f / tau)).

    ``d_f`` is the signed distance from the pixel centre to the boundary of face
    f, negative inside. Faces are ignored beyond ``SOFT_CUTOFF * tau`` of their
    bounding box. Accepts numpy (returns numpy) or a torch tensor (returns a
    tensor carrying gradients to ``vertices2d``).
    """
    if not tau > 0:
        raise ParameterError("tau must be positive")
    was_np = not isinstance(vertices2d, torch.Tensor)
    v = torch.as_tensor(np.asarray(vertices2d, dtype=np.float64)) if was_np else vertices2d
    log_keep = _SoftLogKeep.apply(v.to(torch.float64), _faces_array(faces), height, width,
                                  float(tau), SOFT_CUTOFF * float(tau))
    out = (1.0 - torch.exp(log_keep)).reshape(height, width)
    return out.detach().numpy() if was_np else out


def joint_heatmaps(joints2d, height, width, sigma_g):
    """(H, W, L) Gaussian heatmaps centred on each joint (pixel coordinates)."""
    if not sigma_g > 0:
        raise ParameterError("sigma_g must be positive")
    j = np.asarray(joints2d, dtype=np.float64).reshape(-1, 2)
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    gx = np.exp(-((xs[None, :] - j[:, :1]) ** 2) / (2.0 * sigma_g**2))  # (L, W)
    gy = np.exp(-((ys[None, :] - j[:, 1:]) ** 2) / (2.0 * sigma_g**2))  # (L, H)
    return np.einsum("lh,lw->hwl", gy, gx)


def default_sigma_g(width):
    """4 px at 256 wide, scaled with the image."""
    return 4.0 * width / 256.0


@dataclass
class ProxyRepresentation:
    """Silhouette channel plus L joint heatmap channels.

    ``joints2d`` and ``sigma_g`` are kept when known so augmentation can
    regenerate heatmaps from jittered joints.
    """

    silhouette: np.ndarray
    heatmaps: np.ndarray
    joints2d: np.ndarray = None
    sigma_g: float = None

    @property
    def height(self):
        return self.silhouette.shape[0]

    @property
    def width(self):
        return self.silhouette.shape[1]

    @property
    def num_keypoints(self):
        return self.heatmaps.shape[2]

    def stacked(self):
        """(H, W, L + 1) array with the silhouette in channel 0."""
        return np.concatenate([self.silhouette[..., None], self.heatmaps], axis=2)

    def channel(self, i):
        return self.silhouette if i == 0 else self.heatmaps[..., i - 1]


def assemble_pr(silhouette, heatmaps, joints2d=None, sigma_g=None):
    s = np.asarray(silhouette, dtype=np.float64)
    g = np.asarray(heatmaps, dtype=np.float64)
    if g.ndim == 2:
        g = g[..., None]
    if s.ndim != 2 or g.ndim != 3 or g.shape[:2] != s.shape:
        raise ParameterError(f"silhouette {s.shape} and heatmaps {g.shape} do not match")
    if s.size and (s.min() < 0 or s.max() > 1 or (g.size and (g.min() < 0 or g.max() > 1))):
        raise ParameterError("proxy representation values must lie in [0, 1]")
    return ProxyRepresentation(s, g, joints2d, sigma_g)


def write_pgm(path, image):
    """8-bit binary PGM; values in [0, 1] are scaled by 255 and rounded."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def read_pgm(path):
    """Read an 8-bit binary PGM into floats in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", pos, path)
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ParseError("not a binary PGM (P5)", 0, path)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError(f"bad PGM header: {exc}", pos, path) from None
    if maxval != 255:
        raise ParseError("only 8-bit PGM supported", pos, path)
    pos += 1
    if len(data) - pos != w * h:
        raise ParseError(f"expected {w * h} pixel bytes, found {len(data) - pos}", pos, path)
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w) / 255.0
