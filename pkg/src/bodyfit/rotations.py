"""Rotation conversions: axis-angle, rotation matrices and the continuous 6D form.

Every function accepts either a numpy array or a torch tensor with arbitrary
leading batch dimensions and returns the same kind of object. The torch path is
differentiable and is what the fitter and the regressor use.
"""
import numpy as np
import torch

from .errors import NumericError, ParameterError

# Below this angle Rodrigues switches to its second-order series.
SMALL_ANGLE = 1e-8


def _to_torch(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _back(x, was_numpy):
    return x.detach().numpy() if was_numpy else x


def rot6d_to_matrix(r6d):
    """Decode (..., 6) coefficients into (..., 3, 3) rotation matrices.

    The coefficients hold the first two matrix columns stacked; Gram-Schmidt
    turns them into an orthonormal frame.
    """
    r, was_np = _to_torch(r6d)
    if r.shape[-1] != 6:
        raise ParameterError(f"expected trailing dimension 6, got {tuple(r.shape)}")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = torch.linalg.norm(a1, dim=-1, keepdim=True)
    c1 = a1 / n1
    u2 = a2 - (c1 * a2).sum(-1, keepdim=True) * c1
    n2 = torch.linalg.norm(u2, dim=-1, keepdim=True)
    if was_np:
        # tensors are checked inside the differentiable energies instead
        scale = torch.maximum(torch.linalg.norm(a2, dim=-1, keepdim=True), n1)
        if bool((n1 <= 0).any()) or bool((n2 <= 1e-12 * scale).any()):
            raise NumericError("degenerate 6D rotation: zero or parallel columns")
    c2 = u2 / n2
    c3 = torch.linalg.cross(c1, c2, dim=-1)
    return _back(torch.stack([c1, c2, c3], dim=-1), was_np)


def matrix_to_rot6d(mat, atol=1e-6):
    """First two columns of (..., 3, 3) rotation matrices, as (..., 6)."""
    m, was_np = _to_torch(mat)
    if m.shape[-2:] != (3, 3):
        raise ParameterError(f"expected (..., 3, 3) matrices, got {tuple(m.shape)}")
    if atol is not None:
        eye = torch.eye(3, dtype=m.dtype)
        err = (m.transpose(-1, -2) @ m - eye).abs().amax() if m.numel() else 0.0
        if float(err) > atol or bool((torch.linalg.det(m) < 0).any()):
            raise ParameterError(f"matrix is not a rotation (orthonormality error {float(err):.3g})")
    out = torch.cat([m[..., :, 0], m[..., :, 1]], dim=-1)
    return _back(out, was_np)


def _skew(v):
    z = torch.zeros_like(v[..., 0])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack(
        [torch.stack([z, -w, y], -1), torch.stack([w, z, -x], -1), torch.stack([-y, x, z], -1)],
        dim=-2,
    )


def axis_angle_to_matrix(aa):
    """Rodrigues formula for (..., 3) rotation vectors."""
    v, was_np = _to_torch(aa)
    if v.shape[-1] != 3:
        raise ParameterError(f"expected trailing dimension 3, got {tuple(v.shape)}")
    theta2 = (v * v).sum(-1)
    small = theta2 < SMALL_ANGLE**2
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(theta2_safe)
    # sin(t)/t and (1-cos(t))/t^2 with their series near zero
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2_safe)
    k = _skew(v)
    eye = torch.eye(3, dtype=v.dtype).expand(k.shape)
    out = eye + a[..., None, None] * k + b[..., None, None] * (k @ k)
    return _back(out, was_np)


def matrix_to_axis_angle(mat):
    """Log map of (..., 3, 3) rotations to rotation vectors.

    Differentiable away from 180 degree rotations. The pipeline uses it for the
    angle and mixture pose priors, which act on moderate joint rotations.
    """
    m, was_np = _to_torch(mat)
    s = 0.5 * torch.stack(
        [m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]], -1
    )
    c = 0.5 * (m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2] - 1.0)
    n2 = (s * s).sum(-1)
    small = n2 < 1e-16
    n = torch.sqrt(torch.where(small, torch.ones_like(n2), n2))
    theta = torch.atan2(n, c)
    factor = torch.where(small, 1.0 + n2 / 6.0, theta / n)
    out = s * factor[..., None]
    if was_np:
        out = out.detach().numpy().copy()
        flat_out = out.reshape(-1, 3)
        flat_m = m.detach().numpy().reshape(-1, 3, 3)
        # near pi the skew part vanishes; recover the axis from the symmetric part
        for i in np.nonzero(c.detach().numpy().reshape(-1) < -0.999999)[0]:
            rm = flat_m[i]
            sym = 0.5 * (rm + np.eye(3))
            col = int(np.argmax(np.diag(sym)))
            axis = sym[:, col] / np.linalg.norm(sym[:, col])
            cand = axis * float(theta.reshape(-1)[i])
            if np.abs(axis_angle_to_matrix(cand) - rm).max() > 1e-6:
                cand = -cand
            flat_out[i] = cand
        return out
    return _back(out, was_np)


def to_matrices(rotations, representation):
    """Convert per-joint rotations stored as ``representation`` into matrices."""
    if representation == "matrix":
        return rotations
    if representation == "axis_angle":
        return axis_angle_to_matrix(rotations)
    if representation == "rot6d":
        return rot6d_to_matrix(rotations)
    raise ParameterError(f"unknown rotation representation {representation!r}")


def flatten_rotations(pose):
    """Row-major flattening of per-joint matrices, joints in tree order -> (..., 9K)."""
    mats = pose.matrices() if hasattr(pose, "matrices") else pose
    if isinstance(mats, torch.Tensor):
        return mats.reshape(*mats.shape[:-3], -1)
    mats = np.asarray(mats)
    return mats.reshape(*mats.shape[:-3], -1)
