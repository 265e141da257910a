"""Parametric body model: shape blend shapes, linear blend skinning, joint regression.

The licensed SMPL asset is replaced by :func:`generate_toy_model`, a procedural
capsule-limbed humanoid with the same mathematical structure (template, linear
shape space, skinning weights, joint regressor, kinematic tree). Pose-corrective
blend shapes are not modelled.

Model coordinates are metres with y pointing down and the body facing -z, so an
identity camera rotation looks at the front of the figure with the head at the
top of the image.
"""
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import torch

from . import rotations
from .errors import NumericError, ParameterError, ParseError

MODEL_MAGIC = b"BFKM"
MODEL_VERSION = 1
ROOT_PARENT = -1

# SMPL-style 24 joint humanoid, T-pose, y down, facing -z.
SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)
JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)
_REST_JOINTS = np.array([
    [0.0, 0.0, 0.0], [0.07, 0.09, 0.0], [-0.07, 0.09, 0.0], [0.0, -0.11, 0.0],
    [0.10, 0.48, 0.0], [-0.10, 0.48, 0.0], [0.0, -0.24, 0.0], [0.10, 0.88, 0.02],
    [-0.10, 0.88, 0.02], [0.0, -0.31, 0.0], [0.11, 0.94, -0.10], [-0.11, 0.94, -0.10],
    [0.0, -0.50, 0.0], [0.08, -0.42, 0.0], [-0.08, -0.42, 0.0], [0.0, -0.60, 0.0],
    [0.18, -0.45, 0.0], [-0.18, -0.45, 0.0], [0.44, -0.45, 0.0], [-0.44, -0.45, 0.0],
    [0.69, -0.45, 0.0], [-0.69, -0.45, 0.0], [0.78, -0.45, 0.0], [-0.78, -0.45, 0.0],
])
# segment of joint k runs from joint k to this child (None: leaf extension)
_PRIMARY_CHILD = (3, 4, 5, 6, 7, 8, 9, 10, 11, 12, None, None, 15, 16, 17, None,
                  18, 19, 20, 21, 22, 23, None, None)
_LEAF_EXTENSION = {10: (0.0, 0.0, -0.09), 11: (0.0, 0.0, -0.09), 15: (0.0, -0.21, 0.0),
                   22: (0.09, 0.0, 0.0), 23: (-0.09, 0.0, 0.0)}
_RADII = np.array([
    [0.15, 0.10], [0.08, 0.08], [0.08, 0.08], [0.14, 0.10], [0.055, 0.055], [0.055, 0.055],
    [0.15, 0.10], [0.045, 0.04], [0.045, 0.04], [0.16, 0.10], [0.04, 0.035], [0.04, 0.035],
    [0.05, 0.05], [0.05, 0.05], [0.05, 0.05], [0.09, 0.10], [0.045, 0.045], [0.045, 0.045],
    [0.038, 0.038], [0.038, 0.038], [0.035, 0.02], [0.035, 0.02], [0.04, 0.015], [0.04, 0.015],
])
_MIRROR_PAIRS = ((1, 2), (4, 5), (7, 8), (10, 11), (13, 14), (16, 17), (18, 19), (20, 21), (22, 23))
# per unit coefficient, RMS per-vertex displacement in metres
SHAPE_UNIT_RMS = 0.04
ROOT_HEIGHT = 0.2


@dataclass(eq=False)
class BodyModel:
    template_vertices: np.ndarray  # (N, 3)
    shape_dirs: np.ndarray  # (N, 3, B)
    skinning_weights: np.ndarray  # (N, K)
    joint_regressor: np.ndarray  # (K, N)
    parents: np.ndarray  # (K,), root is ROOT_PARENT
    faces: np.ndarray  # (F, 3)
    keypoint_map: np.ndarray  # (L,)

    @property
    def num_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def num_joints(self):
        return self.parents.shape[0]

    @property
    def num_betas(self):
        return self.shape_dirs.shape[2]

    @property
    def num_keypoints(self):
        return self.keypoint_map.shape[0]

    @property
    def num_faces(self):
        return self.faces.shape[0]

    @cached_property
    def tensors(self):
        """float64 torch copies of the model arrays, built once."""
        return _ModelTensors(
            template=torch.from_numpy(np.ascontiguousarray(self.template_vertices, dtype=np.float64)),
            shape_dirs=torch.from_numpy(np.ascontiguousarray(self.shape_dirs, dtype=np.float64)),
            weights=torch.from_numpy(np.ascontiguousarray(self.skinning_weights, dtype=np.float64)),
            regressor=torch.from_numpy(np.ascontiguousarray(self.joint_regressor, dtype=np.float64)),
            parents=[int(p) for p in self.parents],
        )

    def part_labels(self):
        """Index of the dominant joint of every vertex."""
        return np.argmax(self.skinning_weights, axis=1)

    def validate(self):
        """Raise ParameterError if any structural invariant is violated."""
        problems = audit_model(self)
        if problems:
            raise ParameterError("invalid body model: " + "; ".join(problems))
        return self


@dataclass
class _ModelTensors:
    template: torch.Tensor
    shape_dirs: torch.Tensor
    weights: torch.Tensor
    regressor: torch.Tensor
    parents: list


@dataclass
class ShapeParams:
    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if not np.all(np.isfinite(self.beta)):
            raise NumericError("shape coefficients must be finite")


@dataclass
class PoseParams:
    """Per-joint rotations; ``representation`` is axis_angle, matrix or rot6d."""

    rotations: np.ndarray
    representation: str = "axis_angle"
    _dims = {"axis_angle": (3,), "matrix": (3, 3), "rot6d": (6,)}

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.representation not in self._dims:
            raise ParameterError(f"unknown rotation representation {self.representation!r}")
        dims = self._dims[self.representation]
        if self.rotations.shape[1:] != dims:
            raise ParameterError(
                f"{self.representation} pose needs shape (K, {', '.join(map(str, dims))}), "
                f"got {self.rotations.shape}")
        if self.representation == "matrix" and len(self.rotations):
            eye = np.eye(3)
            err = np.abs(np.einsum("kji,kjl->kil", self.rotations, self.rotations) - eye).max()
            if err > 1e-6 or np.any(np.abs(np.linalg.det(self.rotations) - 1.0) > 1e-6):
                raise ParameterError(f"pose matrices are not rotations (error {err:.3g})")

    @property
    def num_joints(self):
        return self.rotations.shape[0]

    def matrices(self):
        return rotations.to_matrices(self.rotations, self.representation)

    def as_representation(self, representation):
        mats = self.matrices()
        if representation == "matrix":
            return PoseParams(mats, "matrix")
        if representation == "rot6d":
            return PoseParams(rotations.matrix_to_rot6d(mats), "rot6d")
        if representation == "axis_angle":
            return PoseParams(rotations.matrix_to_axis_angle(mats), "axis_angle")
        raise ParameterError(f"unknown rotation representation {representation!r}")

    @classmethod
    def identity(cls, num_joints):
        return cls(np.zeros((num_joints, 3)), "axis_angle")


def audit_model(model):
    """List violated BodyModel invariants (empty list when the model is valid)."""
    problems = []
    n, k = model.num_vertices, model.num_joints
    w = model.skinning_weights
    if model.template_vertices.shape != (n, 3):
        problems.append("template_vertices must be (N, 3)")
    if model.shape_dirs.shape[:2] != (n, 3):
        problems.append("shape_dirs must be (N, 3, B)")
    if w.shape != (n, k):
        problems.append("skinning_weights must be (N, K)")
    elif np.any(w < 0) or np.any(np.abs(w.sum(1) - 1.0) > 1e-9):
        problems.append("skinning weight rows must be nonnegative and sum to 1")
    if model.joint_regressor.shape != (k, n):
        problems.append("joint_regressor must be (K, N)")
    elif np.any(np.abs(model.joint_regressor.sum(1) - 1.0) > 1e-9):
        problems.append("joint regressor rows must sum to 1")
    parents = model.parents
    if k < 1 or parents[0] != ROOT_PARENT:
        problems.append("joint 0 must be the root")
    if any(not (0 <= parents[j] < j) for j in range(1, k)):
        problems.append("parents must satisfy 0 <= parents[k] < k for k > 0")
    if model.faces.size and (model.faces.min() < 0 or model.faces.max() >= n):
        problems.append("face indices out of range")
    if model.keypoint_map.size and (model.keypoint_map.min() < 0 or model.keypoint_map.max() >= k):
        problems.append("keypoint_map entries out of range")
    arrays = (model.template_vertices, model.shape_dirs, w, model.joint_regressor)
    if not all(np.all(np.isfinite(a)) for a in arrays):
        problems.append("non-finite model arrays")
    return problems


# ---------------------------------------------------------------- generation


def _humanoid_skeleton(rng):
    joints = _REST_JOINTS.copy()
    parents = np.array(SMPL_PARENTS)
    # per-seed bone length and radius variation keeps models distinct
    scale = 1.0 + 0.03 * rng.standard_normal(24)
    for j in range(1, 24):
        p = parents[j]
        joints[j] = joints[p] + scale[j] * (_REST_JOINTS[j] - _REST_JOINTS[p])
    ends = []
    for j in range(24):
        c = _PRIMARY_CHILD[j]
        if c is None:
            ends.append(joints[j] + scale[j] * np.array(_LEAF_EXTENSION[j]))
        else:
            ends.append(joints[c])
    radii = _RADII * (1.0 + 0.05 * rng.standard_normal((24, 1)))
    overhang = np.zeros(24)
    overhang[0] = 0.13  # pelvis capsule reaches down between the hips
    return joints, parents, np.array(ends), radii, overhang, list(_PRIMARY_CHILD), _MIRROR_PAIRS


def _random_skeleton(rng, num_joints):
    parents = np.array([ROOT_PARENT] + [int(rng.integers(0, j)) for j in range(1, num_joints)])
    joints = np.zeros((num_joints, 3))
    for j in range(1, num_joints):
        d = rng.standard_normal(3)
        joints[j] = joints[parents[j]] + 0.25 * d / np.linalg.norm(d)
    children = [None] * num_joints
    for j in range(num_joints - 1, 0, -1):
        children[parents[j]] = j
    ends = []
    for j in range(num_joints):
        if children[j] is None:
            d = joints[j] - joints[parents[j]] if j else np.array([0.0, 0.2, 0.0])
            ends.append(joints[j] + 0.5 * d)
        else:
            ends.append(joints[children[j]])
    radii = np.full((num_joints, 2), 0.05) * (1.0 + 0.1 * rng.random((num_joints, 1)))
    return joints, parents, np.array(ends), radii, np.zeros(num_joints), children, ()


def _segment_frame(axis):
    d = axis / np.linalg.norm(axis)
    ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.8 else np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ d) * d
    e1 /= np.linalg.norm(e1)
    return d, e1, np.cross(d, e1)


def _ring_layout(count):
    """(ring size, ring count, apex count) with ring size as large as practical."""
    for n in range(8, 2, -1):
        r, rem = divmod(count, n)
        if r >= 2 and rem <= 2:
            return n, r, rem
    r, rem = divmod(count, 3)
    return 3, r, rem


def _allocate(total, sizes):
    share = sizes / sizes.sum() * (total - 3 * len(sizes))
    counts = 3 + np.floor(share).astype(int)
    order = np.argsort(-(share - np.floor(share)), kind="stable")
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return counts


def generate_toy_model(seed=0, N=900, K=24, B=10, L=17):
    """Procedural body model with capsule limbs.

    K=24 builds the SMPL-like humanoid; any other K builds a random tree. The
    result is a deterministic function of all arguments.
    """
    if K < 2 or N < 3 * K or B < 1 or L < 0 or L > K:
        raise ParameterError(f"invalid model counts N={N}, K={K}, B={B}, L={L} "
                             "(need K >= 2, N >= 3K, B >= 1, 0 <= L <= K)")
    rng = np.random.default_rng(seed)
    if K == 24:
        joints, parents, ends, radii, overhang, children, mirror = _humanoid_skeleton(rng)
    else:
        joints, parents, ends, radii, overhang, children, mirror = _random_skeleton(rng, K)

    lengths = np.linalg.norm(ends - joints, axis=1)
    counts = _allocate(N, lengths + 2.0 * radii.sum(1))

    verts, faces, owner, axial, radial = [], [], [], [], []
    joint_rings = []
    for k in range(K):
        d, e1, e2 = _segment_frame(ends[k] - joints[k])
        n, r, apexes = _ring_layout(int(counts[k]))
        base = sum(len(v) for v in verts)
        u0 = -overhang[k] / lengths[k]
        us = np.linspace(u0, 1.0, r) if r > 1 else np.zeros(1)
        ang = 2.0 * np.pi * np.arange(n) / n
        seg = []
        for u in us:
            taper = 1.0 - 0.25 * (2.0 * (u - u0) / (1.0 - u0) - 1.0) ** 4 if r > 1 else 1.0
            off = taper * (radii[k, 0] * np.cos(ang)[:, None] * e1 + radii[k, 1] * np.sin(ang)[:, None] * e2)
            seg.append(joints[k] + u * lengths[k] * d + off)
            axial.extend([u] * n)
            radial.append(off)
        # rings bracketing the joint; their centroids interpolate to it exactly
        i0 = min(int(np.searchsorted(us, 0.0, side="right")) - 1, max(r - 2, 0))
        if r > 1 and us[i0] != 0.0:
            frac = (0.0 - us[i0]) / (us[i0 + 1] - us[i0])
            joint_rings.append([(base + i0 * n + np.arange(n), 1.0 - frac),
                                (base + (i0 + 1) * n + np.arange(n), frac)])
        else:
            joint_rings.append([(base + i0 * n + np.arange(n), 1.0)])
        for i in range(r - 1):
            a0, a1 = base + i * n, base + (i + 1) * n
            for j in range(n):
                jn = (j + 1) % n
                faces.append((a0 + j, a0 + jn, a1 + jn))
                faces.append((a0 + j, a1 + jn, a1 + j))
        last = base + (r - 1) * n
        cap_len = 0.6 * min(radii[k])
        if apexes >= 1:
            seg.append((ends[k] + cap_len * d)[None])
            axial.append(1.0)
            radial.append(np.zeros((1, 3)))
            tip = base + r * n
            faces.extend((last + j, last + (j + 1) % n, tip) for j in range(n))
        else:
            faces.extend((last, last + j, last + j + 1) for j in range(1, n - 1))
        if apexes == 2:
            seg.append((joints[k] + (u0 * lengths[k] - cap_len) * d)[None])
            axial.append(u0)
            radial.append(np.zeros((1, 3)))
            tip = base + r * n + 1
            faces.extend((base + (j + 1) % n, base + j, tip) for j in range(n))
        elif r > 1:
            faces.extend((base, base + j + 1, base + j) for j in range(1, n - 1))
        v = np.concatenate(seg)
        verts.append(v)
        owner.extend([k] * len(v))
    template = np.concatenate(verts)
    owner = np.array(owner)
    axial = np.array(axial)
    radial = np.concatenate(radial)
    faces = np.array(faces, dtype=np.int64)

    weights = np.zeros((N, K))
    blend = np.clip(axial / 0.25, 0.0, 1.0)
    own = 1.0 - 0.5 * (1.0 - blend * blend * (3.0 - 2.0 * blend))
    for i in range(N):
        k = owner[i]
        if k == 0:
            weights[i, 0] = 1.0
        else:
            weights[i, k] = own[i]
            weights[i, parents[k]] += 1.0 - own[i]
    weights /= weights.sum(1, keepdims=True)

    regressor = np.zeros((K, N))
    for k in range(K):
        for ring, share in joint_rings[k]:
            regressor[k, ring] += share / len(ring)

    shape_dirs = _shape_basis(rng, template, owner, axial, radial, joints, ends, parents,
                              children, mirror, B)
    # like SMPL, the root sits 0.2 m below the model origin
    template = template - regressor[0] @ template + np.array([0.0, ROOT_HEIGHT, 0.0])

    model = BodyModel(template, shape_dirs, weights, regressor,
                      parents.astype(np.int64), faces, np.arange(L, dtype=np.int64))
    return model.validate()


def _descendants(parents, j):
    out = {j}
    for c in range(len(parents)):
        if c > j and parents[c] in out:
            out.add(c)
    return out


def _shape_basis(rng, template, owner, axial, radial, joints, ends, parents, children, mirror, B):
    K = len(parents)
    n = template.shape[0]
    girth = np.zeros((K, n, 3))
    length = np.zeros((K, n, 3))
    for k in range(K):
        mask = owner == k
        girth[k, mask] = radial[mask] / max(np.linalg.norm(radial[mask], axis=1).max(), 1e-12)
        bone = ends[k] - joints[k]
        bone = bone / np.linalg.norm(bone) * 0.1
        length[k, mask] = np.clip(axial[mask], 0.0, 1.0)[:, None] * bone
        if children[k] is not None:
            below = _descendants(parents, children[k])
            length[k, np.isin(owner, list(below))] = bone

    def combo(g_coef, l_coef):
        return np.tensordot(g_coef, girth, 1) + np.tensordot(l_coef, length, 1)

    designed = []
    if K == 24:
        limbs = np.array([1, 2, 4, 5, 13, 14, 16, 17, 18, 19])
        torso = np.array([0, 3, 6, 9])
        g, l = np.zeros(K), np.zeros(K)
        g[:] = 1.0
        designed.append(combo(g, l))
        g, l = np.zeros(K), np.zeros(K)
        l[[1, 2, 4, 5]] = 1.0
        designed.append(combo(g, l))
        g, l = np.zeros(K), np.zeros(K)
        g[torso] = 1.0
        g[limbs] = -0.5
        designed.append(combo(g, l))
        g, l = np.zeros(K), np.zeros(K)
        l[[16, 17, 18, 19]] = 1.0
        designed.append(combo(g, l))
        g, l = np.zeros(K), np.zeros(K)
        l[[3, 6, 9]] = 1.0
        l[12] = 0.5
        designed.append(combo(g, l))
    while len(designed) < B + 8:
        g, l = rng.standard_normal(K), 0.5 * rng.standard_normal(K)
        for a, b in mirror:
            g[b], l[b] = g[a], l[a]
        designed.append(combo(g, l))

    # orthogonal to rigid translation and to uniform scaling about the centroid
    centred = template - template.mean(0)
    nuisance = [np.tile(np.eye(3)[i], (n, 1)).ravel() for i in range(3)] + [centred.ravel()]
    basis = []
    for vec in nuisance:
        for b in basis:
            vec = vec - (vec @ b) * b
        basis.append(vec / np.linalg.norm(vec))
    dirs = []
    for cand in designed:
        vec = cand.ravel()
        for b in basis:
            vec = vec - (vec @ b) * b
        norm = np.linalg.norm(vec)
        if norm < 1e-8:
            continue
        vec = vec / norm
        basis.append(vec)
        dirs.append(vec * SHAPE_UNIT_RMS * np.sqrt(n))
        if len(dirs) == B:
            break
    return np.stack(dirs, axis=-1).reshape(n, 3, B)


# ---------------------------------------------------------------- forward


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def blend_shapes(model, beta):
    """Shaped rest vertices (..., N, 3) for coefficients (..., B)."""
    t = model.tensors
    return t.template + torch.einsum("nci,...i->...nc", t.shape_dirs, beta)


def lbs(model, beta, rotmats):
    """Differentiable skinning.

    ``beta`` is (..., B) and ``rotmats`` (..., K, 3, 3) as torch tensors; returns
    vertices (..., N, 3) and joints (..., K, 3) regressed from the posed mesh.
    """
    t = model.tensors
    shaped = blend_shapes(model, beta)
    rest_joints = torch.einsum("kn,...nc->...kc", t.regressor, shaped)
    rots = rotmats.unbind(-3)
    rest = rest_joints.unbind(-2)
    world_r, world_t = [], []
    for k, p in enumerate(t.parents):
        if p < 0:
            world_r.append(rots[k])
            world_t.append(rest[k])
        else:
            offset = rest[k] - rest[p]
            world_r.append(world_r[p] @ rots[k])
            world_t.append(world_t[p] + (world_r[p] * offset[..., None, :]).sum(-1))
    world_r = torch.stack(world_r, dim=-3)
    world_t = torch.stack(world_t, dim=-2)
    # transforms that map rest-pose points, not joint-local points
    skin_t = world_t - (world_r * rest_joints[..., None, :]).sum(-1)
    blend_r = torch.einsum("nk,...kij->...nij", t.weights, world_r)
    blend_t = torch.einsum("nk,...ki->...ni", t.weights, skin_t)
    verts = (blend_r * shaped[..., None, :]).sum(-1) + blend_t
    joints = torch.einsum("kn,...nc->...kc", t.regressor, verts)
    return verts, joints


def _beta_array(model, shape):
    beta = shape.beta if isinstance(shape, ShapeParams) else np.asarray(shape, dtype=np.float64)
    if beta.shape != (model.num_betas,):
        raise ParameterError(f"expected {model.num_betas} shape coefficients, got {beta.shape}")
    if not np.all(np.isfinite(beta)):
        raise NumericError("non-finite shape coefficients")
    return beta


def _pose_matrices(model, pose):
    if pose is None:
        return np.broadcast_to(np.eye(3), (model.num_joints, 3, 3))
    mats = pose.matrices() if isinstance(pose, PoseParams) else np.asarray(pose, dtype=np.float64)
    if mats.shape != (model.num_joints, 3, 3):
        raise ParameterError(f"expected pose for {model.num_joints} joints, got {mats.shape}")
    if not np.all(np.isfinite(mats)):
        raise NumericError("non-finite pose parameters")
    return mats


def lbs_forward(model, shape, pose=None):
    """Posed vertices (N, 3) and joints (K, 3) as numpy arrays.

    ``pose`` may be a PoseParams, a (K, 3, 3) matrix stack or None (identity).
    """
    beta = _beta_array(model, shape)
    mats = _pose_matrices(model, pose)
    with torch.no_grad():
        verts, joints = lbs(model, torch.from_numpy(beta), torch.from_numpy(np.ascontiguousarray(mats)))
    return verts.numpy(), joints.numpy()


def regress_joints(model, vertices):
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.shape != (model.num_vertices, 3):
        raise ParameterError(f"expected ({model.num_vertices}, 3) vertices, got {vertices.shape}")
    return model.joint_regressor @ vertices


def neutral_mesh(model, shape):
    """Identity-pose (T-pose) mesh for the given shape."""
    return lbs_forward(model, shape, None)[0]


# ---------------------------------------------------------------- file format

_HEADER = struct.Struct("<4sIIIIII")


def save_model(model, path):
    path = Path(path)
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.num_vertices, model.num_joints,
                          model.num_betas, model.num_keypoints, model.num_faces)
    arrays = (model.template_vertices, model.shape_dirs, model.skinning_weights,
              model.joint_regressor, model.parents, model.faces, model.keypoint_map)
    with open(path, "wb") as fh:
        fh.write(header)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def load_model(path):
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ParseError("truncated model header", 0, path)
    magic, version, n, k, b, l, f = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0, path)
    if version != MODEL_VERSION:
        raise ParseError(f"unsupported model version {version}", 4, path)
    shapes = [(n, 3), (n, 3, b), (n, k), (k, n), (k,), (f, 3), (l,)]
    expected = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != expected:
        raise ParseError(f"expected {expected} bytes, found {len(data)}", min(len(data), expected), path)
    offset = _HEADER.size
    out = []
    for s in shapes:
        count = int(np.prod(s))
        out.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(s).astype(np.float64))
        offset += 8 * count
    tv, sd, w, jr, par, fc, km = out
    model = BodyModel(tv, sd, w, jr, par.astype(np.int64), fc.astype(np.int64), km.astype(np.int64))
    problems = audit_model(model)
    if problems:
        raise ParseError("; ".join(problems), _HEADER.size, path)
    return model
