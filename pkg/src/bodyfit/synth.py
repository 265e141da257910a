"""Synthetic training-pair generation and the dataset / pose-bank file formats."""
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment
from .body_model import PoseParams, ShapeParams, lbs_forward
from .camera import DEFAULT_FOCAL_FACTOR, PerspectiveCamera, perspective_project
from .errors import NumericError, ParameterError, ParseError
from .render import (assemble_pr, default_sigma_g, joint_heatmaps, rasterize_hard,
                     rasterize_parts, write_pgm)

DATASET_MAGIC = b"BFKD"
BANK_MAGIC = b"BFKP"
FORMAT_VERSION = 1
MAX_CAMERA_RETRIES = 20


@dataclass
class PoseBank:
    """Axis-angle poses (count, K, 3) and optional paired shapes (count, B)."""

    poses: np.ndarray
    shapes: np.ndarray = None

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.ndim != 3 or self.poses.shape[2] != 3 or len(self.poses) == 0:
            raise ParameterError("pose bank needs a nonempty (count, K, 3) pose array")
        if not np.all(np.isfinite(self.poses)):
            raise NumericError("pose bank contains non-finite rotations")
        if self.shapes is not None:
            self.shapes = np.asarray(self.shapes, dtype=np.float64)
            if self.shapes.ndim != 2 or len(self.shapes) != len(self.poses):
                raise ParameterError("bank shapes must be (count, B) matching the poses")

    def __len__(self):
        return len(self.poses)

    @property
    def num_joints(self):
        return self.poses.shape[1]

    def pose(self, i):
        return PoseParams(self.poses[i], "axis_angle")


def sample_pose_bank(count, num_joints=24, num_betas=10, seed=0, max_angle=0.4, shape_sigma=0.5):
    """Bounded random poses with a uniform root yaw, plus narrow-spread shapes.

    Each non-root joint gets a uniformly random axis and an angle uniform in
    [0, max_angle]; the root rotates about the vertical axis by a uniform angle.
    The shapes mimic a dataset with little body-shape diversity.
    """
    rng = np.random.default_rng(seed)
    axes = rng.standard_normal((count, num_joints, 3))
    axes /= np.linalg.norm(axes, axis=2, keepdims=True)
    poses = axes * rng.uniform(0.0, max_angle, size=(count, num_joints, 1))
    poses[:, 0] = 0.0
    poses[:, 0, 1] = rng.uniform(-np.pi, np.pi, size=count)
    shapes = shape_sigma * rng.standard_normal((count, num_betas))
    return PoseBank(poses, shapes)


@dataclass
class CameraSamplingConfig:
    translation_mean: np.ndarray = field(default_factory=lambda: np.array([0.0, -0.2, 2.5]))
    translation_range: np.ndarray = field(default_factory=lambda: np.array([0.05, 0.05, 0.3]))
    intrinsics: PerspectiveCamera = None

    def __post_init__(self):
        self.translation_mean = np.asarray(self.translation_mean, dtype=np.float64)
        self.translation_range = np.asarray(self.translation_range, dtype=np.float64)
        if self.intrinsics is None:
            f = DEFAULT_FOCAL_FACTOR * 256
            self.intrinsics = PerspectiveCamera(f, f, 128.0, 128.0)

    @classmethod
    def for_image(cls, height, width, focal_factor=DEFAULT_FOCAL_FACTOR, **kwargs):
        f = focal_factor * width
        return cls(intrinsics=PerspectiveCamera(f, f, width / 2.0, height / 2.0), **kwargs)

    def sample(self, rng):
        t = self.translation_mean + rng.uniform(-1.0, 1.0, 3) * self.translation_range
        return self.intrinsics.with_translation(t)


@dataclass
class SynthConfig:
    """Everything that determines a generated pair besides the model and the bank.

    Corruption magnitudes are given for a 256-pixel-wide image and rescaled to
    ``width``.
    """

    height: int = 256
    width: int = 256
    shape_aug: bool = True
    pr_aug: bool = True
    shape_sigma: float = augment.DEFAULT_SHAPE_SIGMA
    sigma_g: float = 0.0  # 0 selects 4 px per 256 px of width
    focal_factor: float = DEFAULT_FOCAL_FACTOR
    translation_mean: np.ndarray = field(default_factory=lambda: np.array([0.0, -0.2, 2.5]))
    translation_range: np.ndarray = field(default_factory=lambda: np.array([0.05, 0.05, 0.3]))
    joint_jitter_max: float = 8.0
    edge_noise_amplitude: float = 4.0
    edge_noise_probability: float = 0.5
    part_removal_probability: float = 0.1
    occlusion_box_probability: float = 0.3
    occlusion_box_size_min: float = 48.0
    occlusion_box_size_max: float = 96.0
    boxes_per_image_max: int = 2

    @property
    def image_size(self):
        return (self.height, self.width)

    def resolved_sigma_g(self):
        return self.sigma_g if self.sigma_g > 0 else default_sigma_g(self.width)

    def camera_config(self):
        return CameraSamplingConfig.for_image(self.height, self.width, self.focal_factor,
                                              translation_mean=self.translation_mean,
                                              translation_range=self.translation_range)

    def shape_config(self, num_betas):
        return augment.ShapeAugConfig.default(num_betas, self.shape_sigma)

    def pr_config(self):
        if not self.pr_aug:
            return augment.PrAugConfig.disabled()
        return augment.PrAugConfig(
            self.joint_jitter_max, self.edge_noise_amplitude, self.edge_noise_probability,
            self.part_removal_probability, self.occlusion_box_probability,
            (self.occlusion_box_size_min, self.occlusion_box_size_max),
            self.boxes_per_image_max).scaled(self.width)


@dataclass
class TrainingPair:
    input: object  # ProxyRepresentation
    target_pose: PoseParams
    target_shape: ShapeParams
    target_vertices: np.ndarray
    target_joints3d: np.ndarray
    target_joints2d: np.ndarray
    camera_translation: np.ndarray


def face_part_labels(model):
    """Dominant joint of each face (majority over its vertices' dominant joints)."""
    labels = model.part_labels()[model.faces]
    out = labels[:, 0].copy()
    agree = labels[:, 1] == labels[:, 2]
    out[agree] = labels[agree, 1]
    return out


def render_pr(model, vertices, joints3d, cam, image_size, sigma_g):
    """Clean proxy representation plus projected keypoints and 2D vertices."""
    h, w = image_size
    uv = perspective_project(vertices, cam)
    j2d = perspective_project(joints3d[model.keypoint_map], cam)
    sil = rasterize_hard(uv, model.faces, h, w)
    pr = assemble_pr(sil, joint_heatmaps(j2d, h, w, sigma_g), j2d, sigma_g)
    return pr, uv, j2d


def _store_precision(pr):
    # persisted PRs are float32; quantise now so a reload is bit-exact
    pr.silhouette = pr.silhouette.astype(np.float32).astype(np.float64)
    pr.heatmaps = pr.heatmaps.astype(np.float32).astype(np.float64)
    return pr


def sample_training_pair(bank, model, cam_cfg, shape_cfg, pr_cfg, rng, image_size=(256, 256),
                         sigma_g=None, shape_aug=True):
    """One synthetic (corrupted PR, targets) pair.

    With ``shape_aug`` False the shape comes from the bank entry paired with the
    pose (zeros if the bank has no shapes).
    """
    h, w = image_size
    sigma_g = default_sigma_g(w) if sigma_g is None else sigma_g
    idx = int(rng.integers(len(bank)))
    pose = bank.pose(idx)
    if shape_aug:
        shape = augment.augment_shape(shape_cfg, rng)
    elif bank.shapes is not None:
        shape = ShapeParams(bank.shapes[idx])
    else:
        shape = ShapeParams(np.zeros(model.num_betas))
    verts, joints = lbs_forward(model, shape, pose)
    for _ in range(MAX_CAMERA_RETRIES):
        cam = cam_cfg.sample(rng)
        depth = verts @ cam.rotation[2] + cam.translation[2]
        if np.all(depth > 0):
            break
    else:
        raise NumericError(f"no camera with positive depth after {MAX_CAMERA_RETRIES} draws")
    pr, uv, j2d = render_pr(model, verts, joints, cam, image_size, sigma_g)
    if pr_cfg is not None and _pr_enabled(pr_cfg):
        labels = face_part_labels(model)
        masks = rasterize_parts(uv, model.faces, labels, model.num_joints, h, w)
        pr = augment.augment_pr(pr, pr_cfg, masks, rng)
    return TrainingPair(_store_precision(pr), pose, shape, verts, joints, j2d, cam.translation)


def _pr_enabled(cfg):
    return (cfg.joint_jitter_max > 0 or (cfg.edge_noise_amplitude >= 0.5 and cfg.edge_noise_probability > 0)
            or cfg.part_removal_probability > 0
            or (cfg.occlusion_box_probability > 0 and cfg.boxes_per_image_max > 0))


def pair_rng(seed, index):
    """Independent stream for pair ``index`` of a dataset generated with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_pair(bank, model, cfg, seed, index):
    return sample_training_pair(bank, model, cfg.camera_config(), cfg.shape_config(model.num_betas),
                                cfg.pr_config(), pair_rng(seed, index), cfg.image_size,
                                cfg.resolved_sigma_g(), cfg.shape_aug)


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    """Stacked training pairs; PR inputs are (count, H, W, L + 1) float32."""

    inputs: np.ndarray
    poses: np.ndarray
    shapes: np.ndarray
    vertices: np.ndarray
    joints3d: np.ndarray
    joints2d: np.ndarray
    translations: np.ndarray

    def __len__(self):
        return len(self.inputs)

    @property
    def image_size(self):
        return self.inputs.shape[1:3]

    def pair(self, i):
        x = self.inputs[i].astype(np.float64)
        pr = assemble_pr(x[..., 0], x[..., 1:])
        return TrainingPair(pr, PoseParams(self.poses[i]), ShapeParams(self.shapes[i]),
                            self.vertices[i], self.joints3d[i], self.joints2d[i], self.translations[i])

    @classmethod
    def from_pairs(cls, pairs):
        return cls(
            np.stack([p.input.stacked() for p in pairs]).astype(np.float32),
            np.stack([p.target_pose.as_representation("axis_angle").rotations
                      if p.target_pose.representation != "axis_angle" else p.target_pose.rotations
                      for p in pairs]),
            np.stack([p.target_shape.beta for p in pairs]),
            np.stack([p.target_vertices for p in pairs]),
            np.stack([p.target_joints3d for p in pairs]),
            np.stack([p.target_joints2d for p in pairs]),
            np.stack([p.camera_translation for p in pairs]),
        )


_DATA_HEADER = struct.Struct("<4sI8I")


def _pair_layout(h, w, l, n, k, b):
    return [("inputs", (h, w, l + 1), "<f4"), ("poses", (k, 3), "<f8"), ("shapes", (b,), "<f8"),
            ("vertices", (n, 3), "<f8"), ("joints3d", (k, 3), "<f8"), ("joints2d", (l, 2), "<f8"),
            ("translations", (3,), "<f8")]


def save_dataset(dataset, path):
    path = Path(path)
    count, h, w, c = dataset.inputs.shape
    n, k, b = dataset.vertices.shape[1], dataset.joints3d.shape[1], dataset.shapes.shape[1]
    layout = _pair_layout(h, w, c - 1, n, k, b)
    try:
        with open(path, "wb") as fh:
            fh.write(_DATA_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, count, h, w, c - 1, n, k, b, 0))
            for i in range(count):
                for name, _, dtype in layout:
                    fh.write(np.ascontiguousarray(getattr(dataset, name)[i], dtype=dtype).tobytes())
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    return path


def load_dataset(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    if len(data) < _DATA_HEADER.size:
        raise ParseError("truncated dataset header", len(data), path)
    magic, version, count, h, w, l, n, k, b, _ = _DATA_HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0, path)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported dataset version {version}", 4, path)
    layout = _pair_layout(h, w, l, n, k, b)
    per_pair = sum(int(np.prod(s)) * np.dtype(d).itemsize for _, s, d in layout)
    if len(data) != _DATA_HEADER.size + count * per_pair:
        raise ParseError(f"expected {count} pairs of {per_pair} bytes", _DATA_HEADER.size, path)
    rec = np.dtype([(name, dtype, shape) for name, shape, dtype in layout])
    records = np.frombuffer(data, dtype=rec, count=count, offset=_DATA_HEADER.size)
    return Dataset(*(np.array(records[name], dtype=np.float32 if name == "inputs" else np.float64)
                     for name, _, _ in layout))


def build_dataset(bank, model, cfg, count, seed, progress=None):
    """Pairs ``0..count-1`` of the stream ``seed``, written straight into stacked arrays."""
    h, w = cfg.image_size
    n, k, b, l = model.num_vertices, model.num_joints, model.num_betas, model.num_keypoints
    ds = Dataset(np.empty((count, h, w, l + 1), np.float32), np.empty((count, k, 3)),
                 np.empty((count, b)), np.empty((count, n, 3)), np.empty((count, k, 3)),
                 np.empty((count, l, 2)), np.empty((count, 3)))
    for i in range(count):
        p = generate_pair(bank, model, cfg, seed, i)
        ds.inputs[i] = p.input.stacked()
        ds.poses[i] = p.target_pose.rotations
        ds.shapes[i] = p.target_shape.beta
        ds.vertices[i] = p.target_vertices
        ds.joints3d[i] = p.target_joints3d
        ds.joints2d[i] = p.target_joints2d
        ds.translations[i] = p.camera_translation
        if progress:
            progress(i)
    return ds


def generate_dataset(bank, model, cfg, count, seed, path=None, dump_pgm=None):
    """Generate ``count`` pairs with per-index streams; optionally write them out."""
    if count < 1:
        raise ParameterError("count must be at least 1")
    if cfg.shape_aug and bank.shapes is not None:
        cfg.shape_config(model.num_betas).check_against_bank(bank.shapes)
    dataset = build_dataset(bank, model, cfg, count, seed)
    if path is not None:
        save_dataset(dataset, path)
    if dump_pgm is not None:
        dump_silhouettes(dataset, dump_pgm)
    return dataset


def dump_silhouettes(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [write_pgm(directory / f"sil_{i:05d}.pgm", dataset.inputs[i, ..., 0]) for i in range(len(dataset))]


# ---------------------------------------------------------------- pose banks

_BANK_HEADER = struct.Struct("<4sIIII")


def save_pose_bank(bank, path):
    path = Path(path)
    b = 0 if bank.shapes is None else bank.shapes.shape[1]
    with open(path, "wb") as fh:
        fh.write(_BANK_HEADER.pack(BANK_MAGIC, FORMAT_VERSION, len(bank), bank.num_joints, b))
        fh.write(np.ascontiguousarray(bank.poses, dtype="<f8").tobytes())
        if bank.shapes is not None:
            fh.write(np.ascontiguousarray(bank.shapes, dtype="<f8").tobytes())
    return path


def load_pose_bank(path):
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _BANK_HEADER.size:
        raise ParseError("truncated pose bank header", len(data), path)
    magic, version, count, k, b = _BANK_HEADER.unpack_from(data)
    if magic != BANK_MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0, path)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported pose bank version {version}", 4, path)
    if count == 0:
        raise ParseError("pose bank is empty", 8, path)
    offset = _BANK_HEADER.size
    need = offset + 8 * count * (3 * k + b)
    if len(data) != need:
        raise ParseError(f"expected {need} bytes, found {len(data)}", min(len(data), need), path)
    poses = np.frombuffer(data, "<f8", count * k * 3, offset).reshape(count, k, 3).astype(np.float64)
    shapes = None
    if b:
        shapes = np.frombuffer(data, "<f8", count * b, offset + 24 * count * k).reshape(count, b).astype(np.float64)
    return PoseBank(poses, shapes)
