"""Convolutional encoder plus iterative pose/shape/camera regressor.

The network is a plain function of a :class:`ParamVector` with named weight
segments, so the same code path serves inference, finite-difference checks and
training with the Adam in :mod:`diffengine`.

Regressor output layout: K*6 pose (6D per joint), B shape, then weak-perspective
camera (s, tx, ty).
"""
import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import kvconfig
from .body_model import lbs
from .camera import WeakPerspectiveCamera, pixels_to_ndc, weak_perspective_project_t
from .diffengine import AdamState, ParamVector, adam_step, value_and_gradient
from .errors import NumericError, ParameterError, ParseError
from .rotations import axis_angle_to_matrix, matrix_to_rot6d, rot6d_to_matrix

LOSS_TERMS = ("beta", "theta", "vertices", "joints3d", "joints2d")
CHECKPOINT_MAGIC = b"BFKC"
CHECKPOINT_VERSION = 1
DEFAULT_LEARNING_RATE = 1e-4
DEFAULT_BATCH_SIZE = 140
INIT_CAMERA_SCALE = 0.9
MIN_CAMERA_SCALE = 1e-6


@dataclass
class RegressorConfig:
    in_channels: int = 18
    image_size: int = 64
    channels: tuple = (16, 32, 64, 128)  # stride-2 stages; the last width is the feature size
    kernel_size: int = 3
    hidden: int = 128
    iterations: int = 3
    num_joints: int = 24
    num_betas: int = 10
    normalization: str = "group"  # "group" (GroupNorm after each conv) or "none"
    groups: int = 4
    encoder_precision: str = "float64"  # float32 roughly halves training time

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.normalization not in ("group", "none"):
            raise ParameterError("normalization must be 'group' or 'none'")
        if self.normalization == "group" and any(c % self.groups for c in self.channels):
            raise ParameterError("every conv width must be divisible by the group count")
        if self.encoder_precision not in ("float32", "float64"):
            raise ParameterError("encoder_precision must be float32 or float64")
        if not self.channels or min(self.channels) < 1 or self.kernel_size < 1 or self.iterations < 0:
            raise ParameterError("need at least one conv stage, positive widths and iterations >= 0")

    @property
    def feature_dim(self):
        return self.channels[-1]

    @property
    def output_dim(self):
        return self.num_joints * 6 + self.num_betas + 3


def parameter_layout(cfg):
    """(name, shape) of every weight segment, in checkpoint order."""
    out = []
    c_in = cfg.in_channels
    for i, c in enumerate(cfg.channels):
        out.append((f"conv{i}.weight", (c, c_in, cfg.kernel_size, cfg.kernel_size)))
        out.append((f"conv{i}.bias", (c,)))
        if cfg.normalization == "group":
            out.append((f"norm{i}.weight", (c,)))
            out.append((f"norm{i}.bias", (c,)))
        c_in = c
    d_in = cfg.feature_dim + cfg.output_dim
    for name, d_out in (("fc1", cfg.hidden), ("fc2", cfg.hidden), ("out", cfg.output_dim)):
        out.append((f"{name}.weight", (d_out, d_in)))
        out.append((f"{name}.bias", (d_out,)))
        d_in = d_out
    out.append(("logvars", (len(LOSS_TERMS),)))
    return out


def init_params(cfg, seed=0, output_gain=0.01):
    """He-normal weights, zero biases and logvars, unit norm gains; small output layer."""
    rng = np.random.default_rng(seed)
    segs = {}
    for name, shape in parameter_layout(cfg):
        if name.startswith("norm") and name.endswith(".weight"):
            segs[name] = np.ones(shape)
        elif name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
            segs[name] = w * output_gain if name.startswith("out.") else w
        else:
            segs[name] = np.zeros(shape)
    return ParamVector(segs)


def mean_estimate(cfg, batch=None):
    """Zero shape, identity 6D rotations, scale 0.9, zero translation."""
    est = np.zeros(cfg.output_dim)
    est[:cfg.num_joints * 6] = np.tile([1.0, 0.0, 0.0, 1.0, 0.0, 0.0], cfg.num_joints)
    est[-3] = INIT_CAMERA_SCALE
    return est if batch is None else np.tile(est, (batch, 1))


def _check_input(x, cfg):
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.image_size, cfg.image_size):
        raise ParameterError(
            f"input of shape {tuple(x.shape)} does not match (batch, {cfg.in_channels}, "
            f"{cfg.image_size}, {cfg.image_size})")


def to_network_input(inputs):
    """(n, H, W, C) proxy-representation stacks to an (n, C, H, W) float64 tensor."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def encode_t(x, w, cfg):
    _check_input(x, cfg)
    dtype = getattr(torch, cfg.encoder_precision)
    pad = cfg.kernel_size // 2
    x = x.to(dtype)
    for i in range(len(cfg.channels)):
        x = F.conv2d(x, w[f"conv{i}.weight"].to(dtype), w[f"conv{i}.bias"].to(dtype), stride=2, padding=pad)
        if cfg.normalization == "group":
            x = F.group_norm(x, cfg.groups, w[f"norm{i}.weight"].to(dtype), w[f"norm{i}.bias"].to(dtype))
        x = F.relu(x)
    return x.mean(dim=(2, 3)).to(torch.float64)


def encode(inputs, params, cfg):
    """Feature vectors (n, F) for (n, H, W, C) proxy representations."""
    with torch.no_grad():
        return encode_t(to_network_input(inputs), params.unpack(torch.from_numpy(params.values)), cfg).numpy()


def regress_t(phi, w, cfg, init=None):
    est = torch.from_numpy(mean_estimate(cfg, phi.shape[0])) if init is None else init
    for _ in range(cfg.iterations):
        h = F.relu(F.linear(torch.cat([phi, est], dim=1), w["fc1.weight"], w["fc1.bias"]))
        h = F.relu(F.linear(h, w["fc2.weight"], w["fc2.bias"]))
        est = est + F.linear(h, w["out.weight"], w["out.bias"])
    return est


def split_estimate(est, cfg):
    k6 = cfg.num_joints * 6
    return (est[:, :k6].reshape(-1, cfg.num_joints, 6), est[:, k6:k6 + cfg.num_betas],
            est[:, -3], est[:, -2:])


def decode_t(est, model, cfg, image_size):
    """Raw estimates to pose6d, shape, camera and derived vertices and joints."""
    pose6d, beta, scale, t2d = split_estimate(est, cfg)
    verts, joints = lbs(model, beta, rot6d_to_matrix(pose6d))
    kp = joints[:, torch.as_tensor(model.keypoint_map)]
    j2d = weak_perspective_project_t(kp, scale, t2d, image_size)
    return {"pose6d": pose6d, "beta": beta, "scale": scale, "t2d": t2d,
            "vertices": verts, "joints3d": joints, "joints2d": j2d}


@dataclass
class Prediction:
    pose6d: np.ndarray
    shape: np.ndarray
    camera: WeakPerspectiveCamera
    vertices: np.ndarray = None
    joints3d: np.ndarray = None
    joints2d: np.ndarray = None

    def recompute(self, model, image_size):
        """Derived quantities from (pose6d, shape, camera) alone."""
        est = np.concatenate([np.ravel(self.pose6d), self.shape,
                              [self.camera.scale], self.camera.translation2d])[None]
        cfg = RegressorConfig(num_joints=len(self.pose6d), num_betas=len(self.shape))
        with torch.no_grad():
            d = decode_t(torch.from_numpy(est), model, cfg, image_size)
        return Prediction(self.pose6d, self.shape, self.camera, d["vertices"][0].numpy(),
                          d["joints3d"][0].numpy(), d["joints2d"][0].numpy())


def iterative_regress(phi, params, cfg, model=None, init=None, image_size=None):
    """Run T residual updates from ``init`` (default: mean estimate).

    With a model the result is a list of :class:`Prediction` with derived
    quantities; without one the raw (n, output_dim) estimates are returned.
    """
    phi_t = torch.as_tensor(np.atleast_2d(np.asarray(phi, dtype=np.float64)))
    init_t = None if init is None else torch.as_tensor(np.atleast_2d(np.asarray(init, dtype=np.float64)))
    with torch.no_grad():
        est = regress_t(phi_t, params.unpack(torch.from_numpy(params.values)), cfg, init_t)
        # an untrained head can emit s <= 0; clamp so the camera stays valid
        est[:, -3] = est[:, -3].clamp(min=MIN_CAMERA_SCALE)
        if model is None:
            return est.numpy()
        size = image_size or (cfg.image_size, cfg.image_size)
        d = {k: v.numpy() for k, v in decode_t(est, model, cfg, size).items()}
    return [Prediction(d["pose6d"][i], d["beta"][i],
                       WeakPerspectiveCamera(float(d["scale"][i]), d["t2d"][i]),
                       d["vertices"][i], d["joints3d"][i], d["joints2d"][i]) for i in range(len(est))]


def predict(inputs, params, cfg, model):
    x = np.asarray(inputs)
    phi = encode(x, params, cfg)
    return iterative_regress(phi, params, cfg, model, image_size=x.shape[-3:-1] if x.ndim >= 3 else None)


# ---------------------------------------------------------------- loss


def target_tensors(dataset, index, image_size):
    """Regression targets for the given pairs, as float64 tensors."""
    rot = axis_angle_to_matrix(dataset.poses[index])
    t = {
        "beta": dataset.shapes[index],
        "pose6d": matrix_to_rot6d(rot),
        "vertices": dataset.vertices[index],
        "joints3d": dataset.joints3d[index],
        "joints2d": pixels_to_ndc(dataset.joints2d[index], image_size),
    }
    return {k: torch.from_numpy(np.ascontiguousarray(v, dtype=np.float64)) for k, v in t.items()}


def task_losses(pred, target, image_size):
    """Mean squared errors (beta, theta in 6D, vertices, 3D joints, 2D joints in NDC)."""
    return {
        "beta": ((pred["beta"] - target["beta"]) ** 2).mean(),
        "theta": ((pred["pose6d"] - target["pose6d"]) ** 2).mean(),
        "vertices": ((pred["vertices"] - target["vertices"]) ** 2).mean(),
        "joints3d": ((pred["joints3d"] - target["joints3d"]) ** 2).mean(),
        "joints2d": ((pixels_to_ndc(pred["joints2d"], image_size) - target["joints2d"]) ** 2).mean(),
    }


def combine_losses(losses, logvars):
    """sum_k exp(-s_k) L_k + 1/2 sum_k s_k with s_k = log sigma_k^2."""
    s = logvars if isinstance(logvars, torch.Tensor) else torch.as_tensor(np.asarray(logvars, float))
    total = s.new_zeros(())
    for k, name in enumerate(LOSS_TERMS):
        total = total + torch.exp(-s[k]) * losses[name] + 0.5 * s[k]
    return total


def multitask_loss(pred, target, logvars, image_size):
    losses = task_losses(pred, target, image_size)
    return combine_losses(losses, logvars), losses


def network_loss(w, x, target, model, cfg, image_size):
    pred = decode_t(regress_t(encode_t(x, w, cfg), w, cfg), model, cfg, image_size)
    return multitask_loss(pred, target, w["logvars"], image_size)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ParameterError("learning rate must be >= 0, batch size >= 1, epochs >= 0")


@dataclass
class Checkpoint:
    config: RegressorConfig
    params: ParamVector
    adam: AdamState = None
    epoch: int = 0
    history: list = field(default_factory=list)


class TrainingDiverged(NumericError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def epoch_order(seed, epoch, count):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)])).permutation(count)


def evaluate_loss(dataset, params, cfg, model, batch_size=256):
    """Dataset-mean total loss and per-term MSEs under the current weights."""
    n = len(dataset)
    size = tuple(dataset.image_size)
    sums = dict.fromkeys(LOSS_TERMS, 0.0)
    w = params.unpack(torch.from_numpy(params.values))
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            x = to_network_input(dataset.inputs[idx])
            _, losses = network_loss(w, x, target_tensors(dataset, idx, size), model, cfg, size)
            for k in LOSS_TERMS:
                sums[k] += float(losses[k]) * len(idx)
        means = {k: v / n for k, v in sums.items()}
        total = float(combine_losses({k: torch.tensor(v) for k, v in means.items()}, w["logvars"]))
    return total, means


def train(data, model, cfg, tcfg, checkpoint=None, log_path=None, progress=None):
    """Minibatch Adam on all weights and logvars jointly.

    ``data`` is a Dataset or a callable ``epoch -> Dataset`` for on-the-fly data.
    Resuming from ``checkpoint`` continues its epoch count and optimiser state.
    Each epoch appends (epoch, total, per-term MSE, per-term sigma^2) to the
    history; losses are averaged over the epoch's minibatches as they were seen. A non-finite loss raises :class:`TrainingDiverged` carrying the
    last good checkpoint.
    """
    torch.set_num_threads(1)
    source = data if callable(data) else (lambda epoch: data)
    if checkpoint is None:
        checkpoint = Checkpoint(cfg, init_params(cfg, tcfg.seed))
    params = checkpoint.params
    adam = checkpoint.adam or AdamState.zeros(len(params), tcfg.learning_rate)
    adam = AdamState(tcfg.learning_rate, adam.m, adam.v, adam.t, adam.beta1, adam.beta2, adam.eps)
    history = list(checkpoint.history)
    start = checkpoint.epoch
    for epoch in range(start, start + tcfg.epochs):
        ds = source(epoch)
        if len(ds) == 0:
            raise ParameterError("training data is empty")
        size = tuple(ds.image_size)
        order = epoch_order(tcfg.seed, epoch, len(ds))
        good = Checkpoint(cfg, params, adam, epoch, list(history))
        totals, sums = 0.0, dict.fromkeys(LOSS_TERMS, 0.0)
        for b in range(0, len(ds), tcfg.batch_size):
            idx = np.sort(order[b:b + tcfg.batch_size])
            x = to_network_input(ds.inputs[idx])
            target = target_tensors(ds, idx, size)
            parts = {}

            def objective(w):
                total, losses = network_loss(w, x, target, model, cfg, size)
                parts.update({k: float(v.detach()) for k, v in losses.items()})
                return total

            try:
                value, grad = value_and_gradient(objective, params)
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", good) from exc
            totals += value * len(idx)
            for k in LOSS_TERMS:
                sums[k] += parts[k] * len(idx)
            params, adam = adam_step(adam, grad, params)
        total, means = totals / len(ds), {k: v / len(ds) for k, v in sums.items()}
        sigma2 = np.exp(params["logvars"])
        history.append([epoch + 1, total] + [means[k] for k in LOSS_TERMS] + list(sigma2))
        if progress:
            progress(epoch + 1, total)
    result = Checkpoint(cfg, params, adam, start + tcfg.epochs, history)
    if log_path:
        write_loss_csv(result.history, log_path)
    return result


def loss_csv_header():
    return (["epoch", "total"] + [f"loss_{k}" for k in LOSS_TERMS]
            + [f"sigma2_{k}" for k in LOSS_TERMS])


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(loss_csv_header())
        for row in history:
            writer.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


# ---------------------------------------------------------------- checkpoints

_CKPT_HEADER = struct.Struct("<4sIIQIII")  # magic, version, epoch, adam step, config bytes, segments, history rows


def _write_segment(fh, name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw = name.encode()
    fh.write(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def save_checkpoint(ckpt, path):
    """Header, config as key-value text, then named float64 segments.

    Segments are the weights in layout order, then ``adam.m`` and ``adam.v``
    (when present) and ``history``.
    """
    cfg_text = kvconfig.dumps(ckpt.config).encode()
    segs = list(ckpt.params.unpack().items())
    adam = ckpt.adam
    if adam is not None:
        segs += [("adam.m", adam.m), ("adam.v", adam.v),
                 ("adam.hyper", np.array([adam.lr, adam.beta1, adam.beta2, adam.eps]))]
    hist = np.array(ckpt.history, dtype=np.float64)
    if not len(ckpt.history):
        hist = np.zeros((0, 0))
    segs.append(("history", hist))
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ckpt.epoch,
                                   adam.t if adam else 0, len(cfg_text), len(segs), len(hist)))
        fh.write(cfg_text)
        for name, arr in segs:
            _write_segment(fh, name, arr)
    return path


def load_checkpoint(path):
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise ParseError("truncated checkpoint header", len(data), path)
    magic, version, epoch, step, cfg_len, nseg, _ = _CKPT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file", 0, path)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4, path)
    off = _CKPT_HEADER.size
    cfg = kvconfig.loads(data[off:off + cfg_len].decode(), RegressorConfig, path=path)
    off += cfg_len
    segs = {}
    try:
        for _ in range(nseg):
            (n,) = struct.unpack_from("<I", data, off)
            name = data[off + 4:off + 4 + n].decode()
            off += 4 + n
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
            off += 4 + 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            if off + 8 * count > len(data):
                raise ParseError(f"segment {name!r} runs past the end of the file", off, path)
            segs[name] = np.frombuffer(data, "<f8", count, off).reshape(shape).astype(np.float64)
            off += 8 * count
    except struct.error:
        raise ParseError("truncated segment header", off, path) from None
    if off != len(data):
        raise ParseError("trailing bytes after the last segment", off, path)
    weights = {}
    for name, shape in parameter_layout(cfg):
        if name not in segs or segs[name].shape != tuple(shape):
            raise ParseError(f"missing or mis-shaped weight segment {name!r}", None, path)
        weights[name] = segs[name]
    params = ParamVector(weights)
    adam = None
    if "adam.m" in segs:
        lr, b1, b2, eps = segs["adam.hyper"]
        adam = AdamState(float(lr), segs["adam.m"], segs["adam.v"], int(step), float(b1), float(b2), float(eps))
    history = [list(row) for row in segs.get("history", np.zeros((0, 0)))]
    return Checkpoint(cfg, params, adam, int(epoch), history)


def config_from_dataset(dataset, model, **kwargs):
    """Regressor config matching a dataset's input channels and resolution."""
    h, w = dataset.image_size
    if h != w:
        raise ParameterError("the encoder expects square inputs")
    return RegressorConfig(in_channels=dataset.inputs.shape[-1], image_size=h,
                           num_joints=model.num_joints, num_betas=model.num_betas, **kwargs)


def evaluate(params, cfg, dataset, model, batch_size=256, ids=None):
    """Per-sample MPJPE-PA, PVE-T-SC and silhouette IoU against the dataset targets.

    The IoU compares the predicted mesh, drawn with the predicted weak-perspective
    camera, to the dataset's input silhouette channel.
    """
    from .metrics import MetricsReport, mpjpe_pa, pve_t_sc, silhouette_miou
    from .render import rasterize_hard

    report = MetricsReport()
    h, w = dataset.image_size
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        preds = predict(dataset.inputs[idx], params, cfg, model)
        for i, p in zip(idx, preds):
            ndc = p.camera.scale * (p.vertices[:, :2] + p.camera.translation2d)
            uv = np.array([w / 2.0, h / 2.0]) * (1.0 + ndc)
            mask = rasterize_hard(uv, model.faces, h, w)
            report.add(str(i) if ids is None else ids[i],
                       mpjpe_pa(p.joints3d, dataset.joints3d[i]),
                       pve_t_sc(p.shape, dataset.shapes[i], model),
                       silhouette_miou(mask, dataset.inputs[i, ..., 0]))
    return report
