"""Multi-frame body fitting with one shared shape vector.

The objective is a weighted sum of six energies: 2D joint reprojection, soft
silhouette L1, hinge angle prior, Gaussian-mixture pose prior, shape L2 and a
pull towards the initial rotation matrices. Every per-frame term is averaged
over frames. Poses are optimised in the 6D representation; rotation-matrix
terms act on the decoded matrices.
"""
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.special import logsumexp

from .body_model import PoseParams, lbs
from .camera import PerspectiveCamera, perspective_project_t
from .diffengine import AdamState, ParamVector, adam_step, value_and_gradient
from .errors import NumericError, ParameterError, ParseError
from .render import DEFAULT_TAU, rasterize_soft, read_pgm, write_pgm
from .rotations import (axis_angle_to_matrix, matrix_to_axis_angle, matrix_to_rot6d,
                        rot6d_to_matrix)

TERMS = ("joints", "silhouette", "angle", "pose_prior", "shape", "init_pose")
RESULT_MAGIC = b"BFKF"
RESULT_VERSION = 1
# sharper than the renderer default: at low resolution faces are sub-pixel and a
# wide sigmoid blurs the render well past the body outline
FIT_TAU = 0.1

# (joint, axis, penalised sign): elbows bend forward about y, knees backward about x
HUMANOID_HINGES = (
    (18, (0.0, 1.0, 0.0), -1.0),
    (19, (0.0, 1.0, 0.0), 1.0),
    (4, (1.0, 0.0, 0.0), -1.0),
    (5, (1.0, 0.0, 0.0), -1.0),
)


@dataclass
class FitFrame:
    target_silhouette: np.ndarray
    target_joints2d: np.ndarray
    confidences: np.ndarray
    init_pose: PoseParams
    init_translation: np.ndarray

    def __post_init__(self):
        self.target_silhouette = np.asarray(self.target_silhouette, dtype=np.float64)
        self.target_joints2d = np.asarray(self.target_joints2d, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        self.init_translation = np.asarray(self.init_translation, dtype=np.float64)
        if not np.all((self.target_silhouette == 0) | (self.target_silhouette == 1)):
            raise ParameterError("target silhouettes must be binary")
        if self.confidences.shape != (len(self.target_joints2d),):
            raise ParameterError("need one confidence per target joint")
        if np.any((self.confidences < 0) | (self.confidences > 1)):
            raise ParameterError("joint confidences must lie in [0, 1]")


@dataclass
class FitConfig:
    lambda_joints: float = 1.0
    lambda_silhouette: float = 100.0
    lambda_angle: float = 0.1
    lambda_pose_prior: float = 0.01
    lambda_shape: float = 0.005
    lambda_init_pose: float = 0.1
    learning_rate: float = 0.01
    max_iters: int = 500
    tolerance: float = 1e-6
    tolerance_window: int = 10
    tau: float = FIT_TAU

    def __post_init__(self):
        if any(w < 0 for w in self.lambdas().values()):
            raise ParameterError("energy weights must be nonnegative")
        if not self.learning_rate > 0:
            raise ParameterError("learning rate must be positive")

    def lambdas(self):
        return {t: getattr(self, f"lambda_{t}") for t in TERMS}


@dataclass
class GmmPosePrior:
    """Mixture over body-pose rotation vectors (root excluded), full covariances."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ParameterError("mixture weights must be nonnegative and sum to 1")
        try:
            self._chol = np.linalg.cholesky(self.covariances)
        except np.linalg.LinAlgError:
            raise ParameterError("mixture covariances must be positive definite") from None
        self._chol_t = torch.from_numpy(self._chol)
        self._means_t = torch.from_numpy(self.means)
        dim = self.means.shape[1]
        log_det = 2.0 * np.log(np.diagonal(self._chol, axis1=1, axis2=2)).sum(1)
        self._log_norm_t = torch.from_numpy(np.log(self.weights) - 0.5 * (dim * np.log(2 * np.pi) + log_det))

    @property
    def dim(self):
        return self.means.shape[1]

    def nll_t(self, x):
        """-log density of (..., D) pose vectors, via log-sum-exp over components."""
        diff = (x[..., None, :] - self._means_t)[..., None]  # (..., M, D, 1)
        z = torch.linalg.solve_triangular(self._chol_t, diff, upper=False)[..., 0]
        log_comp = self._log_norm_t - 0.5 * (z * z).sum(-1)
        return -torch.logsumexp(log_comp, dim=-1)

    def nll(self, x):
        return self.nll_t(torch.as_tensor(np.asarray(x, dtype=np.float64))).numpy()


# ---------------------------------------------------------------- energies


def body_pose_vector(rotmats):
    """Rotation vectors of all non-root joints, flattened: (..., 3(K-1))."""
    aa = matrix_to_axis_angle(rotmats[..., 1:, :, :])
    return aa.reshape(*aa.shape[:-2], -1)


def _as_t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _camera_tensors(cam):
    return (cam.fx, cam.fy, cam.cx, cam.cy, torch.from_numpy(cam.rotation))


def _project(points, cam, transl):
    fx, fy, cx, cy, rot = _camera_tensors(cam)
    uv, z = perspective_project_t(points, fx, fy, cx, cy, rot, transl)
    if bool((z.detach() <= 0).any()):
        raise NumericError("a projected point lies at or behind the camera plane")
    return uv


def silhouette_energy(model, beta, rotmats, transl, cam, target_silhouettes, tau=DEFAULT_TAU):
    """Mean over frames of the L1 difference between soft render and target, per pixel.

    ``rotmats`` is (N, K, 3, 3), ``transl`` (N, 3), ``target_silhouettes`` (N, H, W).
    """
    rotmats, transl, beta = _as_t(rotmats), _as_t(transl), _as_t(beta)
    targets = _as_t(target_silhouettes)
    n, h, w = targets.shape
    verts, _ = lbs(model, beta.expand(n, -1), rotmats)
    uv = _project(verts, cam, transl)
    total = 0.0
    for i in range(n):
        soft = rasterize_soft(uv[i], model.faces, h, w, tau)
        total = total + (soft - targets[i]).abs().sum() / (w * h)
    return total / n


def joint_energy(model, beta, rotmats, transl, cam, target_joints2d, confidences):
    """Mean over frames of sum_l w_l |proj(j_l) - target_l|^2 / L."""
    rotmats, transl, beta = _as_t(rotmats), _as_t(transl), _as_t(beta)
    targets, conf = _as_t(target_joints2d), _as_t(confidences)
    n = rotmats.shape[0]
    _, joints = lbs(model, beta.expand(n, -1), rotmats)
    uv = _project(joints[:, torch.as_tensor(model.keypoint_map)], cam, transl)
    per_frame = (conf * ((uv - targets) ** 2).sum(-1)).sum(-1) / targets.shape[1]
    return per_frame.mean()


def angle_prior_energy(rotmats, hinges=HUMANOID_HINGES):
    """Mean over frames and hinges of exp(sign * rotation about the hinge axis)."""
    rotmats = _as_t(rotmats)
    if rotmats.ndim == 3:
        rotmats = rotmats[None]
    if not hinges:
        return rotmats.new_zeros(())
    joints = [h[0] for h in hinges]
    axes = torch.tensor([h[1] for h in hinges], dtype=torch.float64)
    signs = torch.tensor([h[2] for h in hinges], dtype=torch.float64)
    aa = matrix_to_axis_angle(rotmats[:, joints])
    return torch.exp(signs * (aa * axes).sum(-1)).mean()


def gmm_prior_energy(rotmats, prior):
    rotmats = _as_t(rotmats)
    if rotmats.ndim == 3:
        rotmats = rotmats[None]
    return prior.nll_t(body_pose_vector(rotmats)).mean()


def shape_prior_energy(beta):
    beta = _as_t(beta)
    return (beta * beta).sum()


def init_pose_energy(rotmats, init_rotmats):
    """Mean over frames of |r(theta) - r(theta_init)|^2 / 9K."""
    rotmats, init_rotmats = _as_t(rotmats), _as_t(init_rotmats)
    if rotmats.ndim == 3:
        rotmats, init_rotmats = rotmats[None], init_rotmats[None]
    diff = (rotmats - init_rotmats).reshape(rotmats.shape[0], -1)
    return ((diff * diff).sum(-1) / diff.shape[1]).mean()


@dataclass
class FitProblem:
    """Frames plus everything the energies need besides the free parameters."""

    frames: list
    model: object
    camera: PerspectiveCamera
    config: FitConfig = field(default_factory=FitConfig)
    prior: GmmPosePrior = None
    hinges: tuple = HUMANOID_HINGES

    def __post_init__(self):
        if not self.frames:
            raise ParameterError("need at least one frame")
        self.silhouettes = torch.from_numpy(np.stack([f.target_silhouette for f in self.frames]))
        self.joints2d = torch.from_numpy(np.stack([f.target_joints2d for f in self.frames]))
        self.confidences = torch.from_numpy(np.stack([f.confidences for f in self.frames]))
        self.init_rotmats = torch.from_numpy(np.stack([f.init_pose.matrices() for f in self.frames]))

    @property
    def num_frames(self):
        return len(self.frames)


def energy_terms(problem, beta, rotmats, transl):
    """Unweighted energies for the given parameters (torch scalars)."""
    cfg, model = problem.config, problem.model
    lam = cfg.lambdas()
    zero = beta.new_zeros(())
    terms = {}
    terms["joints"] = (joint_energy(model, beta, rotmats, transl, problem.camera,
                                    problem.joints2d, problem.confidences)
                       if lam["joints"] else zero)
    terms["silhouette"] = (silhouette_energy(model, beta, rotmats, transl, problem.camera,
                                             problem.silhouettes, cfg.tau)
                           if lam["silhouette"] else zero)
    terms["angle"] = angle_prior_energy(rotmats, problem.hinges) if lam["angle"] else zero
    terms["pose_prior"] = (gmm_prior_energy(rotmats, problem.prior)
                           if lam["pose_prior"] and problem.prior is not None else zero)
    terms["shape"] = shape_prior_energy(beta) if lam["shape"] else zero
    terms["init_pose"] = init_pose_energy(rotmats, problem.init_rotmats) if lam["init_pose"] else zero
    return terms


def total_objective(problem, beta, rotmats, transl):
    """Weighted energy sum; returns (total, dict of unweighted terms)."""
    beta, rotmats, transl = _as_t(beta), _as_t(rotmats), _as_t(transl)
    terms = energy_terms(problem, beta, rotmats, transl)
    lam = problem.config.lambdas()
    total = sum(lam[t] * terms[t] for t in TERMS)
    return total, terms


# ---------------------------------------------------------------- optimisation


@dataclass
class FitResult:
    beta: np.ndarray
    poses: np.ndarray  # (N, K, 3) rotation vectors
    translations: np.ndarray  # (N, 3)
    energies: dict
    initial_energy: float
    final_energy: float
    iterations: int
    converged: bool
    trace: np.ndarray  # (iterations, 1 + len(TERMS)): total then unweighted terms

    def pose_params(self, i):
        return PoseParams(self.poses[i], "axis_angle")


class FitAborted(NumericError):
    def __init__(self, message, trace, best):
        super().__init__(message)
        self.trace = trace
        self.best = best


def _param_vector(beta, frames_rot6d, transl):
    segs = {"beta": beta}
    for i, (r, t) in enumerate(zip(frames_rot6d, transl)):
        segs[f"theta_{i}"] = r
        segs[f"transl_{i}"] = t
    return ParamVector(segs)


def _unpack(problem, segs):
    n = problem.num_frames
    beta = segs["beta"]
    rot6d = torch.stack([segs[f"theta_{i}"] for i in range(n)]) if isinstance(beta, torch.Tensor) \
        else np.stack([segs[f"theta_{i}"] for i in range(n)])
    transl = torch.stack([segs[f"transl_{i}"] for i in range(n)]) if isinstance(beta, torch.Tensor) \
        else np.stack([segs[f"transl_{i}"] for i in range(n)])
    return beta, rot6d, transl


def fit_multiframe(frames, model, cam, cfg=None, prior=None, init_beta=None,
                   hinges=HUMANOID_HINGES, callback=None):
    """Adam on one shared shape plus per-frame 6D poses and translations.

    Stops after ``max_iters`` or when the running-best energy falls by less than
    ``tolerance`` (relative) over ``tolerance_window`` iterations. Returns the lowest-energy
    iterate, so the final energy never exceeds the initial one.
    """
    cfg = cfg or FitConfig()
    problem = FitProblem(list(frames), model, cam, cfg, prior, hinges)
    init_beta = np.zeros(model.num_betas) if init_beta is None else np.asarray(init_beta, float)
    if not (np.all(np.isfinite(init_beta))
            and all(np.all(np.isfinite(f.init_translation)) for f in frames)):
        raise ParameterError("initialisation must be finite")
    rot6d0 = [matrix_to_rot6d(f.init_pose.matrices()) for f in frames]
    params = _param_vector(init_beta, rot6d0, [f.init_translation for f in frames])

    last_terms = {}

    def objective(segs):
        beta, r6, transl = _unpack(problem, segs)
        total, terms = total_objective(problem, beta, rot6d_to_matrix(r6), transl)
        last_terms.clear()
        last_terms.update({k: float(v.detach()) for k, v in terms.items()})
        return total

    state = AdamState.zeros(len(params), cfg.learning_rate)
    trace, best_trace = [], []
    best = (np.inf, params, {})
    converged = False
    for it in range(cfg.max_iters):
        try:
            value, grad = value_and_gradient(objective, params)
        except NumericError as exc:
            raise FitAborted(f"iteration {it}: {exc}", np.array(trace), best[1]) from exc
        trace.append([value] + [last_terms[t] for t in TERMS])
        if value < best[0]:
            best = (value, params, dict(last_terms))
        if callback:
            callback(it, value)
        best_trace.append(best[0])
        w = cfg.tolerance_window
        if len(best_trace) > w:
            prev = best_trace[-1 - w]
            if (prev - best[0]) <= cfg.tolerance * abs(prev):
                converged = True
                break
        params, state = adam_step(state, grad, params)
    trace = np.array(trace)
    energy, params, terms = best
    beta, r6, transl = _unpack(problem, params.unpack())
    poses = matrix_to_axis_angle(rot6d_to_matrix(r6))
    return FitResult(beta.copy(), poses, transl.copy(), terms, float(trace[0, 0]), float(energy),
                     len(trace), converged, trace)


# ---------------------------------------------------------------- GMM prior


def fit_gmm(data, num_components, seed=0, reg_covar=1e-6, tol=1e-6, max_iter=500, max_retries=10):
    """EM for a full-covariance Gaussian mixture.

    Returns (prior, per-iteration mean log-likelihoods). Components that lose all
    their mass trigger a fresh seeded initialisation.
    """
    x = np.asarray(data, dtype=np.float64)
    n, d = x.shape
    if n < 10 * num_components:
        raise ParameterError(f"need at least {10 * num_components} samples for {num_components} components")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        result = _em(x, num_components, rng, reg_covar, tol, max_iter)
        if result is not None:
            return result
    raise NumericError("mixture fit kept producing empty components")


def _em(x, m, rng, reg_covar, tol, max_iter):
    n, d = x.shape
    # k-means++ style seeding
    centres = [x[rng.integers(n)]]
    for _ in range(1, m):
        d2 = np.min([((x - c) ** 2).sum(1) for c in centres], axis=0)
        centres.append(x[rng.choice(n, p=d2 / d2.sum())])
    means = np.array(centres)
    cov0 = np.cov(x, rowvar=False, bias=True).reshape(d, d) + reg_covar * np.eye(d)
    covs = np.repeat(cov0[None], m, axis=0)
    weights = np.full(m, 1.0 / m)
    history = []
    for _ in range(max_iter):
        log_prob = _component_log_prob(x, weights, means, covs)
        norm = logsumexp(log_prob, axis=1)
        history.append(norm.mean())
        resp = np.exp(log_prob - norm[:, None])
        nk = resp.sum(0)
        if np.any(nk < 1e-8 * n):
            return None
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        for k in range(m):
            diff = x - means[k]
            covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k] + reg_covar * np.eye(d)
        if len(history) > 1 and abs(history[-1] - history[-2]) <= tol * abs(history[-2]):
            break
    final = logsumexp(_component_log_prob(x, weights, means, covs), axis=1).mean()
    history.append(final)
    return GmmPosePrior(weights / weights.sum(), means, covs), np.array(history)


def _component_log_prob(x, weights, means, covs):
    n, d = x.shape
    out = np.empty((n, len(weights)))
    for k in range(len(weights)):
        chol = np.linalg.cholesky(covs[k])
        z = np.linalg.solve(chol, (x - means[k]).T)
        log_det = 2.0 * np.log(np.diag(chol)).sum()
        out[:, k] = np.log(weights[k]) - 0.5 * (d * np.log(2 * np.pi) + log_det + (z * z).sum(0))
    return out


def fit_gmm_prior(bank, num_components=8, seed=0, **kwargs):
    """Mixture pose prior over the bank's non-root rotation vectors."""
    mats = axis_angle_to_matrix(bank.poses)
    x = matrix_to_axis_angle(mats[:, 1:]).reshape(len(bank), -1)
    return fit_gmm(x, num_components, seed, **kwargs)[0]


# ---------------------------------------------------------------- files


def write_fit_problem(directory, frames, cam):
    """Frame directory: camera.txt plus per-frame PGM, joints and init files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "camera.txt", "w") as fh:
        fh.write(" ".join(repr(float(v)) for v in (cam.fx, cam.fy, cam.cx, cam.cy)) + "\n")
        fh.write(" ".join(repr(float(v)) for v in cam.rotation.ravel()) + "\n")
    for i, f in enumerate(frames):
        write_pgm(directory / f"frame_{i:03d}.pgm", f.target_silhouette)
        with open(directory / f"frame_{i:03d}_joints.txt", "w") as fh:
            for (u, v), c in zip(f.target_joints2d, f.confidences):
                fh.write(f"{float(u)!r} {float(v)!r} {float(c)!r}\n")
        with open(directory / f"frame_{i:03d}_init.txt", "w") as fh:
            for r in f.init_pose.as_representation("axis_angle").rotations:
                fh.write(" ".join(repr(float(v)) for v in r) + "\n")
            fh.write("t " + " ".join(repr(float(v)) for v in f.init_translation) + "\n")
    return directory


def _read_rows(path, width):
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if parts[0] == "t":
            parts = parts[1:]
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"non-numeric entry in {line!r}", lineno, path) from None
        if len(vals) != width:
            raise ParseError(f"expected {width} numbers, got {len(vals)}", lineno, path)
        rows.append(vals)
    return np.array(rows).reshape(-1, width)


def read_fit_problem(directory, num_joints=None, max_frames=None):
    """Inverse of :func:`write_fit_problem`; returns (frames, camera)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ParseError("frame directory does not exist", None, directory)
    cam_path = directory / "camera.txt"
    if not cam_path.exists():
        raise ParseError("missing camera.txt", None, directory)
    lines = cam_path.read_text().split("\n")
    try:
        fx, fy, cx, cy = (float(v) for v in lines[0].split())
        rot = np.array([float(v) for v in lines[1].split()]).reshape(3, 3) if len(lines) > 1 and lines[1].strip() else np.eye(3)
    except ValueError:
        raise ParseError("camera.txt needs 'fx fy cx cy' and an optional 9-value rotation", 1, cam_path) from None
    cam = PerspectiveCamera(fx, fy, cx, cy, rot)
    sils = sorted(directory.glob("frame_[0-9][0-9][0-9].pgm"))
    if not sils:
        raise ParseError("no frame_NNN.pgm files", None, directory)
    frames = []
    for sil_path in sils[:max_frames]:
        stem = sil_path.stem
        sil = read_pgm(sil_path)
        if not np.all((sil == 0) | (sil == 1)):
            raise ParseError("silhouette must be binary (0 or 255)", None, sil_path)
        jpath, ipath = directory / f"{stem}_joints.txt", directory / f"{stem}_init.txt"
        for p in (jpath, ipath):
            if not p.exists():
                raise ParseError(f"missing {p.name}", None, directory)
        joints = _read_rows(jpath, 3)
        init = _read_rows(ipath, 3)
        if len(init) < 2:
            raise ParseError("init file needs K rotation rows and a translation row", None, ipath)
        pose, transl = init[:-1], init[-1]
        if num_joints is not None and len(pose) != num_joints:
            raise ParseError(f"expected {num_joints} rotation rows, got {len(pose)}", None, ipath)
        frames.append(FitFrame(sil, joints[:, :2], joints[:, 2], PoseParams(pose), transl))
    return frames, cam


_RESULT_HEADER = struct.Struct("<4sIIIIII")


def save_fit_result(result, path, summary_path=None):
    """Binary result (header, beta, poses, translations, trace) plus a JSON summary."""
    path = Path(path)
    n, k, _ = result.poses.shape
    with open(path, "wb") as fh:
        fh.write(_RESULT_HEADER.pack(RESULT_MAGIC, RESULT_VERSION, n, k, result.beta.size,
                                     result.trace.shape[0], result.trace.shape[1]))
        for arr in (result.beta, result.poses, result.translations, result.trace):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    summary = {
        "frames": n,
        "iterations": result.iterations,
        "converged": result.converged,
        "initial_energy": result.initial_energy,
        "final_energy": result.final_energy,
        "energies": result.energies,
        "beta": [float(b) for b in result.beta],
    }
    summary_path = Path(summary_path) if summary_path else path.with_suffix(".json")
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return path, summary_path


def load_fit_result(path):
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _RESULT_HEADER.size:
        raise ParseError("truncated fit result header", len(data), path)
    magic, version, n, k, b, iters, cols = _RESULT_HEADER.unpack_from(data)
    if magic != RESULT_MAGIC or version != RESULT_VERSION:
        raise ParseError("not a version-1 fit result", 0, path)
    sizes = [b, n * k * 3, n * 3, iters * cols]
    if len(data) != _RESULT_HEADER.size + 8 * sum(sizes):
        raise ParseError("fit result has the wrong length", _RESULT_HEADER.size, path)
    off = _RESULT_HEADER.size
    out = []
    for s in sizes:
        out.append(np.frombuffer(data, "<f8", s, off).astype(np.float64))
        off += 8 * s
    beta, poses, transl, trace = out
    trace = trace.reshape(iters, cols)
    summary_path = path.with_suffix(".json")
    energies = json.loads(summary_path.read_text())["energies"] if summary_path.exists() else {}
    final = float(trace[:, 0].min()) if iters else math.nan
    return FitResult(beta, poses.reshape(n, k, 3), transl.reshape(n, 3), energies,
                     float(trace[0, 0]) if iters else math.nan, final, iters,
                     False, trace)
