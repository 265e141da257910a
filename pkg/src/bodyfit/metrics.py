"""Evaluation metrics: aligned joint error, scale-corrected neutral-mesh error, mask IoU.

Distances are returned in millimetres assuming model units are metres.
"""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body_model import ShapeParams, neutral_mesh
from .errors import NumericError, ParameterError

MM = 1000.0


def procrustes_align(P, Q):
    """Similarity (s, R, t) minimising |s P R + t - Q|^2 over rows, R a proper rotation."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise ParameterError("procrustes_align needs two (M, 3) arrays of the same shape")
    if len(P) < 3:
        raise ParameterError("need at least 3 points")
    mp, mq = P.mean(0), Q.mean(0)
    X, Y = P - mp, Q - mq
    var = (X * X).sum()
    if var < 1e-300:
        raise NumericError("source points are all coincident")
    U, S, Vt = np.linalg.svd(X.T @ Y)
    if S[1] < 1e-12 * S[0]:
        raise NumericError("source points are collinear; rotation is not determined")
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    s = (S * np.diag(D)).sum() / var
    t = mq - s * mp @ R
    return s, R, t


def apply_similarity(P, s, R, t):
    return s * np.asarray(P, dtype=np.float64) @ R + t


def mpjpe_pa(pred_joints, gt_joints):
    pred_joints = np.asarray(pred_joints, dtype=np.float64)
    gt_joints = np.asarray(gt_joints, dtype=np.float64)
    if pred_joints.shape != gt_joints.shape:
        raise ParameterError("joint arrays differ in shape")
    aligned = apply_similarity(pred_joints, *procrustes_align(pred_joints, gt_joints))
    return MM * np.linalg.norm(aligned - gt_joints, axis=1).mean()


def scale_corrected_error(pred_vertices, gt_vertices):
    """Mean vertex distance after centring both meshes and scaling the prediction."""
    p = np.asarray(pred_vertices, dtype=np.float64)
    g = np.asarray(gt_vertices, dtype=np.float64)
    p = p - p.mean(0)
    g = g - g.mean(0)
    denom = (p * p).sum()
    if denom <= 0:
        raise NumericError("predicted mesh has zero extent")
    s = (p * g).sum() / denom
    return MM * np.linalg.norm(s * p - g, axis=1).mean()


def pve_t_sc(pred_shape, gt_shape, model):
    pred = pred_shape if isinstance(pred_shape, ShapeParams) else ShapeParams(pred_shape)
    gt = gt_shape if isinstance(gt_shape, ShapeParams) else ShapeParams(gt_shape)
    return scale_corrected_error(neutral_mesh(model, pred), neutral_mesh(model, gt))


def silhouette_miou(pred, gt):
    a = np.asarray(pred) > 0.5
    b = np.asarray(gt) > 0.5
    if a.shape != b.shape:
        raise ParameterError("masks differ in shape")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclass
class MetricsReport:
    ids: list = field(default_factory=list)
    mpjpe_pa: list = field(default_factory=list)
    pve_t_sc: list = field(default_factory=list)
    miou: list = field(default_factory=list)

    def add(self, sample_id, mpjpe=None, pve=None, iou=None):
        self.ids.append(sample_id)
        self.mpjpe_pa.append(np.nan if mpjpe is None else float(mpjpe))
        self.pve_t_sc.append(np.nan if pve is None else float(pve))
        self.miou.append(np.nan if iou is None else float(iou))

    def __len__(self):
        return len(self.ids)

    def means(self):
        out = {}
        for name in ("mpjpe_pa", "pve_t_sc", "miou"):
            vals = np.array(getattr(self, name), dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            out[name] = float(vals.mean()) if vals.size else None
        return out

    def to_json(self):
        samples = [{"id": i, "mpjpe_pa": _num(a), "pve_t_sc": _num(b), "miou": _num(c)}
                   for i, a, b, c in zip(self.ids, self.mpjpe_pa, self.pve_t_sc, self.miou)]
        return json.dumps({"means": self.means(), "samples": samples}, indent=2) + "\n"

    def save(self, json_path, csv_path=None):
        json_path = Path(json_path)
        json_path.write_text(self.to_json())
        csv_path = Path(csv_path) if csv_path else json_path.with_suffix(".csv")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "mpjpe_pa", "pve_t_sc", "miou"])
            for row in zip(self.ids, self.mpjpe_pa, self.pve_t_sc, self.miou):
                w.writerow([row[0]] + ["" if np.isnan(v) else repr(v) for v in row[1:]])
        return json_path, csv_path

    @classmethod
    def load_json(cls, path):
        data = json.loads(Path(path).read_text())
        rep = cls()
        for s in data["samples"]:
            rep.add(s["id"], s["mpjpe_pa"], s["pve_t_sc"], s["miou"])
        return rep

    @classmethod
    def load_csv(cls, path):
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.add(row["id"], *(float(row[k]) if row[k] else None
                                     for k in ("mpjpe_pa", "pve_t_sc", "miou")))
        return rep

    def table(self):
        m = self.means()
        fmt = lambda v, f: "n/a" if v is None else f.format(v)
        return ("| samples | MPJPE-PA (mm) | PVE-T-SC (mm) | mIOU |\n|---|---|---|---|\n"
                f"| {len(self.ids)} | {fmt(m['mpjpe_pa'], '{:.2f}')} | {fmt(m['pve_t_sc'], '{:.2f}')} "
                f"| {fmt(m['miou'], '{:.3f}')} |")


def _num(v):
    return None if np.isnan(v) else v
