"""Pose a toy body, render its silhouette and joint heatmaps, write them as PGM files.

    python3 demos/body_and_render.py out_dir
"""
import sys
from pathlib import Path

import numpy as np

from bodyfit.body_model import PoseParams, ShapeParams, generate_toy_model, lbs_forward
from bodyfit.camera import default_camera, perspective_project
from bodyfit.render import assemble_pr, default_sigma_g, joint_heatmaps, rasterize_hard, write_pgm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_render")
out.mkdir(parents=True, exist_ok=True)
model = generate_toy_model(0)

pose = np.zeros((model.num_joints, 3))
pose[18] = [0, 0, -1.0]   # raise one shoulder
pose[4] = [0.8, 0, 0]     # bend a knee
for name, beta in (("slim", -1.5), ("broad", 1.5)):
    shape = ShapeParams(np.r_[beta, np.zeros(model.num_betas - 1)])
    verts, joints = lbs_forward(model, shape, PoseParams(pose))
    cam = default_camera(128, 128).with_translation([0.0, -0.2, 2.5])
    sil = rasterize_hard(perspective_project(verts, cam), model.faces, 128, 128)
    kp = perspective_project(joints[model.keypoint_map], cam)
    sigma = default_sigma_g(128)
    pr = assemble_pr(sil, joint_heatmaps(kp, 128, 128, sigma), kp, sigma)
    write_pgm(out / f"{name}_silhouette.pgm", pr.silhouette)
    write_pgm(out / f"{name}_heatmaps.pgm", pr.heatmaps.max(axis=-1))
    print(f"{name}: {int(sil.sum())} silhouette pixels")
print(f"wrote PGM files to {out}")
