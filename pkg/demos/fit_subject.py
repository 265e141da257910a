"""Recover one subject's shape from four silhouettes and keypoint sets.

    python3 demos/fit_subject.py [seed]
"""
import sys

from bodyfit.body_model import generate_toy_model
from bodyfit.camera import default_camera
from bodyfit.fitter import FitConfig, fit_gmm_prior, fit_multiframe
from bodyfit.scenarios import make_subject, neutral_pve
from bodyfit.synth import sample_pose_bank

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
model = generate_toy_model(seed, N=400)
bank = sample_pose_bank(2000, seed=seed + 1)
prior = fit_gmm_prior(bank, 8, seed=seed)
subject = make_subject(model, bank, seed, num_frames=4, image_size=64)

before = neutral_pve(model, subject.init_beta, subject.beta)
res = fit_multiframe(subject.frames, model, default_camera(64, 64), FitConfig(), prior, subject.init_beta,
                     callback=lambda it, e: it % 50 or print(f"iter {it}: energy {e:.4f}"))
after = neutral_pve(model, res.beta, subject.beta)
print(f"neutral-mesh error {before:.1f} mm -> {after:.1f} mm after {res.iterations} iterations")
