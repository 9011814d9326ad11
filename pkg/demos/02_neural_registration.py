# Fitting a neural SDF to a noisy target cloud, then registering against it.

import numpy as np

from sdfreg import NeuralSdf, TrainConfig, fit_sdf, mlp_forward, register, rotation_error_deg, translation_error
from sdfreg.harness import three_sphere_scene
from sdfreg.pointcloud import PerturbationSpec, add_noise, random_pose
from sdfreg.sdf import sample_surface
from sdfreg.se3 import apply_transform

scene = three_sphere_scene()
clean = sample_surface(scene, 1024, seed=0)
Q = add_noise(clean, 0.02, seed=1)

# A small network keeps the demo under a minute.
cfg = TrainConfig(steps=800, batch_size=256, hidden_layers=3, hidden_width=64, seed=2)
params, trace = fit_sdf(Q, cfg)
print("loss first/last:", trace[0, 2], trace[-1, 2])
print("mean |phi| on the clean surface:", np.abs(mlp_forward(params, clean)).mean())

gt = random_pose(PerturbationSpec(rot_range_deg=20, trans_range=0.5), seed=3)
P = apply_transform(gt.inverse(), clean)
result = register(NeuralSdf(params), P)

est = result.theta_est
print("stop reason:", result.stop_reason, "after", result.iterations, "iterations")
print("rotation error (deg):", rotation_error_deg(gt.rotation, est.rotation))
print("translation error:", translation_error(gt.translation, est.translation))
