# Registering a cloud against an exact analytic SDF.

import numpy as np

from sdfreg import register, rotation_error_deg, translation_error
from sdfreg.harness import three_sphere_scene
from sdfreg.pointcloud import PerturbationSpec, random_pose
from sdfreg.sdf import sample_surface
from sdfreg.se3 import apply_transform

# Target surface: three spheres of different radii, so the pose is fully pinned.
scene = three_sphere_scene()
Q = sample_surface(scene, 1024, seed=0)

# Move the sample off the surface by the inverse of a random pose.
gt = random_pose(PerturbationSpec(rot_range_deg=45, trans_range=0.5), seed=1)
P = apply_transform(gt.inverse(), Q)
print("mean |sdf| before:", np.abs(scene.value(P)).mean())

# LM on the SDF residuals; no correspondences are needed.
result = register(scene, P)
print("stop reason:", result.stop_reason, "after", result.iterations, "iterations")
for k, rec in enumerate(result.trace):
    print(f"  {k:2d}  mean|D| {rec.d_n:.3e}  lambda {rec.lam:.0e}  accepted {rec.accepted}")

est = result.theta_est
print("rotation error (deg):", rotation_error_deg(gt.rotation, est.rotation))
print("translation error:", translation_error(gt.translation, est.translation))
