# Plain registration against a fixed network versus alternating refinement.
# Single trials go either way; the gain shows up in the mean over many paired trials.

from sdfreg import NeuralSdf, RegistrationConfig, TrainConfig, fit_sdf, register, register_c2f, rotation_error_deg
from sdfreg.pointcloud import PerturbationSpec, random_pose
from sdfreg.sdf import Box, Sphere, Union, sample_surface
from sdfreg.se3 import apply_transform

scene = Union([Box([0.25, 0, 0], [0.45, 0.3, 0.25]), Sphere([-0.45, 0.2, 0.15], 0.35)])
train = dict(steps=800, batch_size=256, hidden_layers=3, hidden_width=64)

for trial in range(3):
    Q = sample_surface(scene, 1024, seed=100 + trial)
    gt = random_pose(PerturbationSpec(rot_range_deg=20, trans_range=0.5), seed=trial)
    P = apply_transform(gt.inverse(), Q)

    # baseline: fit once without the Eikonal term, then register
    params, _ = fit_sdf(Q, TrainConfig(**train, lambda_e=0.0, seed=trial))
    plain = register(NeuralSdf(params), P)

    # coarse to fine: the moved source becomes extra training queries after every accepted step
    reg = RegistrationConfig(c2f_enabled=True, c2f_refine_steps=20)
    c2f, _ = register_c2f(Q, P, TrainConfig(**train, seed=trial), reg)

    e0 = rotation_error_deg(gt.rotation, plain.theta_est.rotation)
    e1 = rotation_error_deg(gt.rotation, c2f.theta_est.rotation)
    print(f"trial {trial}: self-only {e0:.3f} deg, coarse-to-fine {e1:.3f} deg ({c2f.query_count} queries)")
