"""Correspondence-free rigid registration against signed distance fields."""

__version__ = "0.1.0"

from .se3 import RigidTransform, apply_transform, compose, exp_twist, log_transform, point_twist_jacobian
from .sdf import Box, GridSdf, Plane, Sphere, Torus, Union, bake_grid, sample_surface, sdf_eval, sdf_grad
from .neural import MlpParams, NeuralSdf, TrainConfig, fit_sdf, mlp_forward, mlp_grad_input, refine_sdf
from .registration import RegistrationConfig, RegistrationResult, jacobian, lm_step, register, register_c2f, residuals
from .metrics import rotation_error_deg, summarize, translation_error
