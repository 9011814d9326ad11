"""Levenberg-Marquardt registration of a point cloud against a signed distance field.

The pose is refined by left increments ``T <- exp(dxi) @ T`` that minimize the
sum of squared SDF values at the transformed source points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .neural import AdamState, NeuralSdf, TrainConfig, TrainingDivergedError, fit_sdf, refine_sdf
from .sdf import GridDomainError
from .se3 import RigidTransform, apply_transform, compose, exp_twist

# mean |D| below this counts as an exact fit
RESIDUAL_FLOOR = 1e-12


class SolverFailure(RuntimeError):
    pass


class RegistrationDomainError(GridDomainError):
    def __init__(self, iteration, cause):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration


class CoarseToFineError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@dataclass
class RegistrationConfig:
    max_iters: int = 30
    rel_tol: float = 1e-3
    lm_lambda_init: float = 1e-2
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 10.0
    lm_lambda_max: float = 1e8
    initial_pose: RigidTransform = field(default_factory=RigidTransform.identity)
    c2f_enabled: bool = False
    c2f_refine_steps: int = 50

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if not (self.lm_lambda_up > 1 and self.lm_lambda_down > 1):
            raise ValueError("damping factors must exceed 1")
        if not self.lm_lambda_init > 0:
            raise ValueError("lm_lambda_init must be positive")
        if self.c2f_refine_steps < 0:
            raise ValueError("c2f_refine_steps must be non-negative")


@dataclass
class IterationRecord:
    d_n: float
    lam: float
    step_norm: float
    accepted: bool
    eps: float
    sse: float


@dataclass
class RegistrationResult:
    theta_est: RigidTransform
    iterations: int
    stop_reason: str
    trace: list
    query_count: int = 0


def residuals(sdf, T, P):
    """SDF value at every transformed source point, in source order."""
    return sdf.value(apply_transform(T, P))


def jacobian(sdf, T, P):
    """N x 6 Jacobian of :func:`residuals` with respect to a left twist increment."""
    Y = apply_transform(T, P)
    G = sdf.gradient(Y)
    # grad^T (-[y]x) == (y x grad)^T
    return np.concatenate([np.cross(Y, G), G], axis=1)


def lm_step(J, D, lam):
    """Damped normal-equation step: (J^T J + lam diag(J^T J)) dxi = -J^T D."""
    J = np.asarray(J, dtype=float)
    D = np.asarray(D, dtype=float)
    A = J.T @ J
    diag = np.maximum(np.diag(A), 1e-12)
    M = A + lam * np.diag(diag) + 1e-12 * np.eye(A.shape[0])
    try:
        fac = cho_factor(M)
    except (LinAlgError, ValueError) as exc:
        raise SolverFailure(f"normal equations not positive definite: {exc}") from exc
    dxi = cho_solve(fac, -(J.T @ D))
    if not np.all(np.isfinite(dxi)):
        raise SolverFailure("non-finite step")
    return dxi


def _mean_abs(D):
    return float(np.mean(np.abs(D)))


def _lm_loop(sdf, P, config, after_accept=None):
    """Shared LM driver.

    ``after_accept(T, k, final)`` runs after the k-th accepted step and may
    return a replacement SDF for the remaining iterations.
    """
    P = np.asarray(P, dtype=float)
    if len(P) == 0:
        raise ValueError("source cloud is empty")
    T = config.initial_pose
    lam = config.lm_lambda_init
    trace = []
    accepted = 0

    def evaluate(model, pose, it):
        try:
            return residuals(model, pose, P)
        except GridDomainError as exc:
            raise RegistrationDomainError(it, exc) from exc

    D = evaluate(sdf, T, 0)
    sse = float(D @ D)
    stop = "max_iters"
    for it in range(1, config.max_iters + 1):
        d_prev = _mean_abs(D)
        try:
            J = jacobian(sdf, T, P)
        except GridDomainError as exc:
            raise RegistrationDomainError(it, exc) from exc
        try:
            dxi = lm_step(J, D, lam)
        except SolverFailure:
            stop = "solver_failure"
            break
        T_try = compose(exp_twist(dxi), T)
        D_try = evaluate(sdf, T_try, it)
        sse_try = float(D_try @ D_try)
        step_norm = float(np.linalg.norm(dxi))
        if sse_try < sse:
            T, D, sse = T_try, D_try, sse_try
            d_n = _mean_abs(D)
            eps = abs(d_n - d_prev) / max(d_n, RESIDUAL_FLOOR)
            trace.append(IterationRecord(d_n, lam, step_norm, True, eps, sse))
            lam /= config.lm_lambda_down
            accepted += 1
            done = eps < config.rel_tol
            if after_accept is not None:
                new_sdf = after_accept(T, accepted, done)
                if new_sdf is not None:
                    sdf = new_sdf
                    D = evaluate(sdf, T, it)
                    sse = float(D @ D)
            if done:
                stop = "converged"
                break
        else:
            trace.append(IterationRecord(d_prev, lam, step_norm, False, 0.0, sse))
            if d_prev <= RESIDUAL_FLOOR:
                stop = "converged"
                break
            lam *= config.lm_lambda_up
            if lam > config.lm_lambda_max:
                stop = "lambda_ceiling"
                break
    return RegistrationResult(T, len(trace), stop, trace)


def register(sdf, P, config=None):
    """Estimate the pose that moves ``P`` onto the zero level set of ``sdf``."""
    return _lm_loop(sdf, P, config or RegistrationConfig())


def register_c2f(Q, P, train_cfg=None, reg_cfg=None, params=None):
    """Alternate single accepted LM steps with network refinement on the moved source.

    Without ``params`` a network is first fitted to ``Q`` with the initially
    posed source mixed into its queries. After every accepted step the moved
    source is appended to the query pool and the network is refined on that
    pool only, continuing the optimizer moments of the initial fit. Returns (result, params); ``result.query_count`` is the pool size.
    """
    train_cfg = train_cfg or TrainConfig()
    reg_cfg = reg_cfg or RegistrationConfig(c2f_enabled=True)
    Q = np.asarray(Q, dtype=float)
    P = np.asarray(P, dtype=float)
    opt = AdamState(train_cfg.learning_rate)
    if params is None:
        try:
            params, _ = fit_sdf(Q, train_cfg, apply_transform(reg_cfg.initial_pose, P), opt)
        except TrainingDivergedError as exc:
            raise CoarseToFineError("initial fit", exc) from exc
    state = {"params": params}
    pool = []

    def after_accept(T, k, final):
        pool.append(apply_transform(T, P))
        if final or reg_cfg.c2f_refine_steps == 0:
            return None
        try:
            state["params"], _ = refine_sdf(
                state["params"], Q, np.concatenate(pool), train_cfg,
                steps=reg_cfg.c2f_refine_steps, seed=train_cfg.seed + k, optimizer=opt,
            )
        except TrainingDivergedError as exc:
            raise CoarseToFineError(f"refinement after alternation {k}", exc) from exc
        return NeuralSdf(state["params"])

    result = _lm_loop(NeuralSdf(params), P, reg_cfg, after_accept)
    if result.stop_reason == "solver_failure":
        raise CoarseToFineError(f"alternation {len(pool) + 1}", "solver failure")
    result.query_count = sum(len(c) for c in pool)
    return result, state["params"]
