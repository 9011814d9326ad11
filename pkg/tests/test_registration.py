import numpy as np
import pytest

from sdfreg.harness import three_sphere_scene
from sdfreg.metrics import rotation_error_deg, translation_error
from sdfreg.neural import NeuralSdf, TrainConfig, fit_sdf, init_mlp
from sdfreg.registration import (
    CoarseToFineError,
    RegistrationConfig,
    RegistrationDomainError,
    SolverFailure,
    _lm_loop,
    jacobian,
    lm_step,
    register,
    register_c2f,
    residuals,
)
from sdfreg.sdf import Box, GridSdf, Plane, Sphere, Union, bake_grid, sample_surface
from sdfreg.se3 import RigidTransform, apply_transform, compose, exp_twist

SCENE = three_sphere_scene()


def random_pose(rng, angle=0.3, trans=0.3):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return exp_twist(np.concatenate([axis * rng.uniform(0, angle), rng.uniform(-trans, trans, 3)]))


def fd_jacobian(sdf, T, P, h=1e-6):
    cols = []
    for e in np.eye(6):
        up = residuals(sdf, compose(exp_twist(h * e), T), P)
        down = residuals(sdf, compose(exp_twist(-h * e), T), P)
        cols.append((up - down) / (2 * h))
    return np.stack(cols, axis=1)


# ---- residuals and Jacobian


def test_residual_examples():
    unit = Sphere([0, 0, 0], 1.0)
    assert residuals(unit, RigidTransform.identity(), np.array([[2.0, 0, 0]])).tolist() == [1.0]
    P = sample_surface(unit, 200, 0)
    assert np.abs(residuals(unit, RigidTransform.identity(), P)).max() < 1e-6
    T = random_pose(np.random.default_rng(0))
    assert np.array_equal(residuals(SCENE, T, P), SCENE.value(apply_transform(T, P)))


def test_jacobian_translation_block_is_gradient():
    rng = np.random.default_rng(1)
    T = random_pose(rng)
    P = rng.uniform(-1, 1, (50, 3))
    J = jacobian(SCENE, T, P)
    assert J.shape == (50, 6)
    assert np.array_equal(J[:, 3:], SCENE.gradient(apply_transform(T, P)))
    n = np.array([2.0, -1.0, 2.0]) / 3
    Jp = jacobian(Plane(n, 0.2), T, P)
    assert np.allclose(Jp[:, 3:], np.tile(n, (50, 1)), rtol=0, atol=1e-15)


def _fd_check(sdf, P, poses):
    for T in poses:
        J = jacobian(sdf, T, P)
        fd = fd_jacobian(sdf, T, P)
        assert np.linalg.norm(J - fd) <= 1e-4 * np.linalg.norm(fd)


def test_jacobian_fd_analytic():
    rng = np.random.default_rng(2)
    P = sample_surface(SCENE, 64, 3) + rng.normal(0, 0.05, (64, 3))
    _fd_check(SCENE, P, [random_pose(rng) for _ in range(20)])


def test_jacobian_fd_grid():
    rng = np.random.default_rng(4)
    grid = bake_grid(SCENE, [-2] * 3, 0.05, (81, 81, 81))
    P = sample_surface(SCENE, 64, 5)
    _fd_check(grid, P, [random_pose(rng) for _ in range(20)])


def test_jacobian_fd_neural():
    rng = np.random.default_rng(6)
    net = NeuralSdf(init_mlp(3, 32, seed=7))
    P = rng.uniform(-1, 1, (64, 3))
    _fd_check(net, P, [random_pose(rng) for _ in range(20)])


# ---- LM step


def test_lm_step_examples():
    J = np.eye(6)
    assert np.array_equal(lm_step(J, np.zeros(6), 1.0), np.zeros(6))
    v = np.arange(1.0, 7.0)
    assert np.allclose(lm_step(J, v, 1.0), -v / 2, rtol=1e-10)


def test_lm_step_solves_damped_system():
    rng = np.random.default_rng(8)
    for _ in range(50):
        J = rng.standard_normal((40, 6))
        D = rng.standard_normal(40)
        lam = 10.0 ** rng.uniform(-4, 2)
        dxi = lm_step(J, D, lam)
        A = J.T @ J
        lhs = (A + lam * np.diag(np.diag(A)) + 1e-12 * np.eye(6)) @ dxi
        assert np.linalg.norm(lhs + J.T @ D) < 1e-10


def test_lm_step_rejects_non_finite():
    J = np.eye(6)
    J[0, 0] = np.nan
    with pytest.raises(SolverFailure):
        lm_step(J, np.ones(6), 1.0)


# ---- register


def test_already_aligned_source():
    P = sample_surface(SCENE, 500, 9)
    result = register(SCENE, P)
    assert result.stop_reason == "converged"
    assert result.iterations <= 2
    assert np.abs(result.theta_est.matrix - np.eye(4)).max() < 1e-6


def test_three_sphere_recovery():
    P = sample_surface(SCENE, 1024, 10)
    axis = np.array([1.0, 2.0, -1.0]) / np.sqrt(6)
    gt = exp_twist(np.concatenate([axis * np.deg2rad(10), [0.1, 0, 0]]))
    source = apply_transform(gt.inverse(), P)
    result = register(SCENE, source)
    est = result.theta_est
    assert rotation_error_deg(gt.rotation, est.rotation) < 0.1
    assert translation_error(gt.translation, est.translation) < 1e-3
    assert np.abs(residuals(SCENE, est, source)).mean() < 1e-6


def test_constant_field_hits_lambda_ceiling():
    grid = GridSdf([-2] * 3, 1.0, (5, 5, 5), np.full(125, 0.5))
    result = register(grid, np.random.default_rng(11).uniform(-1, 1, (20, 3)))
    assert result.stop_reason == "lambda_ceiling"
    assert not any(r.accepted for r in result.trace)
    assert result.trace[-1].lam <= RegistrationConfig().lm_lambda_max


def test_stop_reason_max_iters():
    P = sample_surface(SCENE, 300, 12)
    source = apply_transform(random_pose(np.random.default_rng(13), 0.5, 0.3).inverse(), P)
    result = register(SCENE, source, RegistrationConfig(max_iters=2, rel_tol=1e-12))
    assert result.stop_reason == "max_iters"
    assert result.iterations == 2


def test_grid_domain_error_names_iteration():
    grid = bake_grid(Sphere([0, 0, 0], 0.5), [-1] * 3, 0.1, (21, 21, 21))
    with pytest.raises(RegistrationDomainError, match="iteration 0"):
        register(grid, np.array([[5.0, 0, 0]]))


def test_register_rejects_empty_source():
    with pytest.raises(ValueError):
        register(SCENE, np.empty((0, 3)))


def test_traces_obey_invariants():
    rng = np.random.default_rng(14)
    P = sample_surface(SCENE, 300, 15)
    cfg = RegistrationConfig()
    for _ in range(20):
        source = apply_transform(random_pose(rng, 0.8, 0.5).inverse(), P)
        result = register(SCENE, source, cfg)
        assert len(result.trace) == result.iterations
        floor = cfg.lm_lambda_init / cfg.lm_lambda_down ** len(result.trace)
        assert all(floor <= r.lam <= cfg.lm_lambda_max for r in result.trace)
        assert any(r.accepted for r in result.trace)
        if result.stop_reason == "converged" and result.trace[-1].accepted:
            assert result.trace[-1].eps < cfg.rel_tol


def test_accepted_steps_decrease_sse():
    rng = np.random.default_rng(16)
    P = sample_surface(SCENE, 300, 17)
    cfg = RegistrationConfig()
    for _ in range(10):
        source = apply_transform(random_pose(rng, 0.8, 0.5).inverse(), P)
        poses = [RigidTransform.identity()]
        _lm_loop(SCENE, source, cfg, lambda T, k, final: poses.append(T))
        sse = [float(np.sum(residuals(SCENE, T, source) ** 2)) for T in poses]
        assert len(sse) > 2
        assert all(b < a for a, b in zip(sse, sse[1:]))


def test_exact_field_drives_residual_to_zero():
    rng = np.random.default_rng(24)
    P = sample_surface(SCENE, 500, 25)
    for _ in range(5):
        source = apply_transform(random_pose(rng, 0.3, 0.2).inverse(), P)
        result = register(SCENE, source)
        assert np.abs(residuals(SCENE, result.theta_est, source)).mean() < 1e-6


def test_register_is_deterministic():
    P = sample_surface(SCENE, 300, 18)
    source = apply_transform(random_pose(np.random.default_rng(19)).inverse(), P)
    a = register(SCENE, source)
    b = register(SCENE, source)
    assert np.array_equal(a.theta_est.matrix, b.theta_est.matrix)
    assert [vars(r) for r in a.trace] == [vars(r) for r in b.trace]


def test_initial_pose_is_used():
    P = sample_surface(SCENE, 300, 20)
    gt = random_pose(np.random.default_rng(21))
    source = apply_transform(gt.inverse(), P)
    result = register(SCENE, source, RegistrationConfig(initial_pose=gt))
    assert result.iterations <= 2
    assert rotation_error_deg(gt.rotation, result.theta_est.rotation) < 1e-6


def test_config_validation():
    for bad in ({"max_iters": 0}, {"rel_tol": 0}, {"lm_lambda_up": 1.0}, {"lm_lambda_init": 0}):
        with pytest.raises(ValueError):
            RegistrationConfig(**bad)


# ---- coarse to fine

C2F_TRAIN = TrainConfig(steps=150, batch_size=128, hidden_layers=2, hidden_width=32, seed=2, lambda_e=0.0)


@pytest.fixture(scope="module")
def c2f_problem():
    scene = Union([Box([0.25, 0, 0], [0.45, 0.3, 0.25]), Sphere([-0.45, 0.2, 0.15], 0.35)])
    Q = sample_surface(scene, 600, 22)
    gt = random_pose(np.random.default_rng(23), 0.2, 0.1)
    P = apply_transform(gt.inverse(), Q[:256])
    params, _ = fit_sdf(Q, C2F_TRAIN)
    return Q, P, params


def test_c2f_without_refinement_matches_register(c2f_problem):
    Q, P, params = c2f_problem
    cfg = RegistrationConfig(c2f_enabled=True, c2f_refine_steps=0)
    c2f, out_params = register_c2f(Q, P, C2F_TRAIN, cfg, params=params)
    plain = register(NeuralSdf(params), P, cfg)
    assert out_params is params
    assert np.array_equal(c2f.theta_est.matrix, plain.theta_est.matrix)
    assert c2f.stop_reason == plain.stop_reason
    assert [vars(r) for r in c2f.trace] == [vars(r) for r in plain.trace]


def test_c2f_query_bookkeeping(c2f_problem):
    Q, P, params = c2f_problem
    cfg = RegistrationConfig(c2f_enabled=True, c2f_refine_steps=3, max_iters=5, rel_tol=1e-12)
    result, new_params = register_c2f(Q, P, C2F_TRAIN, cfg, params=params)
    accepted = sum(r.accepted for r in result.trace)
    assert accepted == 5
    assert result.query_count == 256 * 5 == 1280
    assert new_params is not params


def test_c2f_fits_when_no_params_given(c2f_problem):
    Q, P, _ = c2f_problem
    train = TrainConfig(steps=40, batch_size=64, hidden_layers=1, hidden_width=16)
    cfg = RegistrationConfig(c2f_enabled=True, c2f_refine_steps=2, max_iters=3)
    a, pa = register_c2f(Q, P, train, cfg)
    b, pb = register_c2f(Q, P, train, cfg)
    assert np.array_equal(a.theta_est.matrix, b.theta_est.matrix)
    assert all(np.array_equal(x, y) for x, y in zip(pa.arrays(), pb.arrays()))
    assert a.query_count == 256 * sum(r.accepted for r in a.trace)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_c2f_divergence_is_stage_tagged(c2f_problem):
    Q, P, _ = c2f_problem
    train = TrainConfig(steps=5, batch_size=32, hidden_layers=1, hidden_width=4, learning_rate=1e300)
    with pytest.raises(CoarseToFineError, match="initial fit"):
        register_c2f(Q, P, train, RegistrationConfig(c2f_enabled=True))
