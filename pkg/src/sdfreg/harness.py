"""Seeded benchmark trials: sample, corrupt, fit, register, score."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import TrialReport, summarize
from .neural import NeuralSdf, TrainConfig, fit_sdf
from .pointcloud import PerturbationSpec, add_noise, crop_partial, decimate, random_pose, read_cloud
from .registration import RegistrationConfig, register, register_c2f
from .sdf import Sphere, Union, sample_surface, scene_from_dict
from .se3 import RigidTransform, apply_transform

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

SCENARIO_PRESETS = {
    "clean": {},
    "noise": {"noise_sigma": 0.02},
    "partial": {"partial_keep_fraction": 0.7},
    "density": {"density_keep_fraction": 0.05},
    "custom": {},
}
MODES = ("oracle", "neural", "c2f")


class ConfigError(ValueError):
    pass


def three_sphere_scene():
    """Asymmetric union of three spheres, roughly centered on the origin."""
    return Union(
        [
            Sphere([0.5, 0.0, -0.1], 0.5),
            Sphere([-0.5, 0.35, 0.0], 0.35),
            Sphere([-0.1, -0.45, 0.5], 0.25),
        ]
    )


def splitmix64(x):
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def trial_seed(master_seed, index):
    """Output ``index`` of the splitmix64 stream started at ``master_seed``."""
    return splitmix64((master_seed + index * GOLDEN) & MASK64)


def _build(cls, data, section):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{section}: unknown field {unknown[0]!r}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def registration_config_from_dict(data, section="registration"):
    data = dict(data or {})
    pose = data.pop("initial_pose", None)
    cfg = _build(RegistrationConfig, data, section)
    if pose is not None:
        try:
            cfg.initial_pose = RigidTransform.from_matrix(np.array(pose, dtype=float))
        except ValueError as exc:
            raise ConfigError(f"{section}.initial_pose: {exc}") from exc
    return cfg


def registration_config_to_dict(cfg):
    d = dataclasses.asdict(cfg)
    d["initial_pose"] = cfg.initial_pose.matrix.tolist()
    return d


def train_config_from_dict(data, section="train"):
    return _build(TrainConfig, data, section)


@dataclass
class ExperimentConfig:
    scenario: str = "clean"
    mode: str = "neural"
    trials: int = 20
    seed: int = 0
    scene: dict | None = None
    target: str | None = None
    source: str | None = None
    n_target: int = 1024
    n_source: int = 1024
    independent_source: bool = False
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    rot_thresh_deg: float = 5.0
    trans_thresh: float = 0.05
    record_timing: bool = False

    def validate(self):
        if self.scenario not in SCENARIO_PRESETS:
            raise ConfigError(f"scenario: unknown value {self.scenario!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown value {self.mode!r}")
        if self.trials < 1:
            raise ConfigError("trials: must be at least 1")
        if self.n_target < 10 or self.n_source < 1:
            raise ConfigError("n_target must be >= 10 and n_source >= 1")
        if self.scene is None and self.target is None:
            raise ConfigError("scene: give an analytic scene or a target cloud file")
        if self.mode == "oracle" and self.scene is None:
            raise ConfigError("mode: oracle mode needs an analytic scene")
        for name in ("target", "source"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name}: file {path} does not exist")
        if self.scene is not None:
            try:
                scene_from_dict(self.scene)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"scene: {exc}") from exc
        return self

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "mode": self.mode,
            "trials": self.trials,
            "seed": self.seed,
            "scene": self.scene,
            "target": self.target,
            "source": self.source,
            "n_target": self.n_target,
            "n_source": self.n_source,
            "independent_source": self.independent_source,
            "perturbation": dataclasses.asdict(self.perturbation),
            "train": dataclasses.asdict(self.train),
            "registration": registration_config_to_dict(self.registration),
            "rot_thresh_deg": self.rot_thresh_deg,
            "trans_thresh": self.trans_thresh,
            "record_timing": self.record_timing,
        }


def experiment_from_dict(data):
    """Resolve a JSON experiment description, applying scenario presets under explicit values."""
    if not isinstance(data, dict):
        raise ConfigError("experiment config must be a JSON object")
    data = dict(data)
    scenario = data.get("scenario", "clean")
    if scenario not in SCENARIO_PRESETS:
        raise ConfigError(f"scenario: unknown value {scenario!r}")
    pert = dict(SCENARIO_PRESETS[scenario])
    pert.update(data.pop("perturbation", None) or {})
    if scenario == "density":
        data.setdefault("n_target", 10000)
    cfg_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - cfg_fields)
    if unknown:
        raise ConfigError(f"unknown field {unknown[0]!r}")
    train = train_config_from_dict(data.pop("train", None))
    reg = registration_config_from_dict(data.pop("registration", None))
    pert_spec = _build(PerturbationSpec, pert, "perturbation")
    if data.get("scene") is None and data.get("target") is None:
        data["scene"] = three_sphere_scene().to_dict()
    try:
        cfg = ExperimentConfig(perturbation=pert_spec, train=train, registration=reg, **data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.perturbation.seed = cfg.seed
    return cfg.validate()


def run_trial(cfg, index):
    """Run one trial; failures are captured in the returned report.

    By default the source is the clean target sample moved by the inverse
    ground-truth pose; noise then perturbs the target, cropping and
    decimation thin the source.
    """
    seed = trial_seed(cfg.seed, index)
    sub = np.random.default_rng(seed).integers(0, 2**31 - 1, size=8)
    spec = cfg.perturbation
    gt = random_pose(spec, seed=int(sub[0]))
    start = time.perf_counter()
    est, iters, reason, err = RigidTransform.identity(), 0, "error", None
    try:
        scene = scene_from_dict(cfg.scene) if cfg.scene is not None else None
        if cfg.target is not None:
            Q = read_cloud(cfg.target)
        else:
            Q = sample_surface(scene, cfg.n_target, int(sub[1]))
        if cfg.source is not None:
            S = read_cloud(cfg.source)
        elif scene is not None and cfg.independent_source:
            S = sample_surface(scene, cfg.n_source, int(sub[2]))
        else:
            S = Q.copy()
        Q = add_noise(Q, spec.noise_sigma, int(sub[3]))
        S = crop_partial(S, spec.partial_keep_fraction, int(sub[4]))
        S = decimate(S, spec.density_keep_fraction, int(sub[5]))
        P = apply_transform(gt.inverse(), S)
        train = dataclasses.replace(cfg.train, seed=int(sub[6]))
        if cfg.mode == "oracle":
            result = register(scene, P, cfg.registration)
        elif cfg.mode == "neural":
            params, _ = fit_sdf(Q, train)
            result = register(NeuralSdf(params), P, cfg.registration)
        else:
            result, _ = register_c2f(Q, P, train, cfg.registration)
        est, iters, reason = result.theta_est, result.iterations, result.stop_reason
    except Exception as exc:  # recorded per trial, never aborts the batch
        err = f"{type(exc).__name__}: {exc}"
    ms = (time.perf_counter() - start) * 1e3 if cfg.record_timing else None
    report = TrialReport.score(index, gt, est, iters, reason, ms)
    report.error = err
    return report


def run_benchmark(cfg, progress=None):
    trials = []
    for i in range(cfg.trials):
        trials.append(run_trial(cfg, i))
        if progress is not None:
            progress(trials[-1])
    return trials, summarize(trials, cfg.rot_thresh_deg, cfg.trans_thresh)


def _num(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


CSV_HEADER = "trial,rot_err_deg,trans_err,iters,stop_reason,ms"


def trials_csv(trials):
    rows = [CSV_HEADER]
    for t in trials:
        rows.append(
            f"{t.trial_id},{_num(t.rot_error_deg)},{_num(t.trans_error)},{t.iterations},{t.stop_reason},{_num(t.wall_time_ms)}"
        )
    return "\n".join(rows) + "\n"


def _trial_dict(t, seed):
    return {
        "trial": t.trial_id,
        "seed": seed,
        "ground_truth": t.ground_truth.matrix.tolist(),
        "estimate": t.estimate.matrix.tolist(),
        "rot_error_deg": t.rot_error_deg,
        "trans_error": t.trans_error,
        "iterations": t.iterations,
        "stop_reason": t.stop_reason,
        "wall_time_ms": t.wall_time_ms,
        "error": t.error,
    }


def benchmark_report(cfg, trials, summary):
    return {
        "tool": "sdfreg",
        "version": __version__,
        "config": cfg.to_dict(),
        "trials": [_trial_dict(t, trial_seed(cfg.seed, t.trial_id)) for t in trials],
        "summary": summary.as_dict(),
    }


def write_benchmark(out_dir, cfg, trials, summary):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = benchmark_report(cfg, trials, summary)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    (out / "trials.csv").write_text(trials_csv(trials))
    return out / "report.json", out / "trials.csv"
