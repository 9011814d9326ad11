"""Point-cloud I/O, normalization and seeded corruption protocols.

Clouds are plain ``(N, 3)`` float arrays. Every corruption keeps surviving
points in their original relative order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .se3 import RigidTransform


class CloudParseError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


def _fmt(v):
    return repr(float(v))


def _as_cloud(points):
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or P.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) cloud, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise ValueError("cloud has non-finite coordinates")
    return P


def _guess_format(path, fmt):
    if fmt is not None:
        return fmt
    return "ply-ascii" if Path(path).suffix.lower() == ".ply" else "xyz"


def read_cloud(path, fmt=None):
    """Read an ``xyz`` or ascii ``ply`` file. ``fmt`` defaults from the suffix."""
    fmt = _guess_format(path, fmt)
    lines = Path(path).read_text().splitlines()
    if fmt == "xyz":
        return _read_xyz(path, lines)
    if fmt == "ply-ascii":
        return _read_ply(path, lines)
    raise ValueError(f"unknown cloud format {fmt!r}")


def _parse_xyz_line(path, lineno, text):
    parts = text.split()
    if len(parts) != 3:
        raise CloudParseError(path, lineno, f"expected 3 coordinates, found {len(parts)}")
    try:
        xyz = [float(p) for p in parts]
    except ValueError:
        raise CloudParseError(path, lineno, f"non-numeric coordinate in {text.strip()!r}") from None
    if not all(math.isfinite(v) for v in xyz):
        raise CloudParseError(path, lineno, "non-finite coordinate")
    return xyz


def _read_xyz(path, lines):
    pts = []
    for lineno, raw in enumerate(lines, 1):
        text = raw.split("#", 1)[0]
        if not text.strip():
            continue
        pts.append(_parse_xyz_line(path, lineno, text))
    return np.array(pts, dtype=float).reshape(-1, 3)


def _read_ply(path, lines):
    if not lines or lines[0].strip() != "ply":
        raise CloudParseError(path, 1, "missing 'ply' magic")
    count = None
    props = []
    in_vertex = False
    end = None
    for lineno, raw in enumerate(lines[1:], 2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:] != ["ascii", "1.0"]:
                raise CloudParseError(path, lineno, f"unsupported format {' '.join(tok[1:])!r}")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if not in_vertex:
                raise CloudParseError(path, lineno, f"unsupported element {tok[1]!r}")
            try:
                count = int(tok[2])
            except (IndexError, ValueError):
                raise CloudParseError(path, lineno, "bad vertex count") from None
        elif tok[0] == "property":
            if not in_vertex or len(tok) != 3 or tok[1] not in ("float", "double", "float32", "float64"):
                raise CloudParseError(path, lineno, f"unsupported property line {raw.strip()!r}")
            props.append(tok[2])
        elif tok[0] == "end_header":
            end = lineno
            break
        else:
            raise CloudParseError(path, lineno, f"unexpected header line {raw.strip()!r}")
    if end is None:
        raise CloudParseError(path, len(lines), "missing end_header")
    if count is None or props != ["x", "y", "z"]:
        raise CloudParseError(path, end, "header must declare a vertex element with x y z properties")
    body = [(n, l) for n, l in enumerate(lines[end:], end + 1) if l.strip()]
    if len(body) != count:
        raise CloudParseError(path, end + len(body), f"header declares {count} vertices, body has {len(body)}")
    pts = [_parse_xyz_line(path, n, l) for n, l in body]
    return np.array(pts, dtype=float).reshape(-1, 3)


def write_cloud(path, points, fmt=None):
    """Write a cloud with round-trip float precision."""
    P = _as_cloud(points)
    fmt = _guess_format(path, fmt)
    rows = [" ".join(_fmt(v) for v in p) for p in P]
    if fmt == "xyz":
        text = "".join(r + "\n" for r in rows)
    elif fmt == "ply-ascii":
        header = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(P)}",
            "property double x",
            "property double y",
            "property double z",
            "end_header",
        ]
        text = "\n".join(header + rows) + "\n"
    else:
        raise ValueError(f"unknown cloud format {fmt!r}")
    Path(path).write_text(text)


@dataclass(frozen=True)
class Normalization:
    """Record of ``x -> (x - offset) * scale`` used by :func:`normalize_unit_box`."""

    scale: float
    offset: np.ndarray

    def apply(self, points):
        return (np.asarray(points, dtype=float) - self.offset) * self.scale

    def undo(self, points):
        return np.asarray(points, dtype=float) / self.scale + self.offset


def normalize_unit_box(points):
    """Uniformly scale and shift so the bounding box fits ``[0, 1]^3``."""
    P = _as_cloud(points)
    lo = P.min(axis=0)
    extent = float((P.max(axis=0) - lo).max())
    if not extent > 0:
        raise ValueError("cannot normalize a cloud whose points all coincide")
    rec = Normalization(1.0 / extent, lo)
    return rec.apply(P), rec


@dataclass
class PerturbationSpec:
    rot_range_deg: float = 45.0
    trans_range: float = 0.5
    noise_sigma: float = 0.0
    partial_keep_fraction: float = 1.0
    density_keep_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rot_range_deg < 0 or self.trans_range < 0 or self.noise_sigma < 0:
            raise ValueError("perturbation ranges must be non-negative")
        for name in ("partial_keep_fraction", "density_keep_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")


def euler_xyz(alpha, beta, gamma):
    """``Rz(gamma) @ Ry(beta) @ Rx(alpha)``, angles in radians."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    Rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def euler_from_rotation(R):
    """Inverse of :func:`euler_xyz` for ``|beta| < pi/2``; returns (alpha, beta, gamma)."""
    R = np.asarray(R, dtype=float)
    beta = math.asin(-max(-1.0, min(1.0, R[2, 0])))
    alpha = math.atan2(R[2, 1], R[2, 2])
    gamma = math.atan2(R[1, 0], R[0, 0])
    return alpha, beta, gamma


def random_pose(spec, seed=None):
    """Per-axis angles ~ U[0, rot_range_deg], translation ~ U[-trans_range, trans_range]^3."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    angles = np.deg2rad(rng.uniform(0.0, spec.rot_range_deg, 3))
    t = rng.uniform(-spec.trans_range, spec.trans_range, 3)
    return RigidTransform(euler_xyz(*angles), t)


def add_noise(points, sigma, seed):
    P = _as_cloud(points)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return P.copy()
    rng = np.random.default_rng(seed)
    return P + rng.normal(0.0, sigma, P.shape)


def _keep_count(n, keep_fraction):
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    # guard against 0.7 * 10 = 7.000000000000001
    return min(n, max(1, math.ceil(round(keep_fraction * n, 9))))


def crop_partial(points, keep_fraction, seed):
    """Keep the points on the far side of a random plane, exactly ceil(keep * N) of them."""
    P = _as_cloud(points)
    k = _keep_count(len(P), keep_fraction)
    if k == len(P):
        return P.copy()
    rng = np.random.default_rng(seed)
    normal = rng.standard_normal(3)
    normal /= np.linalg.norm(normal)
    proj = P @ normal
    order = np.argsort(-proj, kind="stable")
    kept = np.sort(order[:k])
    return P[kept]


def decimate(points, keep_fraction, seed):
    """Uniform random subset of size ceil(keep * N) without replacement, order preserved."""
    P = _as_cloud(points)
    k = _keep_count(len(P), keep_fraction)
    if k == len(P):
        return P.copy()
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(len(P), size=k, replace=False))
    return P[kept]
