"""Signed distance fields: analytic primitives, unions and trilinear voxel grids.

Every model exposes ``value(x)`` and ``gradient(x)`` on points shaped (3,) or
(N, 3). Values are negative inside, positive outside.
"""

from __future__ import annotations

import struct

import numpy as np


class GridDomainError(ValueError):
    """A query fell outside the bounds of a :class:`GridSdf`."""


class SamplingError(RuntimeError):
    pass


def _points(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError(f"expected points with a trailing axis of length 3, got shape {x.shape}")
    return x


def _unit_or_default(v, norm):
    """Normalize rows of v; rows with zero norm become +x."""
    out = np.zeros_like(v)
    ok = norm > 0
    out[ok] = v[ok] / norm[ok, None]
    out[~ok] = (1.0, 0.0, 0.0)
    return out


class SdfModel:
    """Base class. Subclasses implement ``_value`` / ``_gradient`` on (N, 3) arrays."""

    def value(self, x):
        x = _points(x)
        flat = x.reshape(-1, 3)
        return self._value(flat).reshape(x.shape[:-1])

    def gradient(self, x):
        x = _points(x)
        flat = x.reshape(-1, 3)
        return self._gradient(flat).reshape(x.shape)

    def _value(self, x):
        raise NotImplementedError

    def _gradient(self, x):
        raise NotImplementedError

    __call__ = value


class Sphere(SdfModel):
    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float).reshape(3)
        self.radius = float(radius)
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def _value(self, x):
        return np.linalg.norm(x - self.center, axis=1) - self.radius

    def _gradient(self, x):
        d = x - self.center
        return _unit_or_default(d, np.linalg.norm(d, axis=1))

    def area(self):
        return 4.0 * np.pi * self.radius**2

    def _sample(self, rng, n):
        u = rng.standard_normal((n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return self.center + self.radius * u

    def to_dict(self):
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius}


class Box(SdfModel):
    """Axis-aligned box with exact (interior-correct) distance."""

    def __init__(self, center, half_extents):
        self.center = np.asarray(center, dtype=float).reshape(3)
        self.half_extents = np.asarray(half_extents, dtype=float).reshape(3)
        if not np.all(self.half_extents > 0):
            raise ValueError("box half extents must be positive")

    def _value(self, x):
        q = np.abs(x - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)

    def _gradient(self, x):
        d = x - self.center
        sign = np.where(d < 0, -1.0, 1.0)
        q = np.abs(d) - self.half_extents
        m = np.maximum(q, 0.0)
        mn = np.linalg.norm(m, axis=1)
        g = np.zeros_like(x)
        out = mn > 0
        g[out] = sign[out] * m[out] / mn[out, None]
        inside = ~out
        k = np.argmax(q[inside], axis=1)
        rows = np.nonzero(inside)[0]
        g[rows, k] = sign[rows, k]
        return g

    def area(self):
        a, b, c = self.half_extents
        return 8.0 * (a * b + b * c + c * a)

    def _sample(self, rng, n):
        h = self.half_extents
        faces = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        probs = np.repeat(faces, 2) / (2 * faces.sum())
        face = rng.choice(6, size=n, p=probs)
        pts = rng.uniform(-1.0, 1.0, (n, 3)) * h
        axis = face // 2
        side = np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = side * h[axis]
        return self.center + pts

    def to_dict(self):
        return {"type": "box", "center": self.center.tolist(), "half_extents": self.half_extents.tolist()}


class Torus(SdfModel):
    """Torus around the z axis through ``center``."""

    def __init__(self, center, major_radius, minor_radius):
        self.center = np.asarray(center, dtype=float).reshape(3)
        self.major_radius = float(major_radius)
        self.minor_radius = float(minor_radius)
        if not self.major_radius > self.minor_radius > 0:
            raise ValueError("torus requires major_radius > minor_radius > 0")

    def _tube(self, x):
        d = x - self.center
        rho = np.hypot(d[:, 0], d[:, 1])
        q = np.stack([rho - self.major_radius, d[:, 2]], axis=1)
        return d, rho, q

    def _value(self, x):
        _, _, q = self._tube(x)
        return np.linalg.norm(q, axis=1) - self.minor_radius

    def _gradient(self, x):
        d, rho, q = self._tube(x)
        radial = _unit_or_default(np.stack([d[:, 0], d[:, 1], np.zeros(len(d))], axis=1), rho)
        qn = np.linalg.norm(q, axis=1)
        safe = np.where(qn > 0, qn, 1.0)
        a = np.where(qn > 0, q[:, 0] / safe, 1.0)
        b = np.where(qn > 0, q[:, 1] / safe, 0.0)
        g = a[:, None] * radial
        g[:, 2] += b
        return g

    def area(self):
        return 4.0 * np.pi**2 * self.major_radius * self.minor_radius

    def _sample(self, rng, n):
        R, r = self.major_radius, self.minor_radius
        u = rng.uniform(0.0, 2 * np.pi, n)
        # tube angle density is proportional to R + r cos(v)
        v = np.empty(n)
        filled = 0
        while filled < n:
            m = 2 * (n - filled)
            cand = rng.uniform(0.0, 2 * np.pi, m)
            keep = cand[rng.uniform(0.0, R + r, m) < R + r * np.cos(cand)]
            take = min(len(keep), n - filled)
            v[filled : filled + take] = keep[:take]
            filled += take
        ring = R + r * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)], axis=1)
        return self.center + pts

    def to_dict(self):
        return {
            "type": "torus",
            "center": self.center.tolist(),
            "major_radius": self.major_radius,
            "minor_radius": self.minor_radius,
        }


class Plane(SdfModel):
    """Half-space boundary ``normal . x = offset``; positive on the normal side."""

    def __init__(self, normal, offset=0.0):
        n = np.asarray(normal, dtype=float).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must have unit length")
        self.normal = n
        self.offset = float(offset)

    def _value(self, x):
        return x @ self.normal - self.offset

    def _gradient(self, x):
        return np.broadcast_to(self.normal, x.shape).copy()

    def to_dict(self):
        return {"type": "plane", "normal": self.normal.tolist(), "offset": self.offset}


class Union(SdfModel):
    """Pointwise minimum of child fields. Ties go to the earliest child."""

    def __init__(self, children):
        self.children = list(children)
        if not self.children:
            raise ValueError("union needs at least one child")

    def _stack(self, x):
        return np.stack([c._value(x) for c in self.children], axis=0)

    def _value(self, x):
        return self._stack(x).min(axis=0)

    def _gradient(self, x):
        which = np.argmin(self._stack(x), axis=0)
        g = np.empty_like(x)
        for i, child in enumerate(self.children):
            sel = which == i
            if np.any(sel):
                g[sel] = child._gradient(x[sel])
        return g

    def area(self):
        return sum(_area(c) for c in self.children)

    def to_dict(self):
        return {"type": "union", "children": [c.to_dict() for c in self.children]}


def _area(model):
    if not hasattr(model, "area"):
        raise TypeError(f"cannot sample the surface of {type(model).__name__}")
    return model.area()


class GridSdf(SdfModel):
    """Trilinear interpolant of node values on a regular lattice.

    ``values`` is flat with x varying fastest: index ``i + nx * (j + ny * k)``.
    Queries outside the lattice bounds raise :class:`GridDomainError`.
    """

    SNAP = 1e-9

    def __init__(self, origin, cell_size, dims, values):
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.cell_size = float(cell_size)
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError("grid needs at least 2 nodes along every axis")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        vals = np.asarray(values, dtype=float).reshape(-1)
        if vals.size != np.prod(self.dims):
            raise ValueError(f"expected {np.prod(self.dims)} node values, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid values must be finite")
        self.values = vals
        nx, ny, nz = self.dims
        self._v = vals.reshape(nz, ny, nx)

    @property
    def upper(self):
        return self.origin + self.cell_size * (np.array(self.dims) - 1)

    def _locate(self, x):
        u = (x - self.origin) / self.cell_size
        r = np.round(u)
        u = np.where(np.abs(u - r) < self.SNAP, r, u)
        hi = np.array(self.dims, dtype=float) - 1
        bad = (u < 0) | (u > hi) | ~np.isfinite(u)
        if np.any(bad):
            row, ax = np.argwhere(bad)[0]
            raise GridDomainError(
                f"query {x[row].tolist()} outside grid bounds on axis {'xyz'[ax]} "
                f"(coordinate {x[row, ax]!r}, bounds [{self.origin[ax]!r}, {self.upper[ax]!r}])"
            )
        cell = np.minimum(np.floor(u), hi - 1).astype(int)
        return cell, u - cell

    def _corners(self, cell):
        i, j, k = cell[:, 0], cell[:, 1], cell[:, 2]
        v = self._v
        # c[a, b, c] is the node at offset (a, b, c) along (x, y, z)
        return np.array(
            [
                [[v[k, j, i], v[k + 1, j, i]], [v[k, j + 1, i], v[k + 1, j + 1, i]]],
                [[v[k, j, i + 1], v[k + 1, j, i + 1]], [v[k, j + 1, i + 1], v[k + 1, j + 1, i + 1]]],
            ]
        )

    def _value(self, x):
        cell, f = self._locate(x)
        c = self._corners(cell)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        cx = c[0] * (1 - fx) + c[1] * fx
        cy = cx[0] * (1 - fy) + cx[1] * fy
        return cy[0] * (1 - fz) + cy[1] * fz

    def _gradient(self, x):
        cell, f = self._locate(x)
        c = self._corners(cell)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        wy = np.array([1 - fy, fy])
        wz = np.array([1 - fz, fz])
        wx = np.array([1 - fx, fx])
        dx = c[1] - c[0]
        gx = np.einsum("bcn,bn,cn->n", dx, wy, wz)
        dy = c[:, 1] - c[:, 0]
        gy = np.einsum("acn,an,cn->n", dy, wx, wz)
        dz = c[:, :, 1] - c[:, :, 0]
        gz = np.einsum("abn,an,bn->n", dz, wx, wy)
        return np.stack([gx, gy, gz], axis=1) / self.cell_size

    def node_positions(self):
        nx, ny, nz = self.dims
        k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        idx = np.stack([i, j, k], axis=-1).reshape(-1, 3)
        return self.origin + self.cell_size * idx


def sdf_eval(model, x):
    return model.value(x)


def sdf_grad(model, x):
    return model.gradient(x)


def bake_grid(model, origin, cell_size, dims):
    """Sample ``model`` at every lattice node of a new :class:`GridSdf`."""
    proto = GridSdf(origin, cell_size, dims, np.zeros(int(np.prod(dims))))
    return GridSdf(origin, cell_size, dims, model.value(proto.node_positions()))


def sample_surface(model, n, seed):
    """Draw ``n`` area-uniform points on the zero level set of an analytic model."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if isinstance(model, Union):
        return _sample_union(model, n, rng)
    if not hasattr(model, "_sample"):
        raise TypeError(f"cannot sample the surface of {type(model).__name__}")
    return model._sample(rng, n)


def _sample_union(model, n, rng):
    leaves = []

    def collect(m):
        if isinstance(m, Union):
            for c in m.children:
                collect(c)
        elif hasattr(m, "_sample"):
            leaves.append(m)
        else:
            raise TypeError(f"cannot sample the surface of {type(m).__name__}")

    collect(model)
    areas = np.array([leaf.area() for leaf in leaves])
    probs = areas / areas.sum()
    out = np.empty((n, 3))
    filled = 0
    attempts = 0
    while filled < n:
        if attempts >= 1000 * n:
            raise SamplingError(f"union rejection sampling gave up after {attempts} attempts")
        m = min(max(2 * (n - filled), 16), 1000 * n - attempts)
        attempts += m
        which = rng.choice(len(leaves), size=m, p=probs)
        cand = np.empty((m, 3))
        for i, leaf in enumerate(leaves):
            sel = which == i
            if np.any(sel):
                cand[sel] = leaf._sample(rng, int(sel.sum()))
        ok = np.ones(m, dtype=bool)
        for i, leaf in enumerate(leaves):
            others = which != i
            if np.any(others):
                ok[others] &= leaf._value(cand[others]) >= 0.0
        keep = cand[ok][: n - filled]
        out[filled : filled + len(keep)] = keep
        filled += len(keep)
    return out


_SCENE_TYPES = {
    "sphere": lambda d: Sphere(d["center"], d["radius"]),
    "box": lambda d: Box(d["center"], d["half_extents"]),
    "torus": lambda d: Torus(d["center"], d["major_radius"], d["minor_radius"]),
    "plane": lambda d: Plane(d["normal"], d.get("offset", 0.0)),
    "union": lambda d: Union([scene_from_dict(c) for c in d["children"]]),
}


def scene_from_dict(d):
    """Build an analytic model from a scene description such as ``{"type": "sphere", ...}``."""
    try:
        kind = d["type"]
        build = _SCENE_TYPES[kind]
    except KeyError as exc:
        raise ValueError(f"unknown or missing scene type in {d!r}") from exc
    try:
        return build(d)
    except KeyError as exc:
        raise ValueError(f"scene entry of type {kind!r} is missing field {exc.args[0]!r}") from exc


_GRID_MAGIC = b"SDFG"
_GRID_HEADER = struct.Struct("<4sI3I3dd")


def save_grid(grid, path):
    header = _GRID_HEADER.pack(_GRID_MAGIC, 1, *grid.dims, *grid.origin, grid.cell_size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(grid.values.astype("<f8").tobytes())


def load_grid(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _GRID_HEADER.size:
        raise ValueError(f"{path}: truncated grid header")
    magic, version, nx, ny, nz, ox, oy, oz, cell = _GRID_HEADER.unpack_from(blob)
    if magic != _GRID_MAGIC or version != 1:
        raise ValueError(f"{path}: not an SDFG version 1 file")
    body = blob[_GRID_HEADER.size :]
    if len(body) != 8 * nx * ny * nz:
        raise ValueError(f"{path}: expected {nx * ny * nz} node values, file holds {len(body) // 8}")
    values = np.frombuffer(body, dtype="<f8").astype(float)
    return GridSdf((ox, oy, oz), cell, (nx, ny, nz), values)
