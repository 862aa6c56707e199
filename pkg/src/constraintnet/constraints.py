"""Constraint classes, their guard layers, membership oracles and samplers.

A constraint class is parameter-free; a concrete region is selected by a flat
constraint-parameter vector ``s``. Every class exposes

* ``guard(z, s)`` -- differentiable map onto the region selected by ``s``,
* ``member(y, s, tol)`` -- an independent geometric membership test,
* ``random_s(rng, n)`` -- draws from the nominal schema ranges.

Guards accept a single sample (``z`` of shape ``(z_dim,)``) or a batch
(``(B, z_dim)`` with ``s`` of shape ``(B, s_dim)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import nnls
from scipy.spatial import ConvexHull, QhullError

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

__all__ = [
    "DEFAULT_TOL",
    "SchemaEntry",
    "ConstraintClass",
    "Polytope",
    "Sector",
    "Product",
    "polytope_contains",
    "sector_contains",
    "IntervalSampler",
    "TriangleSampler",
    "SectorSampler",
    "sample_valid_s",
    "constraint_from_dict",
]

DEFAULT_TOL = 1e-9


@dataclass(frozen=True)
class SchemaEntry:
    """Name and nominal range of one component of ``s``."""

    name: str
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def to_dict(self) -> dict:
        return {"name": self.name, "lo": float(self.lo), "hi": float(self.hi)}


def _batch(z, s, z_dim: int, s_dim: int):
    z = ad.as_tensor(z)
    s = np.asarray(s, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = ad.reshape(z, (1, -1))
    if z.ndim != 2 or z.shape[1] != z_dim:
        raise DimensionError(f"guard expects z of length {z_dim}, got shape {z.shape}")
    s = s.reshape(-1, s.shape[-1]) if s.ndim else s.reshape(1, 1)
    if s.shape[-1] != s_dim:
        raise DimensionError(f"guard expects s of length {s_dim}, got shape {s.shape}")
    if s.shape[0] not in (1, z.shape[0]):
        raise DimensionError(f"batch size mismatch: z {z.shape} vs s {s.shape}")
    return z, s, single


class ConstraintClass:
    tag: str = ""
    z_dim: int
    s_dim: int
    out_dim: int
    s_schema: tuple[SchemaEntry, ...]

    def guard(self, z, s) -> Tensor:
        raise NotImplementedError

    def member(self, y, s, tol: float = DEFAULT_TOL) -> bool:
        raise NotImplementedError

    def random_s(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        lo = np.array([e.lo for e in self.s_schema])
        hi = np.array([e.hi for e in self.s_schema])
        size = (self.s_dim,) if n is None else (n, self.s_dim)
        return lo + (hi - lo) * rng.random(size)

    def params(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "params": self.params(),
            "s_schema": [e.to_dict() for e in self.s_schema],
        }

    def __eq__(self, other) -> bool:
        return isinstance(other, ConstraintClass) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(z_dim={self.z_dim}, s_dim={self.s_dim}, out_dim={self.out_dim})"


def _default_schema(prefix: str, n: int, lo: float, hi: float) -> tuple[SchemaEntry, ...]:
    return tuple(SchemaEntry(f"{prefix}{i}", lo, hi) for i in range(n))


class Polytope(ConstraintClass):
    """Convex hull of ``n_vertices`` points in ``dim`` dimensions.

    Vertex coordinates are read from ``s`` through ``vertex_index`` (an
    ``(M, N)`` integer array). By default the vertices *are* ``s``, flattened
    row-major, so ``s_dim == M * N``.
    """

    tag = "polytope"

    def __init__(
        self,
        n_vertices: int,
        dim: int,
        vertex_index=None,
        s_schema: Sequence[SchemaEntry] | None = None,
    ):
        if n_vertices < 1 or dim < 1:
            raise ValueError(f"polytope needs M >= 1 and N >= 1, got M={n_vertices}, N={dim}")
        self.n_vertices = int(n_vertices)
        self.dim = int(dim)
        if vertex_index is None:
            vertex_index = np.arange(self.n_vertices * self.dim).reshape(self.n_vertices, self.dim)
        self.vertex_index = np.asarray(vertex_index, dtype=np.int64)
        if self.vertex_index.shape != (self.n_vertices, self.dim):
            raise DimensionError(
                f"vertex_index shape {self.vertex_index.shape} != ({self.n_vertices}, {self.dim})"
            )
        if s_schema is None:
            s_dim = int(self.vertex_index.max()) + 1
            s_schema = _default_schema("v", s_dim, -10.0, 10.0)
        self.s_schema = tuple(s_schema)
        self.s_dim = len(self.s_schema)
        if self.vertex_index.min() < 0 or self.vertex_index.max() >= self.s_dim:
            raise DimensionError("vertex_index refers outside s")
        self.z_dim = self.n_vertices
        self.out_dim = self.dim

    def vertices(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return s[..., self.vertex_index]

    def guard(self, z, s) -> Tensor:
        z, s, single = _batch(z, s, self.z_dim, self.s_dim)
        weights = ad.softmax(z, axis=-1)
        verts = self.vertices(s)  # (B, M, N)
        b = z.shape[0]
        # anchored at v_0, so coincident vertices give v_0 exactly
        anchor = verts[:, 0, :]
        spread = ad.tsum(ad.mul(ad.reshape(weights, (b, self.n_vertices, 1)), verts - anchor[:, None, :]), axis=1)
        out = ad.add(spread, anchor)
        return ad.reshape(out, (self.dim,)) if single else out

    def member(self, y, s, tol: float = DEFAULT_TOL) -> bool:
        return polytope_contains(self.vertices(s), y, tol)

    def params(self) -> dict:
        return {
            "n_vertices": self.n_vertices,
            "dim": self.dim,
            "vertex_index": self.vertex_index.tolist(),
        }


class Sector(ConstraintClass):
    """Circle sector symmetric about the vertical through its center.

    ``s = (x_c, y_c, R, Psi)``; the angle is measured from the +y axis with
    points at ``r * (sin phi, cos phi) + (x_c, y_c)``.
    """

    tag = "sector"
    z_dim = 2
    s_dim = 4
    out_dim = 2

    def __init__(self, s_schema: Sequence[SchemaEntry] | None = None):
        if s_schema is None:
            s_schema = (
                SchemaEntry("x_c", -10.0, 10.0),
                SchemaEntry("y_c", -10.0, 10.0),
                SchemaEntry("R", 0.0, 10.0),
                SchemaEntry("Psi", 0.0, 2 * math.pi),
            )
        if len(s_schema) != 4:
            raise DimensionError(f"sector schema needs 4 entries, got {len(s_schema)}")
        self.s_schema = tuple(s_schema)

    def guard(self, z, s) -> Tensor:
        z, s, single = _batch(z, s, 2, 4)
        b = z.shape[0]
        sig = ad.sigmoid(z)
        r = ad.mul(ad.take(sig, (slice(None), slice(0, 1))), s[:, 2:3])
        phi = ad.mul(ad.sub(ad.take(sig, (slice(None), slice(1, 2))), 0.5), s[:, 3:4])
        x = ad.add(ad.mul(r, ad.sin(phi)), s[:, 0:1])
        y = ad.add(ad.mul(r, ad.cos(phi)), s[:, 1:2])
        out = ad.concat([x, y], axis=1)
        return ad.reshape(out, (2,)) if single else ad.reshape(out, (b, 2))

    def member(self, y, s, tol: float = DEFAULT_TOL) -> bool:
        s = np.asarray(s, dtype=np.float64)
        return sector_contains(s[0], s[1], s[2], s[3], y, tol)


class Product(ConstraintClass):
    """Cartesian product of part constraints over consecutive output slices.

    ``output_order`` optionally permutes the concatenated part outputs:
    ``y[j] = concat_parts[output_order[j]]``.
    """

    tag = "product"

    def __init__(self, parts: Sequence[ConstraintClass], output_order=None, names=None):
        if len(parts) < 1:
            raise ValueError("product constraint needs at least one part")
        self.parts = tuple(parts)
        self.names = tuple(names) if names is not None else tuple(f"part{k}" for k in range(len(parts)))
        self.z_offsets = np.cumsum([0] + [p.z_dim for p in self.parts])
        self.s_offsets = np.cumsum([0] + [p.s_dim for p in self.parts])
        self.y_offsets = np.cumsum([0] + [p.out_dim for p in self.parts])
        self.z_dim = int(self.z_offsets[-1])
        self.s_dim = int(self.s_offsets[-1])
        self.out_dim = int(self.y_offsets[-1])
        if output_order is None:
            output_order = np.arange(self.out_dim)
        self.output_order = np.asarray(output_order, dtype=np.int64)
        if sorted(self.output_order.tolist()) != list(range(self.out_dim)):
            raise ValueError(f"output_order {self.output_order.tolist()} is not a permutation")
        self._inverse = np.argsort(self.output_order)
        self.s_schema = tuple(
            SchemaEntry(f"{name}.{e.name}", e.lo, e.hi)
            for name, part in zip(self.names, self.parts)
            for e in part.s_schema
        )

    @property
    def identity_order(self) -> bool:
        return bool(np.array_equal(self.output_order, np.arange(self.out_dim)))

    def regroup(self, y) -> np.ndarray:
        """Map concatenated part order to output order."""
        return np.asarray(y)[..., self.output_order]

    def ungroup(self, y) -> np.ndarray:
        """Map output order back to concatenated part order."""
        return np.asarray(y)[..., self._inverse]

    def guard(self, z, s) -> Tensor:
        z, s, single = _batch(z, s, self.z_dim, self.s_dim)
        outs = []
        for k, part in enumerate(self.parts):
            zk = ad.take(z, (slice(None), slice(self.z_offsets[k], self.z_offsets[k + 1])))
            sk = s[:, self.s_offsets[k] : self.s_offsets[k + 1]]
            outs.append(part.guard(zk, sk))
        out = ad.concat(outs, axis=1) if len(outs) > 1 else outs[0]
        if not self.identity_order:
            out = ad.take(out, (slice(None), self.output_order))
        return ad.reshape(out, (self.out_dim,)) if single else out

    def member(self, y, s, tol: float = DEFAULT_TOL) -> bool:
        y = self.ungroup(np.asarray(y, dtype=np.float64).reshape(-1))
        s = np.asarray(s, dtype=np.float64).reshape(-1)
        for k, part in enumerate(self.parts):
            yk = y[self.y_offsets[k] : self.y_offsets[k + 1]]
            sk = s[self.s_offsets[k] : self.s_offsets[k + 1]]
            if not part.member(yk, sk, tol):
                return False
        return True

    def random_s(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        draws = [part.random_s(rng, n) for part in self.parts]
        return np.concatenate(draws, axis=-1)

    def params(self) -> dict:
        return {
            "parts": [p.to_dict() for p in self.parts],
            "names": list(self.names),
            "output_order": self.output_order.tolist(),
        }


def constraint_from_dict(d: dict, path: str = "constraint") -> ConstraintClass:
    """Rebuild a constraint class from :meth:`ConstraintClass.to_dict` output."""
    try:
        tag = d["tag"]
        params = d["params"]
        schema = [SchemaEntry(str(e["name"]), float(e["lo"]), float(e["hi"])) for e in d["s_schema"]]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed constraint entry ({exc})") from None
    if tag == "polytope":
        return Polytope(params["n_vertices"], params["dim"], params["vertex_index"], schema)
    if tag == "sector":
        return Sector(schema)
    if tag == "product":
        parts = [
            constraint_from_dict(p, f"{path}.params.parts[{k}]") for k, p in enumerate(params["parts"])
        ]
        return Product(parts, params.get("output_order"), params.get("names"))
    raise ValueError(f"{path}.tag: unknown constraint tag {tag!r}")


# ---------------------------------------------------------------------------
# membership oracles


def _hull2d(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counter-clockwise."""
    pts = sorted(set(map(tuple, points.tolist())))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(p - (a + t * ab)))


def _nnls_contains(vertices: np.ndarray, y: np.ndarray, tol: float) -> bool:
    scale = max(1.0, float(np.abs(vertices).max()))
    w = 1e3 * scale
    a = np.vstack([vertices.T, np.full((1, len(vertices)), w)])
    b = np.concatenate([y, [w]])
    p, _ = nnls(a, b, maxiter=50 * a.shape[1])
    total = p.sum()
    if total <= 0:
        return False
    resid = vertices.T @ (p / total) - y
    return bool(np.abs(resid).max() <= tol)


def polytope_contains(vertices, y, tol: float = DEFAULT_TOL) -> bool:
    """True iff ``y`` lies within ``tol`` of the convex hull of ``vertices``.

    Exact small-case methods for N <= 3; NNLS feasibility otherwise or when
    the 3-D hull is degenerate.
    """
    v = np.asarray(vertices, dtype=np.float64)
    v = v.reshape(v.shape[0], -1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != v.shape[1]:
        raise DimensionError(f"point dim {y.shape[0]} != polytope dim {v.shape[1]}")
    if not np.all(np.isfinite(y)):
        return False
    n = v.shape[1]
    if n == 1:
        return bool(v.min() - tol <= y[0] <= v.max() + tol)
    if n == 2:
        hull = _hull2d(v)
        if len(hull) == 1:
            return bool(np.linalg.norm(y - hull[0]) <= tol)
        if len(hull) == 2:
            return _segment_distance(y, hull[0], hull[1]) <= tol
        for i in range(len(hull)):
            a, b = hull[i], hull[(i + 1) % len(hull)]
            e = b - a
            cross = e[0] * (y[1] - a[1]) - e[1] * (y[0] - a[0])
            if cross < -tol * math.hypot(e[0], e[1]):
                return False
        return True
    if n == 3 and v.shape[0] >= 4:
        try:
            hull = ConvexHull(v)
        except QhullError:
            return _nnls_contains(v, y, tol)
        return bool(np.all(hull.equations[:, :3] @ y + hull.equations[:, 3] <= tol))
    return _nnls_contains(v, y, tol)


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def sector_contains(x_c, y_c, radius, psi, y, tol: float = DEFAULT_TOL) -> bool:
    """True iff ``y`` lies within Euclidean distance ``tol`` of the sector."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != 2:
        raise DimensionError(f"sector membership needs a 2-vector, got {y.shape}")
    if not np.all(np.isfinite(y)):
        return False
    dx, dy = y[0] - x_c, y[1] - y_c
    rho = math.hypot(dx, dy)
    if rho <= tol:
        return True
    half = 0.5 * psi
    angle = math.atan2(dx, dy)  # from +y, clockwise positive
    if half >= math.pi or abs(angle) <= half:
        return rho <= radius + tol
    c = np.array([x_c, y_c])
    ends = [c + radius * np.array([math.sin(sgn * half), math.cos(sgn * half)]) for sgn in (-1.0, 1.0)]
    return min(_segment_distance(y, c, e) for e in ends) <= tol


# ---------------------------------------------------------------------------
# samplers of valid constraint parameters (s with y in C(s))


@dataclass
class IntervalSampler:
    """Dilates the degenerate box ``[y, y]`` by independent uniform margins.

    Produces ``s = (l_1, u_1, ..., l_n, u_n)``, i.e. a product of 1-D
    polytopes, one per component of ``y``.
    """

    margin_lo: float = 0.1
    margin_hi: float = 0.3
    integer: bool = False

    def __call__(self, y, rng: np.random.Generator) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        shape = (y.shape[0], 2)
        if self.integer:
            m = rng.integers(int(self.margin_lo), int(self.margin_hi) + 1, size=shape).astype(float)
        else:
            m = self.margin_lo + (self.margin_hi - self.margin_lo) * rng.random(shape)
        s = np.empty(shape)
        s[:, 0] = y - m[:, 0]
        s[:, 1] = y + m[:, 1]
        return s.reshape(-1)


@dataclass
class TriangleSampler:
    """Random triangle containing a 2-D point via barycentric placement.

    A random triangle of size in ``scale_range`` is drawn around the origin,
    ``y`` is assigned barycentric weights bounded below by ``min_weight``, and
    the triangle is translated so those weights land on ``y``.
    """

    scale_lo: float = 2.0
    scale_hi: float = 8.0
    min_weight: float = 0.05

    def __call__(self, y, rng: np.random.Generator) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(2)
        scale = self.scale_lo + (self.scale_hi - self.scale_lo) * rng.random()
        # angles spread so the triangle is not too thin
        base = rng.random() * 2 * math.pi
        angles = base + np.array([0.0, 2 * math.pi / 3, 4 * math.pi / 3]) + rng.uniform(-0.6, 0.6, 3)
        radii = scale * rng.uniform(0.5, 1.0, 3)
        tri = np.stack([radii * np.sin(angles), radii * np.cos(angles)], axis=1)
        free = 1.0 - 3 * self.min_weight
        weights = self.min_weight + free * rng.dirichlet(np.ones(3))
        anchor = weights @ tri
        return (tri - anchor + y).reshape(-1)


@dataclass
class SectorSampler:
    """Random sector ``(x_c, y_c, R, Psi)`` that contains ``y``.

    The center is offset from ``y`` by a random vector; ``R`` and ``Psi`` are
    then inflated past the point's polar coordinates by factors in
    ``(1 + grow_lo, 1 + grow_hi)``.
    """

    offset_lo: float = 1.0
    offset_hi: float = 6.0
    max_angle: float = 1.2
    grow_lo: float = 0.05
    grow_hi: float = 0.5

    def __call__(self, y, rng: np.random.Generator) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(2)
        dist = self.offset_lo + (self.offset_hi - self.offset_lo) * rng.random()
        angle = rng.uniform(-self.max_angle, self.max_angle)
        center = y - dist * np.array([math.sin(angle), math.cos(angle)])
        dx, dy = y - center
        rho = math.hypot(dx, dy)
        ang = math.atan2(dx, dy)
        u_r, u_a = self.grow_lo + (self.grow_hi - self.grow_lo) * rng.random(2)
        radius = rho * (1.0 + u_r)
        psi = min(2 * math.pi, 2 * abs(ang) * (1.0 + u_a) + 1e-6)
        return np.array([center[0], center[1], radius, psi])


def sample_valid_s(y, sampler, rng: np.random.Generator) -> np.ndarray:
    """Draw one constraint parameter from ``S_y`` using ``sampler``."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("sample_valid_s: y must be finite")
    return np.asarray(sampler(y, rng), dtype=np.float64)
