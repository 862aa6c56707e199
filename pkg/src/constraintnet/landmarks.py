"""Synthetic facial-landmark regression task.

Scenes are small grayscale images with an elliptical head, two eyes and a
nose. Landmarks are ordered ``(x_n, x_le, x_re, y_n, y_le, y_re)`` in pixel
units; the image y-axis points down, so "eyes above nose" means
``y_le, y_re <= y_n``.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from .constraints import Polytope, Product, Sector, SchemaEntry, SectorSampler, TriangleSampler
from .seeding import stream

__all__ = [
    "SceneConfig",
    "LandmarkScene",
    "BoxParam",
    "generate_scene",
    "generate_dataset",
    "box_constraint",
    "relational_constraint",
    "triangle_nose_constraint",
    "sector_nose_constraint",
    "box_to_s",
    "sample_box",
    "BoxSampler",
    "NoseTriangleSampler",
    "NoseSectorSampler",
    "PYRAMID_VERTEX_INDEX",
    "write_dataset",
    "read_dataset",
    "DatasetFormatError",
    "TASKS",
]

X_N, X_LE, X_RE, Y_N, Y_LE, Y_RE = range(6)


@dataclass(frozen=True)
class SceneConfig:
    size: int = 32
    center_lo: float = 12.0
    center_hi: float = 20.0
    head_a: tuple[float, float] = (8.0, 11.0)
    head_b: tuple[float, float] = (10.0, 13.0)
    eye_spacing: tuple[float, float] = (3.5, 6.0)
    eye_up: tuple[float, float] = (2.5, 4.5)
    nose_drop: tuple[float, float] = (1.5, 3.5)
    max_tilt: float = 0.3
    noise: float = 0.02


@dataclass
class LandmarkScene:
    image: np.ndarray  # (1, H, W)
    landmarks: np.ndarray  # (6,)


@dataclass(frozen=True)
class BoxParam:
    l_x: float
    u_x: float
    l_y: float
    u_y: float

    def contains(self, y) -> bool:
        y = np.asarray(y)
        xs, ys = y[:3], y[3:6]
        return bool(
            np.all(xs >= self.l_x) and np.all(xs <= self.u_x) and np.all(ys >= self.l_y) and np.all(ys <= self.u_y)
        )


def _u(rng, bounds) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _disk(xx, yy, cx, cy, r) -> np.ndarray:
    # anti-aliased coverage of a disk, linear ramp over one pixel
    d = np.hypot(xx - cx, yy - cy)
    return np.clip(r + 0.5 - d, 0.0, 1.0)


def generate_scene(rng: np.random.Generator, config: SceneConfig = SceneConfig()) -> LandmarkScene:
    n = config.size
    cx = _u(rng, (config.center_lo, config.center_hi))
    cy = _u(rng, (config.center_lo, config.center_hi))
    a = _u(rng, config.head_a)
    b = _u(rng, config.head_b)
    tilt = _u(rng, (-config.max_tilt, config.max_tilt))
    spacing = _u(rng, config.eye_spacing)
    up = _u(rng, config.eye_up)
    drop = _u(rng, config.nose_drop)
    c, s = math.cos(tilt), math.sin(tilt)

    def place(u, v):
        return cx + c * u - s * v, cy + s * u + c * v

    x_le, y_le = place(-spacing, -up)
    x_re, y_re = place(spacing, -up)
    x_n, y_n = place(0.0, drop)

    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    skin = _u(rng, (0.55, 0.8))
    bg = _u(rng, (0.05, 0.25))
    u = c * (xx - cx) + s * (yy - cy)
    v = -s * (xx - cx) + c * (yy - cy)
    ell = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    head = np.clip((1.0 - ell) * min(a, b) + 0.5, 0.0, 1.0)
    img = bg + (skin - bg) * head
    eye_r = _u(rng, (1.0, 2.0))
    eye_val = _u(rng, (0.0, 0.2))
    for ex, ey in ((x_le, y_le), (x_re, y_re)):
        cov = _disk(xx, yy, ex, ey, eye_r)
        img = img * (1 - cov) + eye_val * cov
    nose_r = _u(rng, (1.0, 1.5))
    nose_val = _u(rng, (0.3, 0.45))
    cov = _disk(xx, yy, x_n, y_n, nose_r)
    img = img * (1 - cov) + nose_val * cov
    img = np.clip(img + config.noise * rng.standard_normal(img.shape), 0.0, 1.0)
    landmarks = np.array([x_n, x_le, x_re, y_n, y_le, y_re])
    return LandmarkScene(img[None], landmarks)


def generate_dataset(count: int, seed: int, config: SceneConfig = SceneConfig(), label: str = "scene"):
    """``count`` scenes, scene ``i`` drawn from stream ``(seed, label, i)``."""
    images = np.zeros((count, 1, config.size, config.size))
    landmarks = np.zeros((count, 6))
    for i in range(count):
        scene = generate_scene(stream(seed, label, i), config)
        images[i] = scene.image
        landmarks[i] = scene.landmarks
    return images, landmarks


# ---------------------------------------------------------------------------
# constraint constructions


def _interval_schema(prefix: str, size: float):
    return (SchemaEntry(f"{prefix}.l", 0.0, size), SchemaEntry(f"{prefix}.u", 0.0, size))


def box_constraint(size: int = 32) -> Product:
    """Six independent intervals; ``s = (l_x, u_x) * 3 + (l_y, u_y) * 3``."""
    parts = [Polytope(2, 1, [[0], [1]], _interval_schema(ax, size)) for ax in ("x",) * 3 + ("y",) * 3]
    return Product(parts, names=["x_n", "x_le", "x_re", "y_n", "y_le", "y_re"])


# part 3 vertices over (y_n, y_le, y_re) as indices into (l_y, u_y)
PYRAMID_VERTEX_INDEX = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 0, 1], [1, 1, 1]])
TRIANGLE_VERTEX_INDEX = np.array([[0, 0], [0, 1], [1, 1]])


def relational_constraint(size: int = 32) -> Product:
    """Box plus ``x_le <= x_re`` and ``y_le, y_re <= y_n``.

    Parts: segment over ``x_n``, triangle over ``(x_le, x_re)``, pyramid over
    ``(y_n, y_le, y_re)``; ``s = (l_x, u_x, l_x, u_x, l_y, u_y)``. The parts
    concatenate to the landmark order already, so ``output_order`` is the
    identity.
    """
    parts = [
        Polytope(2, 1, [[0], [1]], _interval_schema("x", size)),
        Polytope(3, 2, TRIANGLE_VERTEX_INDEX, _interval_schema("x", size)),
        Polytope(5, 3, PYRAMID_VERTEX_INDEX, _interval_schema("y", size)),
    ]
    return Product(parts, output_order=np.arange(6), names=["nose_x", "eyes_x", "y"])


def triangle_nose_constraint(size: int = 32) -> Polytope:
    return Polytope(3, 2, s_schema=tuple(SchemaEntry(f"v{i}", 0.0, size) for i in range(6)))


def sector_nose_constraint(size: int = 32) -> Sector:
    return Sector(
        (
            SchemaEntry("x_c", 0.0, size),
            SchemaEntry("y_c", 0.0, size),
            SchemaEntry("R", 0.0, size / 4),
            SchemaEntry("Psi", 0.0, 2 * math.pi),
        )
    )


def box_to_s(box: BoxParam, kind: str = "box") -> np.ndarray:
    x = [box.l_x, box.u_x]
    y = [box.l_y, box.u_y]
    if kind == "box":
        return np.array(x * 3 + y * 3, dtype=np.float64)
    if kind == "relational":
        return np.array(x * 2 + y, dtype=np.float64)
    raise ValueError(f"unknown box constraint kind {kind!r}")


def sample_box(y, rng: np.random.Generator, margin_range=(2, 6), size: int = 32) -> BoxParam:
    """Tight box over the three landmarks, each side pushed out by an integer margin."""
    lo, hi = int(margin_range[0]), int(margin_range[1])
    if not 0 <= lo <= hi:
        raise ValueError(f"margin range must satisfy 0 <= lo <= hi, got {margin_range}")
    y = np.asarray(y, dtype=np.float64)
    xs, ys = y[:3], y[3:6]
    m = rng.integers(lo, hi + 1, size=4)
    return BoxParam(
        max(0.0, float(xs.min()) - m[0]),
        min(float(size), float(xs.max()) + m[1]),
        max(0.0, float(ys.min()) - m[2]),
        min(float(size), float(ys.max()) + m[3]),
    )


@dataclass
class BoxSampler:
    """Valid-parameter sampler for the box and relational constructions."""

    kind: str = "box"
    margin_lo: int = 2
    margin_hi: int = 6
    size: int = 32

    def __call__(self, y, rng) -> np.ndarray:
        return box_to_s(sample_box(y, rng, (self.margin_lo, self.margin_hi), self.size), self.kind)


@dataclass
class NoseTriangleSampler:
    scale_lo: float = 2.0
    scale_hi: float = 6.0

    def __call__(self, y, rng) -> np.ndarray:
        y = np.asarray(y)
        return TriangleSampler(self.scale_lo, self.scale_hi)(y[[X_N, Y_N]] if y.shape[0] == 6 else y, rng)


@dataclass
class NoseSectorSampler:
    offset_lo: float = 1.0
    offset_hi: float = 5.0

    def __call__(self, y, rng) -> np.ndarray:
        y = np.asarray(y)
        return SectorSampler(self.offset_lo, self.offset_hi)(y[[X_N, Y_N]] if y.shape[0] == 6 else y, rng)


def nose_targets(landmarks) -> np.ndarray:
    return np.asarray(landmarks)[..., [X_N, Y_N]]


# task name -> (constraint factory, sampler factory, target selector)
TASKS = {
    "landmarks-box": (box_constraint, lambda: BoxSampler("box"), lambda y: y),
    "landmarks-relational": (relational_constraint, lambda: BoxSampler("relational"), lambda y: y),
    "landmarks-triangle": (triangle_nose_constraint, NoseTriangleSampler, nose_targets),
    "landmarks-sector": (sector_nose_constraint, NoseSectorSampler, nose_targets),
}


# ---------------------------------------------------------------------------
# dataset container
#
# little-endian layout:
#   magic  b"CNLM"            4 bytes
#   hlen   uint32             4 bytes
#   header UTF-8 JSON         hlen bytes  {format_version, count, height, width, seed, config}
#   images float64[count*H*W]
#   landmarks float64[count*6]

DATASET_MAGIC = b"CNLM"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def write_dataset(path, images, landmarks, seed: int, config: SceneConfig = SceneConfig()) -> None:
    images = np.ascontiguousarray(images, dtype="<f8")
    landmarks = np.ascontiguousarray(landmarks, dtype="<f8")
    count = int(landmarks.shape[0])
    header = json.dumps(
        {
            "format_version": DATASET_VERSION,
            "count": count,
            "height": config.size,
            "width": config.size,
            "seed": int(seed),
            "config": asdict(config),
        },
        sort_keys=True,
    ).encode("utf-8")
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(images.tobytes())
            fh.write(landmarks.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_dataset(path):
    """Returns ``(images, landmarks, header)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC or len(blob) < 8:
        raise DatasetFormatError(f"{path}: not a landmark dataset file")
    (hlen,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: bad header ({exc})") from None
    if header.get("format_version") != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    n, h, w = header["count"], header["height"], header["width"]
    body = blob[8 + hlen :]
    expected = 8 * (n * h * w + n * 6)
    if len(body) != expected:
        raise DatasetFormatError(f"{path}: body has {len(body)} bytes, expected {expected}")
    images = np.frombuffer(body[: 8 * n * h * w], dtype="<f8").reshape(n, 1, h, w).astype(np.float64)
    landmarks = np.frombuffer(body[8 * n * h * w :], dtype="<f8").reshape(n, 6).astype(np.float64)
    return images, landmarks, header
