"""Synthetic parametric shape datasets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import Stream

SHAPES = ("sphere", "box", "torus", "cylinder")

SPHERE_RADIUS = 1.0
BOX_HALF = np.array([1.0, 0.7, 0.4])
TORUS_R, TORUS_r = 1.0, 0.35
CYL_RADIUS, CYL_HALF_HEIGHT = 0.6, 0.8


@dataclass
class DatasetSpec:
    classes: list[str] = field(default_factory=lambda: list(SHAPES))
    clouds_per_class: int = 2
    points_per_cloud: int = 128
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        bad = [c for c in self.classes if c not in SHAPES]
        if bad:
            raise ValueError(f"unknown shape class {bad}; valid names: {', '.join(SHAPES)}")
        if self.points_per_cloud < 8:
            raise ValueError("points_per_cloud must be at least 8")
        if not 1 <= len(self.classes) <= 55:
            raise ValueError("class count must be in [1, 55]")


def sample_sphere(rng: Stream, n: int) -> np.ndarray:
    v = rng.normal((n, 3))
    return SPHERE_RADIUS * v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_box(rng: Stream, n: int) -> np.ndarray:
    """Uniform on the surface: face pair chosen with probability proportional to area."""
    a, b, c = BOX_HALF
    areas = np.array([b * c, a * c, a * b])           # faces normal to x, y, z
    axis = np.searchsorted(np.cumsum(areas / areas.sum()), rng.uniform(size=n), side="right")
    axis = np.minimum(axis, 2)
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * BOX_HALF
    sign = np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)
    pts[np.arange(n), axis] = sign * BOX_HALF[axis]
    return pts


def sample_torus(rng: Stream, n: int) -> np.ndarray:
    """Area-uniform via rejection on the tube angle (density ~ R + r cos phi)."""
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        theta = rng.uniform(0.0, 2 * np.pi, m)
        phi = rng.uniform(0.0, 2 * np.pi, m)
        keep = rng.uniform(size=m) < (TORUS_R + TORUS_r * np.cos(phi)) / (TORUS_R + TORUS_r)
        theta, phi = theta[keep], phi[keep]
        ring = TORUS_R + TORUS_r * np.cos(phi)
        pts = np.stack([ring * np.cos(theta), ring * np.sin(theta), TORUS_r * np.sin(phi)], axis=1)
        out = np.concatenate([out, pts])
    return out[:n]


def sample_cylinder(rng: Stream, n: int) -> np.ndarray:
    r, h = CYL_RADIUS, CYL_HALF_HEIGHT
    side = 2 * np.pi * r * 2 * h
    caps = 2 * np.pi * r * r
    on_side = rng.uniform(size=n) < side / (side + caps)
    theta = rng.uniform(0.0, 2 * np.pi, n)
    z = rng.uniform(-h, h, n)
    rad = np.where(on_side, r, r * np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, z, np.where(rng.uniform(size=n) < 0.5, -h, h))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


SAMPLERS = {"sphere": sample_sphere, "box": sample_box, "torus": sample_torus, "cylinder": sample_cylinder}


def make_shape(name: str, n: int, jitter: float, rng: Stream) -> np.ndarray:
    if name not in SAMPLERS:
        raise ValueError(f"unknown shape class {name!r}; valid names: {', '.join(SHAPES)}")
    pts = SAMPLERS[name](rng, n)
    if jitter > 0:
        pts = pts + jitter * rng.normal(pts.shape)
    return pts


def generate(spec: DatasetSpec) -> list[tuple[str, int, np.ndarray]]:
    """(file stem, class id, points) for every shape, in a fixed order."""
    out = []
    for cid, name in enumerate(spec.classes):
        for k in range(spec.clouds_per_class):
            rng = Stream(spec.seed, "data." + name, k)
            out.append((f"{name}_{k:04d}", cid, make_shape(name, spec.points_per_cloud, spec.jitter, rng)))
    return out
