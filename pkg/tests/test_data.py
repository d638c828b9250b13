import numpy as np
import pytest
from scipy.stats import binom

from dim3d.data import (BOX_HALF, CYL_HALF_HEIGHT, CYL_RADIUS, TORUS_R, TORUS_r, DatasetSpec, generate,
                        make_shape, sample_box, sample_cylinder, sample_sphere, sample_torus)
from dim3d.rng import Stream


def test_sphere_on_surface():
    pts = sample_sphere(Stream(0, "s"), 1000)
    assert np.max(np.abs(np.linalg.norm(pts, axis=1) - 1.0)) < 1e-12


def test_sphere_octants_binomial():
    n = 10**5
    pts = sample_sphere(Stream(1, "oct"), n)
    octant = (pts[:, 0] > 0) * 4 + (pts[:, 1] > 0) * 2 + (pts[:, 2] > 0)
    counts = np.bincount(octant, minlength=8)
    sigma = np.sqrt(binom.var(n, 1 / 8))
    assert np.all(np.abs(counts - n / 8) < 3 * sigma)


def test_box_on_surface_and_area_weighted():
    pts = sample_box(Stream(2, "b"), 20000)
    rel = np.abs(pts) / BOX_HALF
    assert np.all(rel <= 1 + 1e-12)
    on_face = np.isclose(rel, 1.0, rtol=0, atol=1e-12)
    assert np.all(on_face.any(axis=1))
    a, b, c = BOX_HALF
    areas = np.array([b * c, a * c, a * b])
    frac = on_face.mean(axis=0)
    assert np.allclose(frac, areas / areas.sum(), atol=0.02)


def test_torus_on_surface():
    pts = sample_torus(Stream(3, "t"), 2000)
    ring = np.hypot(pts[:, 0], pts[:, 1]) - TORUS_R
    assert np.max(np.abs(np.hypot(ring, pts[:, 2]) - TORUS_r)) < 1e-12
    # area weighting puts more points on the outer half of the tube
    assert np.mean(ring > 0) > 0.55


def test_cylinder_on_surface():
    pts = sample_cylinder(Stream(4, "c"), 2000)
    r = np.hypot(pts[:, 0], pts[:, 1])
    side = np.isclose(r, CYL_RADIUS, atol=1e-12)
    cap = np.isclose(np.abs(pts[:, 2]), CYL_HALF_HEIGHT, atol=1e-12)
    assert np.all(side | cap)
    assert np.all(r <= CYL_RADIUS + 1e-12)


def test_generate_deterministic_and_ordered():
    spec = DatasetSpec(classes=["torus", "sphere"], clouds_per_class=3, points_per_cloud=32, seed=5)
    a, b = generate(spec), generate(spec)
    assert [s for s, _, _ in a] == ["torus_0000", "torus_0001", "torus_0002",
                                     "sphere_0000", "sphere_0001", "sphere_0002"]
    assert [c for _, c, _ in a] == [0, 0, 0, 1, 1, 1]
    assert all(np.array_equal(p, q) for (_, _, p), (_, _, q) in zip(a, b))
    assert not np.array_equal(a[0][2], a[1][2])
    other = generate(DatasetSpec(classes=["torus", "sphere"], clouds_per_class=3, points_per_cloud=32, seed=6))
    assert not np.array_equal(a[0][2], other[0][2])


def test_jitter():
    clean = make_shape("sphere", 500, 0.0, Stream(0, "j"))
    noisy = make_shape("sphere", 500, 0.05, Stream(0, "j"))
    assert not np.array_equal(clean, noisy)
    dev = np.linalg.norm(noisy, axis=1) - 1
    assert 0.02 < dev.std() < 0.08


def test_spec_validation():
    with pytest.raises(ValueError, match="sphere, box, torus, cylinder"):
        DatasetSpec(classes=["cone"])
    with pytest.raises(ValueError):
        DatasetSpec(points_per_cloud=4)
    with pytest.raises(ValueError):
        DatasetSpec(classes=[])
    with pytest.raises(ValueError, match="valid names"):
        make_shape("pyramid", 10, 0.0, Stream(0, "x"))
