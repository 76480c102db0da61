import math

import numpy as np
import pytest

from src.acquisition_geometry import AcquisitionGeometry, Ray, make_circular_geometry, rotation_z
from src.exceptions import InvalidGeometryError, ProjectionDomainError


def test_thirty_views_are_twelve_degrees_apart():
    geom = make_circular_geometry(30, 500, 1000, (1024, 1024), (0.4, 0.4))
    assert geom.num_projections == 30
    assert np.allclose(np.diff(geom.angles), math.radians(12.0))
    assert geom.angles[0] == 0.0


def test_single_view_and_quarter_turns():
    assert make_circular_geometry(1, 500, 1000, (2, 2), (1, 1)).angles == (0.0,)
    geom = make_circular_geometry(4, 1, 2, (2, 2), (1, 1))
    assert np.allclose(geom.angles, [0.0, math.pi / 2, math.pi, 3 * math.pi / 2])


@pytest.mark.parametrize(
    "args",
    [
        (0, 500, 1000, (8, 8), (1, 1)),
        (4, 500, 400, (8, 8), (1, 1)),
        (4, 0, 400, (8, 8), (1, 1)),
        (4, 500, 1000, (1, 8), (1, 1)),
        (4, 500, 1000, (8, 8), (0, 1)),
    ],
)
def test_invalid_geometry_rejected(args):
    with pytest.raises(InvalidGeometryError):
        make_circular_geometry(*args)


def test_center_pixel_ray_follows_the_axis():
    geom = make_circular_geometry(2, 500, 1000, (5, 7), (1, 1))
    ray = geom.ray_for_pixel(0, 2, 3)
    assert np.allclose(ray.origin, [0, -500, 0])
    assert np.allclose(ray.direction, [0, 1, 0], atol=1e-15)


def test_opposite_view_ray_is_rotated_by_pi():
    geom = make_circular_geometry(2, 500, 1000, (16, 16), (0.5, 0.5))
    r0 = geom.ray_for_pixel(0, 3, 11)
    r1 = geom.ray_for_pixel(1, 3, 11)
    rot = rotation_z(math.pi)
    assert np.allclose(r1.direction, rot @ r0.direction, atol=1e-12)
    assert np.allclose(r1.origin, rot @ r0.origin, atol=1e-9)


def test_corner_pixel_ray_hits_pixel_center():
    geom = make_circular_geometry(1, 500, 1000, (64, 32), (0.25, 0.5))
    ray = geom.ray_for_pixel(0, 0, 0)
    expected = np.array([-31.5 * 0.25, 500.0, -15.5 * 0.5])
    assert ray.distance_to(expected) < 1e-9


def test_out_of_range_indices_raise_index_error():
    geom = make_circular_geometry(3, 500, 1000, (8, 8), (1, 1))
    with pytest.raises(IndexError):
        geom.ray_for_pixel(3, 0, 0)
    with pytest.raises(IndexError):
        geom.ray_for_pixel(0, 8, 0)
    with pytest.raises(IndexError):
        geom.pixel_rays(0, np.array([0, 9]), np.array([0, 0]))


@pytest.mark.parametrize("u, v", [(-0.3, 2), (8, 2), (7.6, 2), (2, -0.3), (2, 8), (2, 7.9)])
def test_pixel_coordinates_outside_detector_raise_index_error(u, v):
    geom = make_circular_geometry(3, 500, 1000, (8, 8), (1, 1))
    with pytest.raises(IndexError):
        geom.ray_for_pixel(0, u, v)
    with pytest.raises(IndexError):
        geom.pixel_rays(0, np.array([1.0, u]), np.array([1.0, v]))


def test_last_pixel_and_fractional_interior_are_accepted():
    geom = make_circular_geometry(3, 500, 1000, (8, 8), (1, 1))
    geom.ray_for_pixel(0, 7, 7)
    geom.ray_for_pixel(0, 0, 0)
    origins, dirs = geom.pixel_rays(0, np.array([0.0, 6.99]), np.array([0.0, 3.5]))
    assert origins.shape == dirs.shape == (2, 3)


def test_project_point_cases():
    geom = make_circular_geometry(1, 500, 1000, (101, 101), (0.5, 0.5))
    assert np.allclose(geom.project_point(0, (0, 0, 0)), (50, 50))
    assert np.allclose(geom.project_point(0, (0, 250, 0)), (50, 50))
    u, v = geom.project_point(0, (10, 0, 0))
    assert u - 50 == pytest.approx(10 * geom.magnification / 0.5)
    assert v == pytest.approx(50)
    with pytest.raises(ProjectionDomainError):
        geom.project_point(0, (0, -600, 0))


def test_projection_round_trip(rng):
    geom = make_circular_geometry(30, 500, 1000, (256, 256), (0.8, 0.8))
    points = rng.uniform(-30, 30, size=(200, 3))
    for k in (0, 7, 29):
        uv = geom.project_points(k, points)
        origins, dirs = geom.pixel_rays(k, uv[:, 0], uv[:, 1])
        for o, d, p in zip(origins, dirs, points):
            assert Ray(o, d).distance_to(p) < 1e-9 * geom.sdd


def test_rotational_consistency(rng):
    geom = make_circular_geometry(30, 500, 1000, (256, 256), (0.8, 0.8))
    points = rng.uniform(-40, 40, size=(50, 3))
    for k in (3, 17):
        rotated = points @ rotation_z(geom.angles[k]).T
        assert np.allclose(geom.project_points(k, rotated), geom.project_points(0, points), atol=1e-9)


def test_pixel_rays_are_row_major_unit_vectors():
    geom = make_circular_geometry(2, 500, 1000, (6, 4), (1, 1))
    origins, dirs = geom.pixel_rays(1)
    assert origins.shape == dirs.shape == (24, 3)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
    # second pixel in memory order is (u=1, v=0)
    assert np.allclose(dirs[1], geom.ray_for_pixel(1, 1, 0).direction)


def test_ray_rejects_non_unit_direction():
    with pytest.raises(InvalidGeometryError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))


def test_geometry_json_sidecar(tmp_path):
    geom = make_circular_geometry(5, 400, 900, (32, 16), (0.7, 0.9))
    loaded = AcquisitionGeometry.load(geom.save(tmp_path / "geometry.json"))
    assert loaded == geom
