import math
import warnings

import numpy as np
import pytest

from src.acquisition_geometry import Ray, make_circular_geometry
from src.exceptions import ConfigurationError, GeometryIntegrityError
from src.phantom_models import (
    Cone,
    Ellipsoid,
    Phantom,
    ProjectionSet,
    Sphere,
    builtin_phantom,
    primitive_from_dict,
    simulate_projections,
    sphere_phantom,
)
from src.stl_mesh import TriangleMesh, icosphere

X_AXIS = np.array([1.0, 0.0, 0.0])


def unit_sphere(attenuation=1.0, center=(0.0, 0.0, 0.0)):
    return Phantom(primitives=[Sphere(center, np.eye(3), attenuation, radius=1.0)], name="unit")


@pytest.mark.parametrize("offset,expected", [(0.0, 2.0), (0.6, 1.6), (2.0, 0.0)])
def test_unit_sphere_chords(offset, expected):
    ray = Ray(np.array([-5.0, offset, 0.0]), X_AXIS)
    assert unit_sphere().line_integral(ray) == pytest.approx(expected, abs=1e-12)


def test_origin_inside_sphere_counts_forward_part_only():
    ray = Ray(np.zeros(3), X_AXIS)
    assert unit_sphere().line_integral(ray) == pytest.approx(1.0)


def test_attenuation_scales_integral():
    ray = Ray(np.array([-5.0, 0.0, 0.0]), X_AXIS)
    assert unit_sphere(attenuation=0.25).line_integral(ray) == pytest.approx(0.5)


def test_disjoint_primitives_add():
    a = Sphere((-3.0, 0.0, 0.0), np.eye(3), 1.0, radius=1.0)
    b = Ellipsoid((3.0, 0.0, 0.0), np.eye(3), 2.0, semi_axes=(2.0, 1.0, 1.0))
    both = Phantom(primitives=[a, b])
    ray = Ray(np.array([-10.0, 0.2, 0.1]), X_AXIS)
    separate = Phantom(primitives=[a]).line_integral(ray) + Phantom(primitives=[b]).line_integral(ray)
    assert both.line_integral(ray) == pytest.approx(separate, rel=1e-12)


def test_ellipsoid_major_axis_chord():
    e = Ellipsoid((0.0, 0.0, 0.0), np.eye(3), 1.0, semi_axes=(2.0, 1.0, 1.0))
    lengths = e.chord_lengths(np.array([[-10.0, 0.0, 0.0]]), X_AXIS[None, :])
    assert lengths[0] == pytest.approx(4.0)


def test_cone_axis_and_cross_section_chords():
    cone = Cone((0.0, 0.0, 0.0), np.eye(3), 1.0, half_angle=math.radians(30.0), height=6.0)
    axial = cone.chord_lengths(np.array([[0.0, 0.0, -100.0]]), np.array([[0.0, 0.0, 1.0]]))
    assert axial[0] == pytest.approx(6.0)
    # 2 units above the apex the section radius is 2 tan(30 deg)
    across = cone.chord_lengths(np.array([[-50.0, 0.0, -1.0]]), X_AXIS[None, :])
    assert across[0] == pytest.approx(4.0 * math.tan(math.radians(30.0)))
    miss = cone.chord_lengths(np.array([[-50.0, 0.0, 3.5]]), X_AXIS[None, :])
    assert miss[0] == 0.0


def test_surface_distance_examples():
    assert unit_sphere().surface_distance((2.0, 0.0, 0.0)) == pytest.approx(1.0)
    assert unit_sphere().surface_distance((1.0, 0.0, 0.0)) == pytest.approx(0.0, abs=1e-12)
    ellipsoid = Phantom(primitives=[Ellipsoid((0.0, 0.0, 0.0), np.eye(3), 1.0, semi_axes=(2.0, 1.0, 1.0))])
    assert ellipsoid.surface_distance((3.0, 0.0, 0.0)) == pytest.approx(1.0, abs=1e-9)
    assert ellipsoid.surface_distance((0.0, 0.5, 0.0)) == pytest.approx(0.5, abs=1e-9)


def test_surface_samples_are_on_the_surface(rng):
    e = Ellipsoid((1.0, -2.0, 0.5), np.eye(3), 1.0, semi_axes=(3.0, 2.0, 1.5))
    samples = e.surface_samples(200, rng)
    assert np.max(Phantom(primitives=[e]).surface_distances(samples)) < 1e-6


def test_surface_distance_is_a_lower_bound_on_sample_distance(rng):
    e = Ellipsoid((0.0, 0.0, 0.0), np.eye(3), 1.0, semi_axes=(3.0, 2.0, 1.0))
    phantom = Phantom(primitives=[e])
    samples = e.surface_samples(5000, rng)
    points = rng.uniform(-5.0, 5.0, size=(50, 3))
    exact = phantom.surface_distances(points)
    sampled = np.min(np.linalg.norm(points[:, None, :] - samples[None, :, :], axis=2), axis=1)
    assert np.all(exact <= sampled + 1e-9)
    assert np.all(sampled - exact < 0.5)


def test_non_finite_query_rejected():
    with pytest.raises(ConfigurationError):
        unit_sphere().surface_distances(np.array([[np.nan, 0.0, 0.0]]))


def test_invalid_primitives_rejected():
    with pytest.raises(ConfigurationError):
        Sphere((0, 0, 0), np.eye(3), 1.0, radius=-1.0)
    with pytest.raises(ConfigurationError):
        Sphere((0, 0, 0), 2.0 * np.eye(3), 1.0, radius=1.0)
    with pytest.raises(ConfigurationError):
        primitive_from_dict({"kind": "sphere", "center": [0, 0, 0]})
    with pytest.raises(ConfigurationError):
        Phantom(primitives=[])


def test_zero_phantom_gives_zero_images(small_geometry):
    phantom = sphere_phantom(radius=5.0, attenuation=0.0)
    projections = simulate_projections(phantom, small_geometry)
    assert projections.images.shape == (8, 40, 48)
    assert np.all(projections.images == 0.0)


def test_centered_sphere_views_are_identical(small_geometry):
    projections = simulate_projections(sphere_phantom(radius=6.0), small_geometry, workers=2)
    for k in range(1, 8):
        assert np.allclose(projections.images[k], projections.images[0], atol=1e-9)
    assert projections.images[0].max() == pytest.approx(12.0 * 0.02, rel=5e-3)


def test_opposite_views_of_offset_sphere_are_mirrored(small_geometry):
    phantom = sphere_phantom(radius=4.0, center=(4.0, 0.0, 2.0))
    images = simulate_projections(phantom, small_geometry).images
    # view 4 of 8 sits at pi
    assert np.allclose(images[4], images[0][:, ::-1], atol=1e-9)
    assert not np.allclose(images[0], images[0][:, ::-1])


def test_projection_set_save_and_load(tmp_path, small_geometry):
    projections = simulate_projections(sphere_phantom(radius=6.0), small_geometry)
    projections.save(tmp_path / "projections.raw", tmp_path / "geometry.json")
    loaded = ProjectionSet.load(tmp_path / "projections.raw", tmp_path / "geometry.json")
    assert loaded.images.dtype == np.float64
    assert np.allclose(loaded.images, projections.images, rtol=1e-6)


def test_projection_set_shape_checked(small_geometry):
    with pytest.raises(ConfigurationError):
        ProjectionSet(geometry=small_geometry, images=np.zeros((8, 48, 40)))


def test_icosphere_phantom_matches_analytic_sphere():
    geom = make_circular_geometry(2, 200.0, 400.0, (31, 31), (1.0, 1.0))
    mesh_phantom = Phantom(mesh=icosphere(radius=5.0, subdivisions=4), mesh_attenuation=1.0)
    analytic = sphere_phantom(radius=5.0, attenuation=1.0)
    mesh_images = simulate_projections(mesh_phantom, geom).images
    exact = simulate_projections(analytic, geom).images
    assert mesh_images[0, 15, 15] == pytest.approx(exact[0, 15, 15], rel=0.01)
    assert np.max(np.abs(mesh_images - exact)) < 1.0


def test_open_mesh_is_refused(small_geometry):
    closed = icosphere(radius=3.0, subdivisions=1)
    opened = TriangleMesh(closed.vertices, closed.faces[:-1], watertight=False)
    with pytest.raises(GeometryIntegrityError):
        simulate_projections(Phantom(mesh=opened), small_geometry)


def test_builtin_library():
    sphere = builtin_phantom("sphere", scale_mm=30.0)
    assert sphere.primitives[0].radius == 30.0
    assert sphere.family == "sphere"
    assert builtin_phantom("cone").family == "cone"
    assert len(builtin_phantom("shepp_logan").primitives) == 10
    with pytest.raises(ConfigurationError):
        builtin_phantom("teapot")


def test_phantom_json_round_trip(tmp_path):
    phantom = builtin_phantom("shepp-logan", scale_mm=40.0)
    loaded = Phantom.load(phantom.save(tmp_path / "phantom.json"))
    points = np.array([[0.0, 0.0, 0.0], [10.0, 5.0, -3.0], [50.0, 0.0, 0.0]])
    assert np.allclose(loaded.attenuation_at(points), phantom.attenuation_at(points))
    assert loaded.family == phantom.family


def test_shepp_logan_distances_and_projections_are_warning_free(rng, small_geometry):
    phantom = builtin_phantom("shepp-logan", scale_mm=10.0)
    on_axes = np.array([[0.0, 0.0, 0.0], [0.3, 0.0, 0.0], [0.0, 0.4, 0.0], [0.0, 0.0, 0.2], [0.2, 0.1, 0.0]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for prim in phantom.primitives:
            scale = float(np.max(prim.axes))
            local = np.vstack([on_axes * scale, on_axes * 1.5 * scale, rng.uniform(-scale, scale, size=(50, 3))])
            assert np.all(np.isfinite(prim.surface_distances(prim.to_world(local))))
        distances = phantom.surface_distances(rng.uniform(-12.0, 12.0, size=(300, 3)))
        images = simulate_projections(phantom, small_geometry).images
    assert np.all(np.isfinite(distances))
    assert images.max() > 0.0
