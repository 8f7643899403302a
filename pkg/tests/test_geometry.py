import math

import numpy as np
import pytest
from scipy import ndimage
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from iisu.datamodel import DataError, SunPosition, SurfaceModel
from iisu.geometry import (
    illumination_geometry,
    incident_cosine,
    sky_view_factor,
    sun_visibility,
    surface_normals,
)


def _wall_scene(height=10.0, thickness=3, rows=40, cols=40, wall_row=20):
    z = np.zeros((rows, cols))
    z[wall_row:wall_row + thickness, :] = height
    return SurfaceModel(z, 1.0)


def test_flat_normals_point_up():
    n = surface_normals(SurfaceModel(np.zeros((4, 5)), 1.0)).vectors
    np.testing.assert_array_equal(n, np.broadcast_to([0.0, 0.0, 1.0], n.shape))


def test_tilted_plane_normal_matches_gradient():
    slope = math.tan(math.radians(20))
    cols = np.arange(6, dtype=float)
    z = np.tile(cols * slope, (5, 1))  # rises eastward
    n = surface_normals(SurfaceModel(z, 1.0)).vectors
    expected = np.array([-slope, 0.0, 1.0]) / math.sqrt(1 + slope**2)
    np.testing.assert_allclose(n, np.broadcast_to(expected, n.shape), atol=1e-12)
    tilt = np.degrees(np.arccos(n[..., 2]))
    np.testing.assert_allclose(tilt, 20.0, atol=1e-9)


def test_spike_gives_finite_unit_normals():
    z = np.zeros((5, 5))
    z[2, 2] = 1e6
    n = surface_normals(SurfaceModel(z, 1.0)).vectors
    assert np.all(np.isfinite(n))
    np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-9)
    assert np.all(n[..., 2] >= 0)


def test_normals_need_2x2():
    with pytest.raises(DataError):
        surface_normals(SurfaceModel(np.zeros((1, 5)), 1.0))


@pytest.mark.parametrize("zenith", [0.0, 40.0])
def test_flat_incident_cosine(zenith):
    dsm = SurfaceModel(np.zeros((3, 3)), 1.0)
    cos = incident_cosine(surface_normals(dsm), SunPosition(zenith, 190.0))
    np.testing.assert_allclose(cos, math.cos(math.radians(zenith)), atol=1e-12)


def test_slope_facing_the_sun():
    # downslope direction is azimuth 190 deg, so the surface faces the sun
    slope = math.tan(math.radians(20))
    az = math.radians(190)
    rows, cols = np.mgrid[0:8, 0:8].astype(float)
    east, north = cols, -rows
    z = -slope * (east * math.sin(az) + north * math.cos(az))
    cos = incident_cosine(surface_normals(SurfaceModel(z, 1.0)), SunPosition(40.0, 190.0))
    np.testing.assert_allclose(cos, math.cos(math.radians(20)), atol=1e-12)


def test_flat_ground_exactness():
    dsm = SurfaceModel(np.full((12, 9), 3.5), 2.0)
    geom = illumination_geometry(dsm, SunPosition(40.0, 190.0))
    assert np.all(geom.v == 1)
    assert np.all(geom.f == 1.0)
    np.testing.assert_allclose(geom.cos_theta, math.cos(math.radians(40)), atol=1e-12)


def test_wall_shadow_example():
    # 10 m wall 5 m to the south of the pixel, sun in the south at 50 deg elevation
    z = np.zeros((30, 11))
    z[15, :] = 10.0
    dsm = SurfaceModel(z, 1.0)
    v = sun_visibility(dsm, SunPosition(40.0, 180.0))
    assert math.degrees(math.atan2(10, 5)) > 50
    assert v[10, 5] == 0
    assert v[0, 5] == 1


@pytest.mark.parametrize("azimuth", [180.0, 90.0, 0.0, 270.0])
def test_visibility_matches_fine_ray_oracle_axis_aligned(azimuth):
    z = np.zeros((24, 24))
    z[10:13, 4:20] = 8.0
    z[5:8, 15:18] = 3.0
    dsm = SurfaceModel(z, 1.0)
    v = sun_visibility(dsm, SunPosition(40.0, azimuth))
    np.testing.assert_array_equal(v, oracles.visibility_bruteforce(z, 1.0, 40.0, azimuth))


def test_visibility_matches_fine_ray_oracle_oblique():
    z = np.zeros((30, 30))
    z[12:18, 10:20] = 12.0
    dsm = SurfaceModel(z, 1.0)
    v = sun_visibility(dsm, SunPosition(40.0, 190.0))
    ref = oracles.visibility_bruteforce(z, 1.0, 40.0, 190.0)
    # cells touching the box sit on the interpolated ramp of its edge, where a
    # sub-cell step can graze the corner; everywhere else the answer is exact
    touching = ndimage.binary_dilation(z > 0, structure=np.ones((3, 3), bool))
    np.testing.assert_array_equal(v[~touching], ref[~touching])
    assert np.mean(v != ref) < 0.01


def test_highest_pixel_is_sunlit(rng):
    z = rng.uniform(0, 20, size=(15, 15))
    v = sun_visibility(SurfaceModel(z, 1.0), SunPosition(60.0, 123.0))
    r, c = np.unravel_index(np.argmax(z), z.shape)
    assert v[r, c] == 1


def test_flat_sky_view_is_one():
    f = sky_view_factor(SurfaceModel(np.zeros((6, 7)), 1.0))
    assert np.all(f == 1.0)


def test_sky_view_needs_eight_azimuths():
    with pytest.raises(ValueError):
        sky_view_factor(SurfaceModel(np.zeros((3, 3)), 1.0), n_azimuths=4)


def test_long_wall_sky_view_matches_oracles():
    z = np.zeros((41, 201))
    z[20:23, :] = 5.0
    dsm = SurfaceModel(z, 1.0)
    f = sky_view_factor(dsm)
    row, col = 15, 100  # 5 m north of the wall face
    analytic = oracles.infinite_wall_svf(5.0, 5.0)
    mc = oracles.sky_view_montecarlo(z, 1.0, row, col, n_samples=20000)
    assert abs(f[row, col] - analytic) < 0.03
    assert abs(f[row, col] - mc) < 0.03


def test_pit_sky_view_is_small():
    z = np.full((21, 21), 50.0)
    z[9:12, 9:12] = 0.0
    dsm = SurfaceModel(z, 1.0)
    f = sky_view_factor(dsm)
    mc = oracles.sky_view_montecarlo(z, 1.0, 10, 10, n_samples=20000)
    assert f[10, 10] < 0.1
    assert abs(f[10, 10] - mc) < 0.03


def test_sky_view_converges_with_azimuth_count():
    z = np.zeros((30, 30))
    z[10:14, 8:22] = 9.0
    z[20:22, 3:6] = 4.0
    dsm = SurfaceModel(z, 1.0)
    f16, f64, f256 = (sky_view_factor(dsm, n) for n in (16, 64, 256))
    assert np.max(np.abs(f64 - f256)) < np.max(np.abs(f16 - f64))
    assert np.max(np.abs(f64 - f256)) < 0.02


def test_shadowed_wall_pixels_have_reduced_sky_view():
    dsm = _wall_scene()
    geom = illumination_geometry(dsm, SunPosition(40.0, 180.0))
    shaded = geom.v == 0
    assert shaded.any()
    assert np.all(geom.f[shaded] < 1.0)


def test_grazing_sun_is_finite():
    z = np.zeros((6, 6))
    z[3, 3] = 1.0
    geom = illumination_geometry(SurfaceModel(z, 1.0), SunPosition(89.9, 10.0))
    for grid in (geom.cos_theta, geom.f, geom.v):
        assert np.all(np.isfinite(grid))
    flat = np.ones(z.shape, bool)
    flat[2:5, 2:5] = False
    np.testing.assert_allclose(geom.cos_theta[flat], math.cos(math.radians(89.9)), atol=1e-12)


grids = hnp.arrays(np.float64, st.tuples(st.integers(3, 9), st.integers(3, 9)),
                   elements=st.floats(0, 20, allow_nan=False))


@settings(max_examples=25, deadline=None)
@given(grids, st.floats(1, 85), st.floats(0, 359.9))
def test_geometry_ranges(z, zenith, azimuth):
    geom = illumination_geometry(SurfaceModel(z, 1.0), SunPosition(zenith, azimuth), 16)
    assert set(np.unique(geom.v)) <= {0, 1}
    assert np.all((geom.f >= 0) & (geom.f <= 1))
    assert np.all((geom.cos_theta >= 0) & (geom.cos_theta <= 1))


@settings(max_examples=25, deadline=None)
@given(grids, st.data(), st.floats(0.1, 30), st.floats(5, 80), st.floats(0, 359.9))
def test_raising_an_occluder_never_adds_light(z, data, bump, zenith, azimuth):
    r = data.draw(st.integers(0, z.shape[0] - 1))
    c = data.draw(st.integers(0, z.shape[1] - 1))
    raised = z.copy()
    raised[r, c] += bump
    sun = SunPosition(zenith, azimuth)
    before = SurfaceModel(z, 1.0)
    after = SurfaceModel(raised, 1.0)
    others = np.ones(z.shape, dtype=bool)
    others[r, c] = False
    f0, f1 = sky_view_factor(before, 16), sky_view_factor(after, 16)
    v0, v1 = sun_visibility(before, sun), sun_visibility(after, sun)
    assert np.all(f1[others] <= f0[others] + 1e-12)
    assert np.all(v1[others] <= v0[others])
