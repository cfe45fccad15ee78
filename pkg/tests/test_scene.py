import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from geoaff.errors import ConvergenceError, DegenerateInputError, ParseError
from geoaff.scene import (Camera, Ray, TriangleMesh, box_mesh, calibrate_dlt,
                          distort_point, load_camera, load_mesh, pixel_ray,
                          project, save_camera, undistort_point)

CUBE_OBJ = """\
# unit-ish cube, mm
v 0 0 0
v 1000 0 0
v 1000 1000 0
v 0 1000 0
v 0 0 1000
v 1000 0 1000
v 1000 1000 1000
v 0 1000 1000
f 1 4 3
f 1 3 2
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 3 4 8
f 3 8 7
f 1 5 8
f 1 8 4
f 2 3 7
f 2 7 6
"""


def identity_camera(fx=1000.0, fy=1000.0, cx=960.0, cy=540.0,
                    width=1920, height=1080, dist=None):
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  rotation=np.eye(3), translation=np.zeros(3),
                  distortion=dist)


def random_camera(rng):
    rot = Rotation.from_rotvec(rng.uniform(-1.0, 1.0, 3)).as_matrix()
    return Camera(fx=rng.uniform(400, 1500), fy=rng.uniform(400, 1500),
                  cx=rng.uniform(300, 700), cy=rng.uniform(200, 500),
                  width=1024, height=768, rotation=rot,
                  translation=rng.uniform(-2000, 2000, 3))


# ---------------------------------------------------------------------------
# OBJ loading

def test_load_cube(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    mesh = load_mesh(p)
    assert len(mesh.vertices) == 8
    assert len(mesh.triangles) == 12


def test_quad_fan_triangulation(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    mesh = load_mesh(p)
    assert mesh.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_face_index_out_of_range(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text(CUBE_OBJ + "f 1 2 9\n")
    with pytest.raises(ParseError, match=r":22:.*9"):
        load_mesh(p)


def test_malformed_vertex_reports_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 zero\n")
    with pytest.raises(ParseError, match=r":1:"):
        load_mesh(p)


def test_degenerate_triangle_rejected(tmp_path):
    p = tmp_path / "deg.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(ParseError, match="degenerate triangle 0"):
        load_mesh(p)


def test_negative_indices_and_ignored_records(tmp_path):
    p = tmp_path / "neg.obj"
    p.write_text("o thing\nvn 0 0 1\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    mesh = load_mesh(p)
    assert mesh.triangles.tolist() == [[0, 1, 2]]


def test_face_with_slashes(tmp_path):
    p = tmp_path / "tex.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n")
    assert len(load_mesh(p).triangles) == 1


def test_box_mesh_topology():
    mesh = box_mesh([0, 0, 0], [1000, 1000, 1000])
    assert len(mesh.vertices) == 8
    assert len(mesh.triangles) == 12
    assert mesh.diameter == pytest.approx(1000 * math.sqrt(3))


# ---------------------------------------------------------------------------
# Camera validation

def test_camera_rejects_bad_rotation():
    with pytest.raises(ParseError, match="orthonormal"):
        Camera(fx=1, fy=1, cx=0, cy=0, width=2, height=2,
               rotation=np.eye(3) * 2.0, translation=np.zeros(3))


def test_camera_rejects_reflection():
    R = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ParseError, match="determinant"):
        Camera(fx=1, fy=1, cx=0, cy=0, width=2, height=2,
               rotation=R, translation=np.zeros(3))


def test_camera_rejects_principal_point_outside():
    with pytest.raises(ParseError, match="principal point"):
        identity_camera(cx=2000.0)


def test_camera_json_round_trip(tmp_path):
    cam = identity_camera(dist=(1e-2, -5e-3, 1e-4, -2e-4))
    path = tmp_path / "cam.json"
    save_camera(cam, path)
    back = load_camera(path)
    assert (back.fx, back.fy, back.cx, back.cy) == (cam.fx, cam.fy, cam.cx, cam.cy)
    assert (back.width, back.height) == (cam.width, cam.height)
    assert np.array_equal(back.rotation, cam.rotation)
    assert np.array_equal(back.translation, cam.translation)
    assert back.distortion == cam.distortion


def test_camera_json_missing_field(tmp_path):
    path = tmp_path / "cam.json"
    path.write_text(json.dumps({"fx": 1.0}))
    with pytest.raises(ParseError):
        load_camera(path)


# ---------------------------------------------------------------------------
# pixel_ray / project

def test_principal_axis_ray():
    ray = pixel_ray(identity_camera(), 960.0, 540.0)
    assert np.allclose(ray.origin, 0.0)
    assert np.allclose(ray.direction, [0, 0, 1])


def test_pixel_ray_closed_form():
    ray = pixel_ray(identity_camera(), 1960.0, 540.0)
    s = 1.0 / math.sqrt(2.0)
    assert np.allclose(ray.direction, [s, 0.0, s], atol=1e-15)


def test_rotated_camera_ray_round_trip():
    R = Rotation.from_euler("y", 90, degrees=True).as_matrix()
    cam = Camera(fx=800, fy=800, cx=512, cy=384, width=1024, height=768,
                 rotation=R, translation=np.array([100.0, -50.0, 2000.0]))
    ray = pixel_ray(cam, 700.0, 200.0)
    assert np.linalg.norm(ray.direction) == pytest.approx(1.0, abs=1e-12)
    for s in (500.0, 1000.0, 5000.0):
        x, y, z = project(cam, ray.origin + s * ray.direction)
        assert x == pytest.approx(700.0, abs=1e-9)
        assert y == pytest.approx(200.0, abs=1e-9)
        assert z == pytest.approx(s * float(ray.direction @ cam.view_axis))


def test_project_principal_axis():
    assert project(identity_camera(), (0, 0, 2000)) == \
        pytest.approx((960.0, 540.0, 2000.0))


def test_project_by_hand():
    assert project(identity_camera(), (200, 0, 2000)) == \
        pytest.approx((1060.0, 540.0, 2000.0))


def test_project_behind_camera():
    with pytest.raises(ValueError, match="behind"):
        project(identity_camera(), (0, 0, -5))


def test_round_trip_many_random_cameras():
    rng = np.random.default_rng(11)
    for _ in range(25):
        cam = random_camera(rng)
        x = rng.uniform(0, cam.width - 1)
        y = rng.uniform(0, cam.height - 1)
        ray = pixel_ray(cam, x, y)
        for s in (500.0, 1000.0, 5000.0):
            px, py, _ = project(cam, ray.origin + s * ray.direction)
            assert px == pytest.approx(x, abs=1e-6)
            assert py == pytest.approx(y, abs=1e-6)


# ---------------------------------------------------------------------------
# Distortion

def test_undistort_requires_coefficients():
    with pytest.raises(ValueError, match="no distortion"):
        undistort_point(identity_camera(), 100.0, 100.0)


def test_undistort_zero_coefficients_identity():
    cam = identity_camera(dist=(0.0, 0.0, 0.0, 0.0))
    assert undistort_point(cam, 123.4, 567.8) == \
        pytest.approx((123.4, 567.8), abs=1e-9)


def test_undistort_principal_point_zero_radius():
    cam = identity_camera(dist=(1e-7, 0.0, 0.0, 0.0))
    assert undistort_point(cam, 960.0, 540.0) == \
        pytest.approx((960.0, 540.0), abs=1e-9)


def test_undistort_inverts_forward_model():
    rng = np.random.default_rng(5)
    for _ in range(50):
        cam = identity_camera(dist=(rng.uniform(-0.1, 0.1),
                                    rng.uniform(-0.05, 0.05),
                                    rng.uniform(-1e-3, 1e-3),
                                    rng.uniform(-1e-3, 1e-3)))
        x = rng.uniform(300, 1600)
        y = rng.uniform(200, 900)
        xd, yd = distort_point(cam, x, y)
        xu, yu = undistort_point(cam, xd, yd)
        fwd = distort_point(cam, xu, yu)
        assert fwd == pytest.approx((xd, yd), abs=1e-6)
        assert (xu, yu) == pytest.approx((x, y), abs=1e-4)


def test_undistort_nonconvergence():
    cam = identity_camera(dist=(50.0, 50.0, 0.0, 0.0))
    with pytest.raises(ConvergenceError):
        undistort_point(cam, 1900.0, 1070.0)


# ---------------------------------------------------------------------------
# DLT calibration

def synthetic_correspondences(cam, rng, n=20, coplanar=False):
    pairs = []
    while len(pairs) < n:
        p_cam = np.array([rng.uniform(-800, 800), rng.uniform(-600, 600),
                          rng.uniform(1500, 6000)])
        if coplanar:
            p_cam[2] = 3000.0
        world = cam.rotation.T @ (p_cam - cam.translation)
        x, y, _ = project(cam, world)
        pairs.append((world, (x, y)))
    return pairs


def test_dlt_recovers_synthetic_camera():
    rng = np.random.default_rng(3)
    R = Rotation.from_rotvec([0.2, -0.4, 0.1]).as_matrix()
    cam = Camera(fx=1100.0, fy=1050.0, cx=630.0, cy=360.0, width=1280,
                 height=720, rotation=R,
                 translation=np.array([300.0, -100.0, 2500.0]))
    result = calibrate_dlt(synthetic_correspondences(cam, rng),
                           width=1280, height=720)
    got = result.camera
    assert result.mean_reprojection_error_px < 1e-6
    assert got.fx == pytest.approx(cam.fx, rel=1e-4)
    assert got.fy == pytest.approx(cam.fy, rel=1e-4)
    assert got.cx == pytest.approx(cam.cx, rel=1e-4)
    assert got.cy == pytest.approx(cam.cy, rel=1e-4)
    assert np.linalg.norm(got.rotation - cam.rotation) < 1e-6
    # projection matrices agree up to scale
    K = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1.0]])
    P_true = K @ np.hstack([cam.rotation, cam.translation[:, None]])
    P_true /= np.linalg.norm(P_true[2, :3])
    assert np.abs(result.projection - P_true).max() < 1e-6


def test_dlt_needs_six_points():
    rng = np.random.default_rng(4)
    cam = identity_camera()
    with pytest.raises(DegenerateInputError, match="at least 6"):
        calibrate_dlt(synthetic_correspondences(cam, rng, n=5))


def test_dlt_coplanar_degenerate():
    rng = np.random.default_rng(5)
    cam = identity_camera()
    with pytest.raises(DegenerateInputError, match="degenerate"):
        calibrate_dlt(synthetic_correspondences(cam, rng, n=20, coplanar=True))


def test_dlt_rotation_is_proper():
    rng = np.random.default_rng(6)
    for _ in range(10):
        cam = random_camera(rng)
        # keep points in front of this camera
        pairs = []
        while len(pairs) < 15:
            p_cam = np.array([rng.uniform(-500, 500), rng.uniform(-400, 400),
                              rng.uniform(1000, 5000)])
            world = cam.rotation.T @ (p_cam - cam.translation)
            x, y, _ = project(cam, world)
            pairs.append((world, (x, y)))
        got = calibrate_dlt(pairs, width=cam.width, height=cam.height).camera
        assert np.linalg.det(got.rotation) == pytest.approx(1.0, abs=1e-9)
        assert got.fx > 0 and got.fy > 0


# ---------------------------------------------------------------------------
# Ray and mesh validation

def test_ray_normalizes_direction():
    r = Ray(origin=[0, 0, 0], direction=[0, 0, 10])
    assert np.allclose(r.direction, [0, 0, 1])


def test_ray_zero_direction():
    with pytest.raises(ParseError):
        Ray(origin=[0, 0, 0], direction=[0, 0, 0])


def test_mesh_rejects_bad_index():
    with pytest.raises(ParseError, match="out of range"):
        TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))


@given(st.floats(min_value=-0.3, max_value=0.3),
       st.floats(min_value=-0.3, max_value=0.3),
       st.floats(min_value=-0.3, max_value=0.3))
def test_rotation_from_any_axis_valid(a, b, c):
    R = Rotation.from_rotvec([a, b, c]).as_matrix()
    cam = Camera(fx=500, fy=500, cx=250, cy=250, width=500, height=500,
                 rotation=R, translation=np.zeros(3))
    ray = pixel_ray(cam, 250.0, 250.0)
    assert np.allclose(ray.direction, cam.view_axis, atol=1e-12)
