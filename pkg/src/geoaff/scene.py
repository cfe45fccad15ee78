"""Meshes, cameras, rays, projection, calibration and distortion correction.

Conventions used throughout the toolkit:

* World units are millimeters.
* Cameras are pinhole: ``x_cam = R @ x_world + t`` with ``R`` a world-to-camera
  rotation, depth is the camera-frame z coordinate.
* Integer pixel coordinates address pixel centers; rays pass through centers.
* Image x grows to the right (columns), y grows downward (rows).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, DegenerateInputError, ParseError

_MIN_TRIANGLE_AREA = 1e-9  # mm^2, degenerate faces rejected at load


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TriangleMesh:
    """World-space triangle soup in millimeters.

    vertices: (N, 3) float array
    triangles: (M, 3) int array of indices into ``vertices``
    """

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        bad_mask = (t < 0) | (t >= len(v))
        if bad_mask.any():
            bad = int(np.nonzero(bad_mask.any(axis=1))[0][0])
            raise ParseError(
                f"triangle index out of range (have {len(v)} vertices, "
                f"first bad triangle {bad})"
            )
        areas = self._areas_of(v, t)
        small = np.nonzero(areas <= _MIN_TRIANGLE_AREA)[0]
        if small.size:
            raise ParseError(f"degenerate triangle {int(small[0])} "
                             f"(area {areas[small[0]]:.3e} mm^2)")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "triangles", _frozen(t))

    @staticmethod
    def _areas_of(v, t):
        if not len(t):
            return np.zeros(0)
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def diameter(self) -> float:
        """Length of the axis-aligned bounding-box diagonal (mm)."""
        if not len(self.vertices):
            return 0.0
        span = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(span))

    # Precomputed per-triangle geometry shared by the ray casters.
    @cached_property
    def corner(self) -> np.ndarray:
        return _frozen(self.vertices[self.triangles[:, 0]])

    @cached_property
    def edge1(self) -> np.ndarray:
        return _frozen(self.vertices[self.triangles[:, 1]] - self.corner)

    @cached_property
    def edge2(self) -> np.ndarray:
        return _frozen(self.vertices[self.triangles[:, 2]] - self.corner)

    @cached_property
    def double_area(self) -> np.ndarray:
        """Per-triangle |e1 x e2| = twice the area, used to scale the
        parallel-ray rejection threshold."""
        return _frozen(np.linalg.norm(np.cross(self.edge1, self.edge2), axis=1))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with optional Brown-Conrady distortion.

    rotation is the 3x3 world-to-camera matrix, translation the 3-vector such
    that ``x_cam = R @ x_world + t`` (mm). distortion, when present, is
    (k1, k2, p1, p2) applied in normalized image coordinates.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    distortion: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-8:
            raise ParseError("camera rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ParseError("camera rotation has determinant -1")
        if not (self.fx > 0 and self.fy > 0):
            raise ParseError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ParseError("principal point outside the image")
        if self.distortion is not None:
            d = tuple(float(x) for x in self.distortion)
            if len(d) != 4:
                raise ParseError("distortion must be (k1, k2, p1, p2)")
            object.__setattr__(self, "distortion", d)
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @cached_property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return _frozen(-self.rotation.T @ self.translation)

    @property
    def view_axis(self) -> np.ndarray:
        """Unit viewing direction in world coordinates (third row of R)."""
        return self.rotation[2]

    def to_json_dict(self) -> dict:
        d = {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": [float(x) for x in self.rotation.ravel()],
            "t": [float(x) for x in self.translation],
        }
        if self.distortion is not None:
            d["dist"] = list(self.distortion)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "Camera":
        try:
            dist = d.get("dist")
            return cls(
                fx=float(d["fx"]), fy=float(d["fy"]),
                cx=float(d["cx"]), cy=float(d["cy"]),
                width=int(d["width"]), height=int(d["height"]),
                rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
                translation=np.asarray(d["t"], dtype=np.float64),
                distortion=tuple(dist) if dist is not None else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad camera JSON: {exc}") from exc


def save_camera(camera: Camera, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(camera.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_camera(path: str | os.PathLike) -> Camera:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    return Camera.from_json_dict(d)


@dataclass(frozen=True)
class Ray:
    """Half-line with unit direction, world frame, mm."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-12:
            if n == 0:
                raise ParseError("ray direction is zero")
            d = d / n
        object.__setattr__(self, "origin", _frozen(o))
        object.__setattr__(self, "direction", _frozen(d))


# ---------------------------------------------------------------------------
# OBJ loading

def load_mesh(path: str | os.PathLike) -> TriangleMesh:
    """Parse a Wavefront OBJ file into a TriangleMesh.

    Only ``v`` and ``f`` records are honored; everything else is ignored.
    Faces with more than three vertices are fan-triangulated from their first
    vertex. Negative (relative) indices are resolved per the OBJ convention.
    """
    vertices: list[list[float]] = []
    triangles: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            tag = fields[0]
            if tag == "v":
                if len(fields) < 4:
                    raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in fields[1:4]])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad vertex: {exc}") from exc
            elif tag == "f":
                if len(fields) < 4:
                    raise ParseError(f"{path}:{lineno}: face needs >= 3 vertices")
                idx = []
                for token in fields[1:]:
                    head = token.split("/", 1)[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise ParseError(f"{path}:{lineno}: bad face index "
                                         f"{token!r}") from exc
                    if i == 0:
                        raise ParseError(f"{path}:{lineno}: face index 0 is invalid")
                    i = i - 1 if i > 0 else len(vertices) + i
                    if not 0 <= i < len(vertices):
                        raise ParseError(f"{path}:{lineno}: face references vertex "
                                         f"{token} of {len(vertices)}")
                    idx.append(i)
                for k in range(1, len(idx) - 1):
                    triangles.append((idx[0], idx[k], idx[k + 1]))
            # other record types (vn, vt, o, g, s, mtllib, usemtl, ...) ignored
    return TriangleMesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
                        np.asarray(triangles, dtype=np.int64).reshape(-1, 3))


def box_mesh(min_corner, max_corner) -> TriangleMesh:
    """Axis-aligned closed box as 12 triangles with outward winding."""
    lo = np.asarray(min_corner, dtype=np.float64)
    hi = np.asarray(max_corner, dtype=np.float64)
    if not np.all(hi > lo):
        raise ParseError("box must have positive extent on every axis")
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    quads = [
        (0, 3, 2, 1),  # z = z0
        (4, 5, 6, 7),  # z = z1
        (0, 1, 5, 4),  # y = y0
        (2, 3, 7, 6),  # y = y1
        (0, 4, 7, 3),  # x = x0
        (1, 2, 6, 5),  # x = x1
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append((a, b, c))
        tris.append((a, c, d))
    return TriangleMesh(v, np.asarray(tris, dtype=np.int64))


# ---------------------------------------------------------------------------
# Projection and rays

def pixel_ray(camera: Camera, x: float, y: float) -> Ray:
    """World-space ray from the camera center through undistorted pixel (x, y).

    For (x, y) = (cx, cy) the direction equals the camera viewing axis.
    """
    d_cam = np.array([(x - camera.cx) / camera.fx,
                      (y - camera.cy) / camera.fy,
                      1.0])
    d_world = camera.rotation.T @ d_cam
    return Ray(camera.center, d_world / np.linalg.norm(d_world))


def project(camera: Camera, point) -> tuple[float, float, float]:
    """Project a world point, returning (x_px, y_px, depth_mm).

    Depth is the camera-frame z coordinate. No distortion is applied. Raises
    on points at or behind the camera plane.
    """
    p_cam = camera.rotation @ np.asarray(point, dtype=np.float64) + camera.translation
    z = float(p_cam[2])
    if z <= 0:
        raise ValueError(f"point behind camera (camera-frame z = {z:.3f} mm)")
    x = camera.fx * p_cam[0] / z + camera.cx
    y = camera.fy * p_cam[1] / z + camera.cy
    return float(x), float(y), z


def distort_point(camera: Camera, x: float, y: float) -> tuple[float, float]:
    """Apply the forward Brown-Conrady model to an ideal pixel."""
    if camera.distortion is None:
        return float(x), float(y)
    k1, k2, p1, p2 = camera.distortion
    xn = (x - camera.cx) / camera.fx
    yn = (y - camera.cy) / camera.fy
    r2 = xn * xn + yn * yn
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
    return float(xd * camera.fx + camera.cx), float(yd * camera.fy + camera.cy)


def undistort_point(camera: Camera, xd: float, yd: float,
                    tol_px: float = 1e-6, max_iters: int = 100
                    ) -> tuple[float, float]:
    """Invert the Brown-Conrady model by fixed-point iteration.

    Returns the ideal pixel whose forward distortion reproduces (xd, yd)
    within ``tol_px``. Raises ConvergenceError after ``max_iters``.
    """
    if camera.distortion is None:
        raise ValueError("camera has no distortion coefficients")
    k1, k2, p1, p2 = camera.distortion
    xdn = (xd - camera.cx) / camera.fx
    ydn = (yd - camera.cy) / camera.fy
    x, y = xdn, ydn
    for _ in range(max_iters):
        r2 = x * x + y * y
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        tx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        ty = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        x = (xdn - tx) / radial
        y = (ydn - ty) / radial
        # residual of the forward model, in pixels
        r2 = x * x + y * y
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        fx_ = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        fy_ = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        err = math.hypot((fx_ - xdn) * camera.fx, (fy_ - ydn) * camera.fy)
        if err < tol_px:
            return float(x * camera.fx + camera.cx), float(y * camera.fy + camera.cy)
    raise ConvergenceError(
        f"undistortion did not converge in {max_iters} iterations "
        f"(residual {err:.3e} px)")


# ---------------------------------------------------------------------------
# DLT calibration

@dataclass(frozen=True)
class CalibrationResult:
    camera: Camera
    projection: np.ndarray  # 3x4, scaled so P[2,:3] has unit norm
    mean_reprojection_error_px: float


def _hartley_2d(pts):
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    if d == 0:
        raise DegenerateInputError("all image points coincide")
    s = math.sqrt(2.0) / d
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return (pts - c) * s, T


def _hartley_3d(pts):
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    if d == 0:
        raise DegenerateInputError("all world points coincide")
    s = math.sqrt(3.0) / d
    T = np.eye(4)
    T[:3, :3] *= s
    T[:3, 3] = -s * c
    return (pts - c) * s, T


def calibrate_dlt(correspondences, width: int | None = None,
                  height: int | None = None) -> CalibrationResult:
    """Estimate a distortion-free camera from (world_mm, pixel) pairs.

    Solves the direct linear transform with Hartley normalization, then
    decomposes the 3x4 projection into K (upper triangular, positive focal
    lengths), R (orthonormal, det +1) and t. Needs at least 6 non-coplanar
    correspondences. width/height default to a symmetric cover of the
    recovered principal point since the correspondences alone do not
    determine the sensor size.
    """
    pts3 = np.asarray([p for p, _ in correspondences], dtype=np.float64).reshape(-1, 3)
    pts2 = np.asarray([q for _, q in correspondences], dtype=np.float64).reshape(-1, 2)
    n = len(pts3)
    if n < 6:
        raise DegenerateInputError(f"need at least 6 correspondences, got {n}")

    p3n, T3 = _hartley_3d(pts3)
    p2n, T2 = _hartley_2d(pts2)

    X = np.hstack([p3n, np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = X
    A[0::2, 8:12] = -p2n[:, 0:1] * X
    A[1::2, 4:8] = X
    A[1::2, 8:12] = -p2n[:, 1:2] * X

    _, sv, Vt = np.linalg.svd(A)
    # A non-degenerate configuration has exactly one (near-)zero singular
    # value; coplanar points open up a multi-dimensional null space.
    if sv[10] <= 1e-8 * sv[0]:
        raise DegenerateInputError(
            "degenerate configuration (coplanar or rank-deficient): "
            f"singular value ratio {sv[10] / sv[0]:.3e}")
    P = np.linalg.inv(T2) @ Vt[-1].reshape(3, 4) @ T3

    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    K, R = scipy.linalg.rq(M)
    signs = np.sign(np.diag(K))
    signs[signs == 0] = 1.0
    K = K * signs[np.newaxis, :]
    R = R * signs[:, np.newaxis]
    scale = K[2, 2]
    K = K / scale
    t = np.linalg.solve(K, P[:, 3] / scale)

    fx, fy = float(K[0, 0]), float(K[1, 1])
    cx, cy = float(K[0, 2]), float(K[1, 2])
    if width is None:
        width = int(math.ceil(2 * cx)) + 1
    if height is None:
        height = int(math.ceil(2 * cy)) + 1
    camera = Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                    rotation=R, translation=t)

    errs = []
    for p, q in zip(pts3, pts2):
        x, y, _ = project(camera, p)
        errs.append(math.hypot(x - q[0], y - q[1]))
    P_norm = P / np.linalg.norm(P[2, :3])
    return CalibrationResult(camera=camera, projection=P_norm,
                             mean_reprojection_error_px=float(np.mean(errs)))
