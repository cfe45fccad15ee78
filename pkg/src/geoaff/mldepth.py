"""Multi-hit ray tracing and multi-layer depth maps.

A multi-layer depth map records, per pixel, the depths of *every* surface
crossing along the view ray, ordered front to back, instead of just the first
one. Depth at layer i is ``t_i * (r . v)`` where t_i is the i-th ray-triangle
hit distance, r the unit ray direction and v the camera viewing axis, so a
frontal plane at camera-frame z stores exactly z at every covered pixel.
Missing layers hold a NaN sentinel; finite values always occupy a strictly
increasing prefix of the layer axis.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import InvariantError, ParseError
from .scene import Camera, Ray, TriangleMesh, pixel_ray

DEFAULT_LAYERS = 15
T_MIN = 1e-6           # mm, hits closer than this to the origin are dropped
MERGE_EPS_REL = 1e-6   # merge hits closer than this fraction of scene diameter
PARALLEL_EPS = 1e-12   # |direction . unit normal| below this counts as tangent

_MAGIC = b"MLD1"


def _env_threads() -> int:
    try:
        return max(1, int(os.environ.get("GEOAFF_THREADS", "1")))
    except ValueError:
        return 1


def _ray_triangle_batch(origin: np.ndarray, dirs: np.ndarray,
                        mesh: TriangleMesh) -> np.ndarray:
    """Moller-Trumbore for one origin and (P, 3) directions against all
    triangles. Returns a (P, M) matrix of hit distances, +inf where a ray
    misses a triangle. Tangent triangles (|d . n| < PARALLEL_EPS with n the
    unit normal) never hit.
    """
    e1 = mesh.edge1
    e2 = mesh.edge2
    s = origin - mesh.corner                       # (M, 3), shared by all rays
    q = np.cross(s, e1)                            # (M, 3)
    h = np.cross(dirs[:, None, :], e2[None, :, :])  # (P, M, 3)
    det = np.einsum("mk,pmk->pm", e1, h)           # (P, M)
    dq = dirs @ q.T                                # (P, M)

    te = np.einsum("mk,mk->m", q, e2)              # (M,), shared t numerator
    ok = np.abs(det) >= PARALLEL_EPS * mesh.double_area[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(ok, 1.0 / det, 0.0)
        u = inv * np.einsum("mk,pmk->pm", s, h)
        v = inv * dq
        t = inv * te[None, :]
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > T_MIN)
    return np.where(hit, t, np.inf)


def _dedupe_sorted_rows(ts: np.ndarray, eps: float) -> np.ndarray:
    """Greedy merge of row-wise ascending hit distances: a hit is kept iff it
    exceeds the previously kept hit by more than eps. Misses are +inf and
    stay at the tail. Returns a (P, M) array padded with +inf.
    """
    P, M = ts.shape
    out = np.full((P, M), np.inf)
    last = np.full(P, -np.inf)
    count = np.zeros(P, dtype=np.int64)
    rows = np.arange(P)
    for j in range(M):
        col = ts[:, j]
        keep = np.isfinite(col) & (col - last > eps)
        if not keep.any():
            continue
        out[rows[keep], count[keep]] = col[keep]
        last[keep] = col[keep]
        count[keep] += 1
    return out


def multi_hit_trace(mesh: TriangleMesh, ray: Ray) -> np.ndarray:
    """All ray-mesh intersection distances, ascending, as a float array.

    Hits within ``MERGE_EPS_REL * mesh.diameter`` of each other are collapsed
    to one (a ray crossing a shared edge or vertex would otherwise be counted
    once per incident triangle). Empty array for a miss.
    """
    if not mesh.n_triangles:
        return np.zeros(0)
    t = _ray_triangle_batch(ray.origin, ray.direction[None, :], mesh)
    t.sort(axis=1)
    deduped = _dedupe_sorted_rows(t, MERGE_EPS_REL * mesh.diameter)[0]
    return deduped[np.isfinite(deduped)].copy()


@dataclass(frozen=True)
class MultiLayerDepthMap:
    """H x W x L grid of ordered surface-crossing depths (mm), NaN = absent.

    The rendering camera is embedded for provenance; ``depths`` is float32 to
    match the on-disk MLD1 payload byte for byte.
    """

    depths: np.ndarray
    camera: Camera

    def __post_init__(self):
        d = np.ascontiguousarray(self.depths, dtype=np.float32)
        if d.ndim != 3:
            raise InvariantError("depth grid must be H x W x L")
        d.flags.writeable = False
        object.__setattr__(self, "depths", d)

    @property
    def height(self) -> int:
        return self.depths.shape[0]

    @property
    def width(self) -> int:
        return self.depths.shape[1]

    @property
    def layers(self) -> int:
        return self.depths.shape[2]

    def pixel_index(self, x: float, y: float) -> tuple[int, int]:
        """Nearest-neighbor pixel for possibly non-integer coordinates."""
        ix = int(np.floor(x + 0.5))
        iy = int(np.floor(y + 0.5))
        if not (0 <= ix < self.width and 0 <= iy < self.height):
            raise ValueError(f"pixel ({x:.2f}, {y:.2f}) outside "
                             f"{self.width}x{self.height} map")
        return ix, iy

    def layers_at(self, x: float, y: float) -> np.ndarray:
        """Finite layer depths at the nearest pixel (possibly empty)."""
        ix, iy = self.pixel_index(x, y)
        col = self.depths[iy, ix]
        return col[np.isfinite(col)].astype(np.float64)

    def validate(self) -> None:
        """Check the sentinel-prefix / monotonicity / positivity invariants,
        reporting the first offending pixel and layer."""
        d = self.depths
        finite = np.isfinite(d)
        # no finite value after a sentinel
        bad = finite[:, :, 1:] & ~finite[:, :, :-1]
        if bad.any():
            y, x, l = np.argwhere(bad)[0]
            raise InvariantError(f"finite depth after sentinel at pixel "
                                 f"({int(x)}, {int(y)}) layer {int(l) + 1}")
        both = finite[:, :, 1:] & finite[:, :, :-1]
        nondec = both & ~(d[:, :, 1:] > d[:, :, :-1])
        if nondec.any():
            y, x, l = np.argwhere(nondec)[0]
            raise InvariantError(f"layers not strictly increasing at pixel "
                                 f"({int(x)}, {int(y)}) layer {int(l) + 1}")
        nonpos = finite & ~(d > 0)
        if nonpos.any():
            y, x, l = np.argwhere(nonpos)[0]
            raise InvariantError(f"non-positive depth at pixel "
                                 f"({int(x)}, {int(y)}) layer {int(l)}")


def _render_chunk(mesh: TriangleMesh, origin: np.ndarray, dirs: np.ndarray,
                  rv: np.ndarray, layers: int, eps: float) -> np.ndarray:
    t = _ray_triangle_batch(origin, dirs, mesh)
    t.sort(axis=1)
    deduped = _dedupe_sorted_rows(t, eps)
    n_keep = min(layers, deduped.shape[1])
    depth = deduped[:, :n_keep] * rv[:, None]
    out = np.full((dirs.shape[0], layers), np.nan, dtype=np.float32)
    finite = np.isfinite(depth)
    out[:, :n_keep][finite] = depth[finite].astype(np.float32)
    return out


def render_mld(mesh: TriangleMesh, camera: Camera,
               layers: int = DEFAULT_LAYERS,
               threads: int | None = None) -> MultiLayerDepthMap:
    """Render a multi-layer depth map by casting one ray per pixel center.

    The output is deterministic and independent of ``threads`` (default from
    GEOAFF_THREADS): pixels are partitioned into fixed chunks whose results
    are written to disjoint slices.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    W, H = camera.width, camera.height
    xs = np.arange(W, dtype=np.float64)
    ys = np.arange(H, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([(gx.ravel() - camera.cx) / camera.fx,
                      (gy.ravel() - camera.cy) / camera.fy,
                      np.ones(W * H)], axis=1)
    d_world = d_cam @ camera.rotation  # row-wise R^T @ d
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    rv = d_world @ camera.view_axis

    n_px = W * H
    out = np.full((n_px, layers), np.nan, dtype=np.float32)
    if mesh.n_triangles:
        eps = MERGE_EPS_REL * mesh.diameter
        # chunk size bounded so the (P, M, 3) intermediates stay small
        chunk = max(256, min(8192, 4_000_000 // max(mesh.n_triangles, 1)))
        spans = [(i, min(i + chunk, n_px)) for i in range(0, n_px, chunk)]

        def work(span):
            a, b = span
            return a, b, _render_chunk(mesh, camera.center, d_world[a:b],
                                       rv[a:b], layers, eps)

        n_threads = _env_threads() if threads is None else max(1, threads)
        if n_threads == 1 or len(spans) == 1:
            results: Iterator = map(work, spans)
        else:
            from concurrent.futures import ThreadPoolExecutor
            pool = ThreadPoolExecutor(max_workers=n_threads)
            results = pool.map(work, spans)
        for a, b, block in results:
            out[a:b] = block
        if n_threads > 1 and len(spans) > 1:
            pool.shutdown()
    return MultiLayerDepthMap(out.reshape(H, W, layers), camera)


# ---------------------------------------------------------------------------
# MLD1 container
#
# magic "MLD1" | u32 LE height | u32 LE width | u32 LE layers |
# f32 LE grid (row-major, layer innermost) | u32 LE metadata length |
# UTF-8 JSON metadata. Sentinel = quiet NaN.

def _write_container(path, grid: np.ndarray, meta: dict) -> None:
    grid = np.ascontiguousarray(grid, dtype=np.float32)
    h, w, l = grid.shape
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", h, w, l))
        fh.write(grid.tobytes(order="C"))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def _read_container(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise ParseError(f"{path}: truncated header")
        h, w, l = struct.unpack("<III", header)
        n_bytes = h * w * l * 4
        payload = fh.read(n_bytes)
        if len(payload) != n_bytes:
            raise ParseError(f"{path}: truncated payload "
                             f"({len(payload)} of {n_bytes} bytes)")
        lenb = fh.read(4)
        if len(lenb) != 4:
            raise ParseError(f"{path}: truncated metadata length")
        (blob_len,) = struct.unpack("<I", lenb)
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise ParseError(f"{path}: truncated metadata")
    grid = np.frombuffer(payload, dtype="<f4").reshape(h, w, l)
    try:
        meta = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad metadata JSON: {exc}") from exc
    return grid, meta


def save_mld(mld: MultiLayerDepthMap, path) -> None:
    _write_container(path, mld.depths, mld.camera.to_json_dict())


def load_mld(path) -> MultiLayerDepthMap:
    """Read an MLD1 file, validating the layer invariants (reports the first
    offending pixel/layer of a corrupt grid)."""
    grid, meta = _read_container(path)
    camera = Camera.from_json_dict(meta)
    mld = MultiLayerDepthMap(grid, camera)
    mld.validate()
    return mld


def visualize_layers(mld: MultiLayerDepthMap, n_layers: int) -> list[np.ndarray]:
    """Per-layer grayscale disparity images.

    Plots 1/depth rescaled to [0, 255] over each layer's finite range so near
    surfaces are bright; sentinel pixels are 0. A layer with a single finite
    value maps to 255.
    """
    if n_layers > mld.layers:
        raise ValueError(f"asked for {n_layers} layers, map has {mld.layers}")
    images = []
    for l in range(n_layers):
        layer = mld.depths[:, :, l].astype(np.float64)
        img = np.zeros(layer.shape, dtype=np.uint8)
        finite = np.isfinite(layer)
        if finite.any():
            inv = 1.0 / layer[finite]
            lo, hi = inv.min(), inv.max()
            if hi > lo:
                scaled = (inv - lo) / (hi - lo) * 255.0
            else:
                scaled = np.full(inv.shape, 255.0)
            img[finite] = np.round(scaled).astype(np.uint8)
        images.append(img)
    return images
