"""Free-space semantics over multi-layer depth maps.

Consecutive layer pairs (Z_0, Z_1), (Z_2, Z_3), ... bound occupied slabs of
the scene along each pixel's view ray; the complement is free space where a
joint may legally sit. The geometry loss below charges each joint its
penetration distance into the nearest face of the slab containing it, which
is zero everywhere in free space and on surfaces, grows linearly inside, and
therefore has a +/-1 depth subgradient that pushes offending joints back to
the closest surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .mldepth import MultiLayerDepthMap, _write_container, _read_container
from .errors import InvariantError

if TYPE_CHECKING:  # pragma: no cover
    from .pose import CropTransform, Pose3D

SENTINEL_OFFSET = 1e6  # mm offset encoding "no surface in this layer"


@dataclass(frozen=True)
class FreeSpaceIntervals:
    """Sorted disjoint open depth intervals of legal joint positions at one
    pixel. Endpoints are floats, the first lower bound is -inf; a trailing
    occupied half-line (odd number of surface crossings) means the last upper
    bound is finite.
    """

    intervals: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.intervals:
            raise InvariantError("free-space interval list may not be empty")
        prev_hi = None
        for lo, hi in self.intervals:
            if not lo < hi:
                raise InvariantError(f"empty interval ({lo}, {hi})")
            if prev_hi is not None and lo < prev_hi:
                raise InvariantError("intervals overlap or are unsorted")
            prev_hi = hi
        if self.intervals[0][0] != -math.inf:
            raise InvariantError("first interval must start at -inf")

    def contains(self, z: float) -> bool:
        """True iff z lies strictly inside a free interval or exactly on a
        slab face (surface contact is legal)."""
        for lo, hi in self.intervals:
            if lo < z < hi:
                return True
            if z == lo or z == hi:
                return True
        return False

    def slabs(self) -> list[tuple[float, float]]:
        """Occupied complement intervals, trailing one may end at +inf."""
        out = []
        for (_, hi), (lo2, _) in zip(self.intervals, self.intervals[1:]):
            out.append((hi, lo2))
        last_hi = self.intervals[-1][1]
        if last_hi != math.inf:
            out.append((last_hi, math.inf))
        return out


def slab_penetration(z: float, d_lo: float, d_hi: float) -> float:
    """Distance from z to the nearest face of slab [d_lo, d_hi], zero outside.

    min(max(0, z - d_lo), max(0, d_hi - z)): linear ramps from both faces
    meeting at the slab midpoint.
    """
    if d_lo > d_hi:
        raise ValueError(f"slab bounds out of order: {d_lo} > {d_hi}")
    return min(max(0.0, z - d_lo), max(0.0, d_hi - z))


def _slab_pairs(layers: np.ndarray) -> list[tuple[float, float]]:
    """Occupied (entry, exit) depth pairs at a pixel. An odd crossing count
    gets a virtual exit at +inf (non-watertight meshes leak)."""
    pairs = []
    k = len(layers)
    for i in range(0, k, 2):
        hi = float(layers[i + 1]) if i + 1 < k else math.inf
        pairs.append((float(layers[i]), hi))
    return pairs


def free_intervals(mld: MultiLayerDepthMap, x: float, y: float) -> FreeSpaceIntervals:
    """Free depth set at a pixel (nearest-neighbor lookup).

    With finite layers Z_0..Z_{k-1}: (-inf, Z_0) then each gap (Z_1, Z_2),
    (Z_3, Z_4), ... For even k the last interval reaches +inf; an odd k
    closes the final slab at +inf instead. An empty pixel is fully free.
    """
    layers = mld.layers_at(x, y)
    if len(layers) == 0:
        return FreeSpaceIntervals(((-math.inf, math.inf),))
    out = [(-math.inf, float(layers[0]))]
    k = len(layers)
    for i in range(1, k - 1, 2):
        out.append((float(layers[i]), float(layers[i + 1])))
    if k % 2 == 0:
        out.append((float(layers[k - 1]), math.inf))
    return FreeSpaceIntervals(tuple(out))


def _joint_penetration(layers: np.ndarray, z: float) -> float:
    """Penetration of a single depth into this pixel's occupied slabs.

    Slabs are disjoint, so at most one term is nonzero; taking the max over
    slabs therefore equals the penetration of the containing slab. That
    one-slab property is asserted here because everything downhill (gradient
    signs, projection distances) relies on it.
    """
    best = 0.0
    nonzero = 0
    for lo, hi in _slab_pairs(layers):
        p = min(max(0.0, z - lo), max(0.0, hi - z)) if hi != math.inf \
            else max(0.0, z - lo)
        if p > 0.0:
            nonzero += 1
            best = max(best, p)
    assert nonzero <= 1, "depth inside more than one occupied slab"
    return best


def geometry_loss(pose: "Pose3D", mld: MultiLayerDepthMap) -> float:
    """Total penetration (mm) of a pose into the occupied scene volume.

    Sum over joints of the containing-slab penetration at each joint's pixel;
    zero exactly when every joint is in free space or touching a surface.
    Raises with the joint index if a joint's pixel is off the map.
    """
    total = 0.0
    for j, (x, y, z) in enumerate(pose.joints):
        try:
            layers = mld.layers_at(x, y)
        except ValueError as exc:
            raise ValueError(f"joint {j}: {exc}") from exc
        total += _joint_penetration(layers, float(z))
    return total


def geometry_loss_gradient(pose: "Pose3D", mld: MultiLayerDepthMap) -> np.ndarray:
    """Per-joint depth subgradient of the geometry loss.

    0 in free space and on faces; +1 strictly nearer the front face of the
    containing slab, -1 strictly nearer the back face. The slab midpoint is
    non-differentiable and resolves to +1 (push toward the camera). The
    (x, y) gradient is identically zero under nearest-neighbor lookup, so
    only dz values are returned.
    """
    grad = np.zeros(len(pose.joints))
    for j, (x, y, z) in enumerate(pose.joints):
        try:
            layers = mld.layers_at(x, y)
        except ValueError as exc:
            raise ValueError(f"joint {j}: {exc}") from exc
        z = float(z)
        for lo, hi in _slab_pairs(layers):
            if lo < z < hi:
                front = z - lo
                back = hi - z
                grad[j] = 1.0 if front <= back else -1.0
                break
    return grad


def valid_joints(pose: "Pose3D", mld: MultiLayerDepthMap) -> np.ndarray:
    """Per-joint legality: inside an open free interval or exactly on a
    surface (contact while sitting or touching is physical)."""
    ok = np.ones(len(pose.joints), dtype=bool)
    for j, (x, y, z) in enumerate(pose.joints):
        try:
            layers = mld.layers_at(x, y)
        except ValueError as exc:
            raise ValueError(f"joint {j}: {exc}") from exc
        ok[j] = _joint_penetration(layers, float(z)) == 0.0
    return ok


def nearest_valid_depth(z: float, intervals: FreeSpaceIntervals) -> float:
    """Project a depth onto the closure of the free set.

    Returns z unchanged when already valid, otherwise the nearest face of the
    slab containing it; exact midpoint ties resolve toward the camera
    (smaller depth), matching the gradient tie-break.
    """
    z = float(z)
    if intervals.contains(z):
        return z
    for lo, hi in intervals.slabs():
        if lo < z < hi:
            if hi == math.inf:
                return lo
            return lo if (z - lo) <= (hi - z) else hi
    # contains() covers every non-slab point, so this is unreachable
    raise AssertionError("depth neither free nor inside a slab")


# ---------------------------------------------------------------------------
# Geometry encodings at heatmap resolution

@dataclass(frozen=True)
class GeometryFeatureMap:
    """H x W x C feature grid: root-relative depth offsets (C = layer count)
    or sampled occupancy-loss values (C = sample count)."""

    values: np.ndarray
    root_depth: float
    kind: str  # "depth_offsets" | "volumetric"

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise InvariantError("feature grid must be H x W x C")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def save(self, path) -> None:
        """Write in the MLD1 container with layers = C; metadata records the
        encoding parameters instead of a camera."""
        _write_container(path, self.values,
                         {"feature": {"kind": self.kind,
                                      "root_depth": self.root_depth}})


def load_feature_map(path) -> GeometryFeatureMap:
    grid, meta = _read_container(path)
    try:
        info = meta["feature"]
        return GeometryFeatureMap(grid, float(info["root_depth"]),
                                  str(info["kind"]))
    except (KeyError, TypeError) as exc:
        raise InvariantError(f"{path}: not a feature-map container") from exc


def _source_pixels(mld: MultiLayerDepthMap, crop: "CropTransform",
                   out_res: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest source pixel per output cell, mapping output cell centers
    through crop coordinates (cell c sits at crop pixel c * target/out_res).
    """
    if crop.box_size <= 0:
        raise ValueError("empty crop")
    factor = crop.target_size / out_res
    cells = np.arange(out_res, dtype=np.float64) * factor
    sx, sy = crop.to_source(cells, cells)  # 1-D each
    gx = np.floor(sx + 0.5).astype(np.int64)
    gy = np.floor(sy + 0.5).astype(np.int64)
    if gx.min() < 0 or gx.max() >= mld.width or gy.min() < 0 or gy.max() >= mld.height:
        raise ValueError("crop rectangle leaves the source image")
    return gx, gy


def encode_depth_features(mld: MultiLayerDepthMap, crop: "CropTransform",
                          root_depth: float, out_res: int = 64) -> GeometryFeatureMap:
    """Layer depths resampled to heatmap resolution and offset by the root
    joint depth. Nearest-neighbor resampling (no averaging); sentinel layers
    become a large constant offset so "no surface" stays distinguishable.
    """
    gx, gy = _source_pixels(mld, crop, out_res)
    grid = mld.depths[np.ix_(gy, gx)].astype(np.float64)  # (out, out, L)
    out = np.where(np.isfinite(grid), grid - root_depth, SENTINEL_OFFSET)
    return GeometryFeatureMap(out.astype(np.float32), float(root_depth),
                              "depth_offsets")


def encode_volumetric(mld: MultiLayerDepthMap, crop: "CropTransform",
                      root_depth: float, n_samples: int = 64,
                      half_range: float = 1000.0,
                      out_res: int = 64) -> GeometryFeatureMap:
    """Occupancy-loss samples on a uniform depth grid around the root joint.

    Depths z_s = root + half_range * (2s/(n-1) - 1), s = 0..n-1 (endpoints
    inclusive); each cell stores the single-point penetration loss at z_s for
    that pixel's slabs, giving an out_res x out_res x n_samples volume of the
    local occupancy around the skeleton.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 depth samples")
    gx, gy = _source_pixels(mld, crop, out_res)
    zs = root_depth + half_range * (2.0 * np.arange(n_samples) / (n_samples - 1) - 1.0)
    out = np.zeros((out_res, out_res, n_samples), dtype=np.float64)
    for r, iy in enumerate(gy):
        for c, ix in enumerate(gx):
            col = mld.depths[iy, ix]
            layers = col[np.isfinite(col)].astype(np.float64)
            if not len(layers):
                continue
            for lo, hi in _slab_pairs(layers):
                inside = (zs > lo) & (zs < hi)
                if not inside.any():
                    continue
                if hi == math.inf:
                    pen = zs[inside] - lo
                else:
                    pen = np.minimum(zs[inside] - lo, hi - zs[inside])
                out[r, c, inside] = np.maximum(out[r, c, inside], pen)
    return GeometryFeatureMap(out.astype(np.float32), float(root_depth),
                              "volumetric")
