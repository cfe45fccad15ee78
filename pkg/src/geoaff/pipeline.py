"""Capture-pipeline algorithms: robust timestamp alignment, adaptive frame
sampling, occlusion / close-to-geometry test-subset predicates, and exact
point-to-mesh distance.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ParseError
from .mldepth import MultiLayerDepthMap
from .scene import TriangleMesh

DEFAULT_RANSAC_THRESHOLD = 1.0 / 60.0  # time units; configuration, not a given
DEFAULT_RANSAC_ITERS = 1000
OCCLUSION_EPS_MM = 10.0
OCCLUSION_MIN_JOINTS = 10
CLOSE_DISTANCE_MM = 175.0
CLOSE_MIN_JOINTS = 8


@dataclass(frozen=True)
class TimeModel:
    """global_t = scale * local_t + offset, estimated robustly."""

    scale: float
    offset: float
    inlier_count: int
    inlier_threshold: float

    def __post_init__(self):
        if not self.scale > 0:
            raise DegenerateInputError(f"time scale must be positive, "
                                       f"got {self.scale}")

    def apply(self, local_t):
        return np.asarray(local_t, dtype=np.float64) * self.scale + self.offset


@dataclass(frozen=True)
class SkeletonSequence:
    """Ordered mocap frames, (T, J, 3) mm, with strictly increasing timestamps."""

    frames: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        t = np.asarray(self.timestamps, dtype=np.float64).ravel()
        if f.ndim != 3 or f.shape[2] != 3:
            raise ParseError("frames must be (T, J, 3)")
        if len(f) != len(t):
            raise ParseError("timestamps do not match frame count")
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise ParseError("timestamps must be strictly increasing")
        f = np.ascontiguousarray(f)
        t = np.ascontiguousarray(t)
        f.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "frames", f)
        object.__setattr__(self, "timestamps", t)

    def __len__(self) -> int:
        return len(self.frames)


def load_sequence(path: str | os.PathLike) -> SkeletonSequence:
    """Read a JSON-lines sequence, one {"t": ..., "joints": [[x,y,z], ...]}
    object per line."""
    frames, ts = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                ts.append(float(d["t"]))
                frames.append([[float(c) for c in joint] for joint in d["joints"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: bad frame record: {exc}") from exc
    if not frames:
        raise ParseError(f"{path}: empty sequence")
    j0 = len(frames[0])
    if any(len(f) != j0 for f in frames):
        raise ParseError(f"{path}: frames disagree on joint count")
    return SkeletonSequence(np.asarray(frames), np.asarray(ts))


def save_sequence(seq: SkeletonSequence, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t, frame in zip(seq.timestamps, seq.frames):
            fh.write(json.dumps({"t": float(t),
                                 "joints": [[float(c) for c in j] for j in frame]}))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Timestamp alignment

def ransac_time_align(pairs, threshold: float = DEFAULT_RANSAC_THRESHOLD,
                      iters: int = DEFAULT_RANSAC_ITERS,
                      seed: int = 0) -> TimeModel:
    """Fit global = a * local + b from (local_t, global_t) pairs with RANSAC.

    Two-point minimal samples; consensus is |residual| <= threshold; the
    final (a, b) is a least-squares refit over the largest consensus set.
    Deterministic for a given seed.
    """
    pts = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        raise DegenerateInputError(f"need at least 2 timestamp pairs, got {n}")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    local, glob = pts[:, 0], pts[:, 1]
    if np.ptp(local) == 0:
        raise DegenerateInputError("all local timestamps are identical")

    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    for _ in range(iters):
        i, j = rng.choice(n, size=2, replace=False)
        dl = local[j] - local[i]
        if dl == 0:
            continue
        a = (glob[j] - glob[i]) / dl
        if a <= 0:
            continue
        b = glob[i] - a * local[i]
        mask = np.abs(glob - (a * local + b)) <= threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < 2:
        raise DegenerateInputError("no RANSAC consensus of size >= 2 found")

    A = np.column_stack([local[best_mask], np.ones(best_count)])
    (a, b), *_ = np.linalg.lstsq(A, glob[best_mask], rcond=None)
    return TimeModel(scale=float(a), offset=float(b),
                     inlier_count=best_count, inlier_threshold=threshold)


def time_model_inliers(model: TimeModel, pairs) -> np.ndarray:
    pts = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    resid = np.abs(pts[:, 1] - model.apply(pts[:, 0]))
    return resid <= model.inlier_threshold


# ---------------------------------------------------------------------------
# Frame differences and adaptive sampling

def nearest_rank_percentile(values, p: float) -> float:
    """ceil(p/100 * n)-th order statistic (1-based), no interpolation."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if not len(v):
        raise ValueError("empty value list")
    if not 0 < p <= 100:
        raise ValueError("percentile must be in (0, 100]")
    k = max(1, math.ceil(p / 100.0 * len(v)))
    return float(v[k - 1])


def frame_difference(a: np.ndarray, b: np.ndarray, percentile: float = 75.0) -> float:
    """Robust skeleton change measure: the 75th-percentile (nearest rank) of
    the per-joint Euclidean distances, insensitive to single jerky joints."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"joint count mismatch: {a.shape} vs {b.shape}")
    d = np.linalg.norm(a - b, axis=1)
    return nearest_rank_percentile(d, percentile)


def adaptive_sample(seq: SkeletonSequence, threshold_percentile: float = 55.0,
                    threshold: float | None = None) -> tuple[list[int], float]:
    """Keep frames that moved: streaming selection against the last kept frame.

    The change threshold defaults to the nearest-rank percentile of all
    adjacent-frame differences; a frame is kept iff its difference from the
    previously kept frame strictly exceeds it. Frame 0 is always kept.
    Returns (kept_indices, threshold_used). Passing an explicit threshold
    (e.g. one computed on a superset) makes the selection idempotent.
    """
    n = len(seq)
    if n == 0:
        raise ValueError("empty sequence")
    if threshold is None:
        if n < 2:
            raise ValueError("need at least 2 frames to derive a threshold")
        diffs = [frame_difference(seq.frames[i - 1], seq.frames[i])
                 for i in range(1, n)]
        threshold = nearest_rank_percentile(diffs, threshold_percentile)
    kept = [0]
    last = seq.frames[0]
    for i in range(1, n):
        if frame_difference(last, seq.frames[i]) > threshold:
            kept.append(i)
            last = seq.frames[i]
    return kept, float(threshold)


# ---------------------------------------------------------------------------
# Test-subset predicates

def occlusion_flags(pose, mld: MultiLayerDepthMap,
                    eps: float = OCCLUSION_EPS_MM,
                    min_occluded: int = OCCLUSION_MIN_JOINTS
                    ) -> tuple[np.ndarray, bool]:
    """Per-joint occlusion (z behind the first visible surface by more than
    eps) and the subset verdict (at least ``min_occluded`` joints occluded)."""
    flags = np.zeros(len(pose.joints), dtype=bool)
    for j, (x, y, z) in enumerate(pose.joints):
        try:
            layers = mld.layers_at(x, y)
        except ValueError as exc:
            raise ValueError(f"joint {j}: {exc}") from exc
        if len(layers):
            flags[j] = float(z) > float(layers[0]) + eps
    return flags, bool(flags.sum() >= min_occluded)


def _closest_sq_dist_to_triangles(p: np.ndarray, a, b, c) -> np.ndarray:
    """Squared distance from one point to each triangle (a, b, c arrays of
    shape (M, 3)), via the standard closest-point region classification."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("mk,mk->m", ab, ap)
    d2 = np.einsum("mk,mk->m", ac, ap)
    bp = p - b
    d3 = np.einsum("mk,mk->m", ab, bp)
    d4 = np.einsum("mk,mk->m", ac, bp)
    cp = p - c
    d5 = np.einsum("mk,mk->m", ab, cp)
    d6 = np.einsum("mk,mk->m", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    closest = np.empty_like(a)
    done = np.zeros(len(a), dtype=bool)

    m = (d1 <= 0) & (d2 <= 0)                       # vertex a
    closest[m] = a[m]
    done |= m
    m = ~done & (d3 >= 0) & (d4 <= d3)              # vertex b
    closest[m] = b[m]
    done |= m
    m = ~done & (vc <= 0) & (d1 >= 0) & (d3 <= 0)   # edge ab
    if m.any():
        v = (d1[m] / (d1[m] - d3[m]))[:, None]
        closest[m] = a[m] + v * ab[m]
    done |= m
    m = ~done & (d6 >= 0) & (d5 <= d6)              # vertex c
    closest[m] = c[m]
    done |= m
    m = ~done & (vb <= 0) & (d2 >= 0) & (d6 <= 0)   # edge ac
    if m.any():
        w = (d2[m] / (d2[m] - d6[m]))[:, None]
        closest[m] = a[m] + w * ac[m]
    done |= m
    m = ~done & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)  # edge bc
    if m.any():
        w = ((d4[m] - d3[m]) / ((d4[m] - d3[m]) + (d5[m] - d6[m])))[:, None]
        closest[m] = b[m] + w * (c[m] - b[m])
    done |= m
    m = ~done                                        # face interior
    if m.any():
        denom = va[m] + vb[m] + vc[m]
        v = (vb[m] / denom)[:, None]
        w = (vc[m] / denom)[:, None]
        closest[m] = a[m] + v * ab[m] + w * ac[m]

    diff = closest - p
    return np.einsum("mk,mk->m", diff, diff)


def point_mesh_distance(point, mesh: TriangleMesh) -> float:
    """Exact minimum Euclidean distance (mm) from a point to the mesh surface
    (face, edge and vertex cases all handled)."""
    if not mesh.n_triangles:
        raise DegenerateInputError("mesh has no triangles")
    p = np.asarray(point, dtype=np.float64).reshape(3)
    tri = mesh.triangles
    a = mesh.vertices[tri[:, 0]]
    b = mesh.vertices[tri[:, 1]]
    c = mesh.vertices[tri[:, 2]]
    sq = _closest_sq_dist_to_triangles(p, a, b, c)
    return float(math.sqrt(max(0.0, float(sq.min()))))


def close_to_geometry(points_mm, mesh: TriangleMesh,
                      max_distance: float = CLOSE_DISTANCE_MM,
                      min_joints: int = CLOSE_MIN_JOINTS
                      ) -> tuple[np.ndarray, bool]:
    """Per-joint near-surface flags (true point-to-mesh distance below
    ``max_distance``) and the subset verdict."""
    pts = np.asarray(points_mm, dtype=np.float64).reshape(-1, 3)
    dists = np.array([point_mesh_distance(p, mesh) for p in pts])
    flags = dists < max_distance
    return flags, bool(flags.sum() >= min_joints)


def subset_report(frame_id, pose, mld: MultiLayerDepthMap,
                  world_joints_mm=None, mesh: TriangleMesh | None = None,
                  eps: float = OCCLUSION_EPS_MM,
                  min_occluded: int = OCCLUSION_MIN_JOINTS,
                  close_distance: float = CLOSE_DISTANCE_MM,
                  min_close: int = CLOSE_MIN_JOINTS) -> dict:
    """Classify one frame into evaluation subsets.

    Occlusion uses the pose against the depth map; the close-to-geometry
    predicate needs world-space joints and the scene mesh and is skipped when
    either is absent.
    """
    flags, occluded = occlusion_flags(pose, mld, eps=eps,
                                      min_occluded=min_occluded)
    report = {
        "frame_id": frame_id,
        "occluded_count": int(flags.sum()),
        "subsets": [],
    }
    if occluded:
        report["subsets"].append("occlusion")
    if world_joints_mm is not None and mesh is not None:
        pts = np.asarray(world_joints_mm, dtype=np.float64).reshape(-1, 3)
        dists = np.array([point_mesh_distance(p, mesh) for p in pts])
        report["min_surface_dist_mm"] = float(dists.min())
        if int((dists < close_distance).sum()) >= min_close:
            report["subsets"].append("close2geometry")
    return report
