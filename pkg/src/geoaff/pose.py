"""Skeleton data model, heatmap targets/decoding, losses and metrics.

Poses carry (x, y) in crop-pixel coordinates and z in millimeters of camera
depth; metric poses carry all three coordinates in millimeters. Heatmaps are
H x W x J grids at 64 x 64 by default, crops are isotropic 256 x 256.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ParseError

HEATMAP_RES = 64
CROP_RES = 256
PIXEL_UNITS = "px,px,mm"
METRIC_UNITS = "mm,mm,mm"

# Joint order of the 16-joint evaluation skeleton and the classic 2D
# benchmark skeleton it lines up with. The correspondence is positional
# (slot i maps to slot i); only the naming differs.
GPA16_NAMES = (
    "rightfoot", "rightleg", "rightupleg", "leftupleg", "leftleg", "leftfoot",
    "hips", "spine1", "head", "site",
    "righthand", "rightforearm", "rightarm", "leftarm", "leftforearm",
    "lefthand",
)
MPII16_NAMES = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "pelvis", "thorax", "upper_neck", "head_top",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
)
DEFAULT_ROOT = 6  # hips / pelvis

# taxonomy name -> (joint names, slot-to-slot source indices when converting
# FROM the other member of the pair)
_TAXONOMIES: dict[str, tuple[str, ...]] = {
    "GPA16": GPA16_NAMES,
    "MPII16": MPII16_NAMES,
}
_CORRESPONDENCE: dict[tuple[str, str], tuple[int, ...]] = {
    ("GPA16", "MPII16"): tuple(range(16)),
    ("MPII16", "GPA16"): tuple(range(16)),
}


@dataclass(frozen=True)
class Pose3D:
    """J x 3 joint array plus root index and naming.

    units is "px,px,mm" for image-space poses and "mm,mm,mm" for metric ones.
    """

    joints: np.ndarray
    root_index: int = DEFAULT_ROOT
    joint_names: tuple[str, ...] | None = None
    taxonomy: str = "GPA16"
    units: str = PIXEL_UNITS

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        if not 0 <= self.root_index < len(j):
            raise ParseError(f"root index {self.root_index} out of range "
                             f"for {len(j)} joints")
        if self.taxonomy in _TAXONOMIES and len(j) != len(_TAXONOMIES[self.taxonomy]):
            raise ParseError(f"taxonomy {self.taxonomy} expects "
                             f"{len(_TAXONOMIES[self.taxonomy])} joints, got {len(j)}")
        names = self.joint_names
        if names is None:
            names = _TAXONOMIES.get(self.taxonomy)
            if names is None:
                names = tuple(f"joint_{i}" for i in range(len(j)))
        if len(names) != len(j):
            raise ParseError("joint_names length does not match joint count")
        j = np.ascontiguousarray(j)
        j.flags.writeable = False
        object.__setattr__(self, "joints", j)
        object.__setattr__(self, "joint_names", tuple(names))

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def root(self) -> np.ndarray:
        return self.joints[self.root_index]

    def with_joints(self, joints: np.ndarray) -> "Pose3D":
        return replace(self, joints=joints)


@dataclass(frozen=True)
class CropTransform:
    """Isotropic square crop: source box (x0, y0, size) scaled to target_size."""

    x0: float
    y0: float
    box_size: float
    target_size: int = CROP_RES

    def __post_init__(self):
        if self.box_size <= 0:
            raise ParseError("crop box must have positive size")

    @property
    def scale(self) -> float:
        return self.target_size / self.box_size

    def to_crop(self, x, y):
        return (np.asarray(x) - self.x0) * self.scale, \
               (np.asarray(y) - self.y0) * self.scale

    def to_source(self, x, y):
        return np.asarray(x) / self.scale + self.x0, \
               np.asarray(y) / self.scale + self.y0


def identity_crop(size: int) -> CropTransform:
    return CropTransform(0.0, 0.0, float(size), target_size=size)


@dataclass(frozen=True)
class DepthNormalizer:
    """Affine map of depths [z_min, z_max] mm onto [0, 1]."""

    z_min: float
    z_max: float

    def __post_init__(self):
        if not self.z_max > self.z_min:
            raise ParseError("z_max must exceed z_min")

    @property
    def span(self) -> float:
        return self.z_max - self.z_min

    def normalize(self, z, clamp: bool = False):
        u = (np.asarray(z, dtype=np.float64) - self.z_min) / self.span
        return np.clip(u, 0.0, 1.0) if clamp else u

    def denormalize(self, u):
        return np.asarray(u, dtype=np.float64) * self.span + self.z_min


def normalize_depth(z, norm: DepthNormalizer, clamp: bool = False):
    return norm.normalize(z, clamp=clamp)


def denormalize_depth(u, norm: DepthNormalizer):
    return norm.denormalize(u)


# ---------------------------------------------------------------------------
# Heatmaps

def gaussian_target(pose2d: np.ndarray, sigma: float = 3.0,
                    resolution: int = HEATMAP_RES) -> np.ndarray:
    """Per-joint unnormalized Gaussian score maps, peak value 1.

    pose2d is (J, 2) of (x, y) at heatmap scale. A joint whose nearest cell
    falls outside the grid yields an all-zero channel.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pose2d = np.asarray(pose2d, dtype=np.float64).reshape(-1, 2)
    J = len(pose2d)
    us = np.arange(resolution, dtype=np.float64)
    out = np.zeros((resolution, resolution, J))
    for j, (x, y) in enumerate(pose2d):
        if not (-0.5 <= x < resolution - 0.5 and -0.5 <= y < resolution - 0.5):
            continue
        dx2 = (us - x) ** 2
        dy2 = (us - y) ** 2
        out[:, :, j] = np.exp(-(dy2[:, None] + dx2[None, :]) / (2.0 * sigma ** 2))
    return out


def heatmap_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Sum of squared element differences."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.sum(d * d))


def argmax_decode(heatmap: np.ndarray, crop: CropTransform) -> np.ndarray:
    """Most-probable (x, y) per channel, scaled to crop-pixel coordinates.

    Ties resolve to the first maximum in row-major order; cell centers scale
    by target_size / heatmap_size (4 for the 256/64 default).
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    H, W, J = hm.shape
    factor = crop.target_size / W
    out = np.zeros((J, 2))
    for j in range(J):
        flat = int(np.argmax(hm[:, :, j]))
        row, col = divmod(flat, W)
        out[j] = (col * factor, row * factor)
    return out


# ---------------------------------------------------------------------------
# Losses

def smooth_l1(pred_z, gt_z) -> float:
    """Quadratic-near-zero, linear-in-the-tail depth loss, summed over joints.

    Per joint with d = |pred - gt|: 0.5 d^2 for d <= 1, d - 0.5 otherwise
    (depths in normalized units, where 1 is the branch point).
    """
    p = np.asarray(pred_z, dtype=np.float64).ravel()
    g = np.asarray(gt_z, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"length mismatch {p.shape} vs {g.shape}")
    d = np.abs(p - g)
    per = np.where(d <= 1.0, 0.5 * d * d, d - 0.5)
    return float(per.sum())


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    heatmap: float
    depth: float
    geometry: float


def total_loss(pred_heatmap: np.ndarray, pred_z, gt_pose: Pose3D,
               mld=None, normalizer: DepthNormalizer | None = None,
               weights=(1.0, 1.0, 1.0), sigma: float = 3.0,
               crop_size: int = CROP_RES) -> LossBreakdown:
    """Training loss: heatmap term + depth term + geometry term.

    The ground-truth pose is in crop coordinates; its 2D part is rescaled to
    the heatmap grid for the target. Depths run through ``normalizer`` when
    given (the geometry term, natively mm, is divided by the normalizer span
    so all terms share units). The geometry term is dropped when ``mld`` is
    None. Weights default to a plain unweighted sum.
    """
    hm = np.asarray(pred_heatmap, dtype=np.float64)
    res = hm.shape[0]
    factor = res / crop_size
    target = gaussian_target(gt_pose.joints[:, :2] * factor, sigma=sigma,
                             resolution=res)
    l_hm = heatmap_loss(hm, target)

    pred_z = np.asarray(pred_z, dtype=np.float64).ravel()
    gt_z = gt_pose.joints[:, 2]
    if normalizer is not None:
        l_depth = smooth_l1(normalizer.normalize(pred_z),
                            normalizer.normalize(gt_z))
    else:
        l_depth = smooth_l1(pred_z, gt_z)

    l_geom = 0.0
    if mld is not None:
        # the depth map is expected on the crop's pixel grid; predicted 2D
        # locations come from the heatmap argmax
        from .affordance import geometry_loss
        xy = argmax_decode(hm, identity_crop(crop_size))
        lookup_pose = gt_pose.with_joints(np.column_stack([xy, pred_z]))
        l_geom = geometry_loss(lookup_pose, mld)
        if normalizer is not None:
            l_geom = l_geom / normalizer.span

    w0, w1, w2 = weights
    return LossBreakdown(total=w0 * l_hm + w1 * l_depth + w2 * l_geom,
                         heatmap=w0 * l_hm, depth=w1 * l_depth,
                         geometry=w2 * l_geom)


# ---------------------------------------------------------------------------
# Metrics (root-relative)
#
# Both metrics align the root joints first, so the root's own error is
# identically zero; it is excluded from the averages (per-joint result tables
# list every joint except the root for the same reason).

def _check_comparable(pred: Pose3D, gt: Pose3D) -> None:
    if pred.taxonomy != gt.taxonomy or pred.n_joints != gt.n_joints:
        raise ValueError(f"taxonomy mismatch: {pred.taxonomy}/{pred.n_joints} "
                         f"vs {gt.taxonomy}/{gt.n_joints}")
    if pred.units != METRIC_UNITS or gt.units != METRIC_UNITS:
        raise ValueError("metrics need metric (mm,mm,mm) poses")


def _root_relative_errors(pred: Pose3D, gt: Pose3D) -> np.ndarray:
    _check_comparable(pred, gt)
    dp = pred.joints - pred.root
    dg = gt.joints - gt.root
    err = np.linalg.norm(dp - dg, axis=1)
    return np.delete(err, pred.root_index)


def mpjpe(pred: Pose3D, gt: Pose3D) -> float:
    """Mean per-joint position error (mm) after root alignment."""
    return float(_root_relative_errors(pred, gt).mean())


def pck3d(pred: Pose3D, gt: Pose3D, threshold: float = 150.0) -> float:
    """Fraction of joints with root-relative error strictly below threshold."""
    err = _root_relative_errors(pred, gt)
    return float(np.mean(err < threshold))


def metrics_report(pairs, threshold: float = 150.0) -> dict:
    """Aggregate MPJPE / PCK3D over (pred, gt) pose pairs with a per-joint
    breakdown keyed by joint name."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pose pairs to evaluate")
    all_err = []
    for pred, gt in pairs:
        all_err.append(_root_relative_errors(pred, gt))
    err = np.stack(all_err)  # (n_pairs, J-1)
    ref = pairs[0][1]
    names = [n for i, n in enumerate(ref.joint_names) if i != ref.root_index]
    per_joint = {
        name: {
            "mpjpe_mm": float(err[:, k].mean()),
            "pck3d": float(np.mean(err[:, k] < threshold)),
        }
        for k, name in enumerate(names)
    }
    return {
        "mpjpe_mm": float(err.mean()),
        "pck3d": float(np.mean(err < threshold)),
        "threshold_mm": threshold,
        "n_poses": len(pairs),
        "per_joint": per_joint,
    }


def convert_taxonomy(pose: Pose3D, source: str, target: str) -> Pose3D:
    """Reorder/rename joints between supported taxonomies (bijective)."""
    if pose.taxonomy != source:
        raise ValueError(f"pose taxonomy is {pose.taxonomy}, not {source}")
    key = (source, target)
    if key not in _CORRESPONDENCE:
        raise ValueError(f"unsupported taxonomy conversion {source} -> {target}")
    order = _CORRESPONDENCE[key]
    joints = pose.joints[list(order)]
    root = order.index(pose.root_index)
    return Pose3D(joints=joints, root_index=root,
                  joint_names=_TAXONOMIES[target], taxonomy=target,
                  units=pose.units)


# ---------------------------------------------------------------------------
# Metric back-projection and JSON I/O

def backproject_to_metric(pose: Pose3D, camera) -> Pose3D:
    """Lift an image-space pose (x px, y px, z mm) to camera-frame metric mm.

    X = (x - cx) z / fx, Y = (y - cy) z / fy, Z = z. The pixel coordinates
    must live on the camera's own pixel grid (no crop indirection).
    """
    if pose.units != PIXEL_UNITS:
        raise ValueError("pose is not in pixel units")
    x, y, z = pose.joints.T
    X = (x - camera.cx) * z / camera.fx
    Y = (y - camera.cy) * z / camera.fy
    return replace(pose, joints=np.column_stack([X, Y, z]), units=METRIC_UNITS)


def pose_to_json_dict(pose: Pose3D) -> dict:
    metric = pose.units == METRIC_UNITS
    joints = []
    for name, (x, y, z) in zip(pose.joint_names, pose.joints):
        if metric:
            joints.append({"name": name, "x_mm": x, "y_mm": y, "z_mm": z})
        else:
            joints.append({"name": name, "x": x, "y": y, "z": z})
    return {"taxonomy": pose.taxonomy, "root": pose.root_index,
            "units": pose.units, "joints": joints}


def pose_from_json_dict(d: dict) -> Pose3D:
    try:
        units = d.get("units", PIXEL_UNITS)
        metric = units == METRIC_UNITS
        keys = ("x_mm", "y_mm", "z_mm") if metric else ("x", "y", "z")
        joints = np.array([[float(j[k]) for k in keys] for j in d["joints"]])
        names = tuple(str(j["name"]) for j in d["joints"])
        return Pose3D(joints=joints, root_index=int(d["root"]),
                      joint_names=names, taxonomy=str(d["taxonomy"]),
                      units=units)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad pose JSON: {exc}") from exc


def save_pose(pose: Pose3D, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(pose_to_json_dict(pose), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_pose(path: str | os.PathLike) -> Pose3D:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    return pose_from_json_dict(d)
