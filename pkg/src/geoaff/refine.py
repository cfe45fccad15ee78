"""Geometry-aware pose refinement.

Given an initial pose and a multi-layer depth map, descend a composite
objective over the joint depths only (the 2D detections stay fixed, and the
geometry term's (x, y) gradient is zero under nearest-neighbor lookup):

    lambda_data * sum_j smooth_l1(z_j, z_init_j)        anchor to the estimate
  + lambda_geom * geometry_loss(pose)                   stay out of the scene
  + lambda_bone * sum_edges (||bone|| - target)^2       keep limb lengths

Descent uses backtracking line search (halve the step until the objective
strictly decreases), with one safeguard: a penetrating joint is clamped at
the slab face it is being pushed toward, so a too-large step can never carry
it through a surface into the next occupied region. With the data and bone
terms off this makes every joint's penetration non-increasing, not just the
total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affordance import (free_intervals, geometry_loss, geometry_loss_gradient,
                         nearest_valid_depth)
from .mldepth import MultiLayerDepthMap
from .pose import Pose3D, smooth_l1

_MAX_BACKTRACKS = 40


@dataclass(frozen=True)
class RefineConfig:
    lambda_data: float = 1.0
    lambda_geom: float = 1.0
    lambda_bone: float = 0.1
    step: float = 100.0      # initial step size, mm
    max_iters: int = 100
    tol: float = 1e-6        # stop when an accepted step decreases less

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")
        if min(self.lambda_data, self.lambda_geom, self.lambda_bone) < 0:
            raise ValueError("weights must be non-negative")


@dataclass(frozen=True)
class RefineReport:
    pose: Pose3D
    objectives: tuple[float, ...]   # initial value plus one per accepted step
    iterations: int
    depth_corrections: np.ndarray   # final z minus initial z, per joint (mm)
    gcl_before: float
    gcl_after: float


def _bone_lengths(joints: np.ndarray, edges) -> np.ndarray:
    a = joints[[e[0] for e in edges]]
    b = joints[[e[1] for e in edges]]
    return np.linalg.norm(a - b, axis=1)


def _objective(z: np.ndarray, pose: Pose3D, z_init: np.ndarray,
               mld: MultiLayerDepthMap, edges, targets, cfg: RefineConfig) -> float:
    p = pose.with_joints(np.column_stack([pose.joints[:, :2], z]))
    val = 0.0
    if cfg.lambda_data:
        val += cfg.lambda_data * smooth_l1(z, z_init)
    if cfg.lambda_geom:
        val += cfg.lambda_geom * geometry_loss(p, mld)
    if cfg.lambda_bone and edges:
        lengths = _bone_lengths(p.joints, edges)
        val += cfg.lambda_bone * float(np.sum((lengths - targets) ** 2))
    if not np.isfinite(val):
        raise ValueError("non-finite refinement objective (corrupt input?)")
    return val


def _gradient(z: np.ndarray, pose: Pose3D, z_init: np.ndarray,
              mld: MultiLayerDepthMap, edges, targets, cfg: RefineConfig
              ) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dObjective/dz, geometry subgradient alone)."""
    p = pose.with_joints(np.column_stack([pose.joints[:, :2], z]))
    g_geom = geometry_loss_gradient(p, mld)
    g = cfg.lambda_geom * g_geom
    if cfg.lambda_data:
        d = z - z_init
        g = g + cfg.lambda_data * np.clip(d, -1.0, 1.0)
    if cfg.lambda_bone and edges:
        lengths = _bone_lengths(p.joints, edges)
        for (ia, ib), length, target in zip(edges, lengths, targets):
            if length == 0:
                continue
            coeff = 2.0 * cfg.lambda_bone * (length - target) / length
            dz = z[ia] - z[ib]
            g[ia] += coeff * dz
            g[ib] -= coeff * dz
    return g, g_geom


def _face_limits(z: np.ndarray, g_geom: np.ndarray, pose: Pose3D,
                 mld: MultiLayerDepthMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint clamp bounds: a penetrating joint may move up to (and onto)
    the face its geometry gradient points at, but not through it."""
    lo = np.full(len(z), -np.inf)
    hi = np.full(len(z), np.inf)
    for j, gj in enumerate(g_geom):
        if gj == 0.0:
            continue
        x, y = pose.joints[j, :2]
        for slab_lo, slab_hi in free_intervals(mld, x, y).slabs():
            if slab_lo < z[j] < slab_hi:
                if gj > 0:
                    lo[j] = slab_lo   # pushed toward the camera, stop at entry
                else:
                    hi[j] = slab_hi   # pushed away, stop at exit
                break
    return lo, hi


def refine_pose(init: Pose3D, mld: MultiLayerDepthMap, edges=(),
                target_lengths=(), cfg: RefineConfig | None = None
                ) -> RefineReport:
    """Depth-only descent of the composite objective from ``init``.

    edges are (joint_a, joint_b) index pairs with matching target_lengths for
    the bone prior. The accepted objective sequence is non-increasing;
    descent stops at max_iters, at a vanishing gradient, or when no step
    length still decreases the objective.
    """
    cfg = cfg or RefineConfig()
    edges = [(int(a), int(b)) for a, b in edges]
    for a, b in edges:
        if not (0 <= a < init.n_joints and 0 <= b < init.n_joints) or a == b:
            raise ValueError(f"invalid bone edge ({a}, {b})")
    targets = np.asarray(target_lengths, dtype=np.float64)
    if len(targets) != len(edges):
        raise ValueError("target_lengths must match edges")
    if not np.isfinite(init.joints).all():
        raise ValueError("non-finite joint coordinates (corrupt input?)")

    z_init = init.joints[:, 2].copy()
    z = z_init.copy()
    gcl_before = geometry_loss(init, mld)
    objective = lambda zz: _objective(zz, init, z_init, mld, edges, targets, cfg)

    f = objective(z)
    history = [f]
    iterations = 0
    for _ in range(cfg.max_iters):
        g, g_geom = _gradient(z, init, z_init, mld, edges, targets, cfg)
        if not np.any(g):
            break
        clamp_lo, clamp_hi = _face_limits(z, cfg.lambda_geom * g_geom, init, mld)
        step = cfg.step
        accepted = False
        for _ in range(_MAX_BACKTRACKS):
            z_try = np.clip(z - step * g, clamp_lo, clamp_hi)
            f_try = objective(z_try)
            if f_try < f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        decrease = f - f_try
        z, f = z_try, f_try
        history.append(f)
        iterations += 1
        if decrease < cfg.tol:
            break

    final = init.with_joints(np.column_stack([init.joints[:, :2], z]))
    return RefineReport(
        pose=final,
        objectives=tuple(history),
        iterations=iterations,
        depth_corrections=z - z_init,
        gcl_before=gcl_before,
        gcl_after=geometry_loss(final, mld),
    )


def project_to_free_space(pose: Pose3D, mld: MultiLayerDepthMap) -> Pose3D:
    """Replace every joint depth by its nearest valid depth.

    The result has zero geometry loss and no joint moves farther than its own
    penetration distance (the projection lands on the containing slab's
    nearest face).
    """
    z = pose.joints[:, 2].copy()
    for j, (x, y, zj) in enumerate(pose.joints):
        z[j] = nearest_valid_depth(float(zj), free_intervals(mld, x, y))
    return pose.with_joints(np.column_stack([pose.joints[:, :2], z]))


def report_to_json_dict(report: RefineReport) -> dict:
    from .pose import pose_to_json_dict
    return {
        "pose": pose_to_json_dict(report.pose),
        "objectives": list(report.objectives),
        "iterations": report.iterations,
        "depth_corrections_mm": [float(v) for v in report.depth_corrections],
        "gcl_before_mm": report.gcl_before,
        "gcl_after_mm": report.gcl_after,
    }
