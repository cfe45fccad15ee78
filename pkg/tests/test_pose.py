import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geoaff.errors import ParseError
from geoaff.pose import (GPA16_NAMES, MPII16_NAMES, CropTransform,
                         DepthNormalizer, Pose3D, argmax_decode,
                         backproject_to_metric, convert_taxonomy,
                         gaussian_target, heatmap_loss, identity_crop,
                         load_pose, metrics_report, mpjpe, pck3d,
                         pose_from_json_dict, save_pose, smooth_l1,
                         total_loss)
from geoaff.scene import Camera

from conftest import make_layer_mld
from oracles import mpjpe_loops, pck3d_loops


def metric_pose(joints, root=6):
    return Pose3D(np.asarray(joints, dtype=float), root_index=root,
                  units="mm,mm,mm")


def random_metric_pair(rng, spread=400.0):
    gt = rng.uniform(-1000, 1000, (16, 3))
    pred = gt + rng.normal(0, spread, (16, 3))
    return metric_pose(pred), metric_pose(gt)


# ---------------------------------------------------------------------------
# Gaussian targets

def test_gaussian_peak_is_one():
    hm = gaussian_target(np.array([[10.0, 20.0]]))
    assert hm[20, 10, 0] == 1.0
    assert hm.shape == (64, 64, 1)


def test_gaussian_value_at_radius_sigma():
    hm = gaussian_target(np.array([[10.0, 20.0]]), sigma=3.0)
    assert hm[20, 13, 0] == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert hm[23, 10, 0] == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_gaussian_off_map_zero_channel():
    hm = gaussian_target(np.array([[-10.0, -10.0], [5.0, 5.0]]))
    assert np.all(hm[:, :, 0] == 0.0)
    assert hm[:, :, 1].max() == 1.0


def test_gaussian_requires_positive_sigma():
    with pytest.raises(ValueError):
        gaussian_target(np.zeros((1, 2)), sigma=0.0)


def test_gaussian_peak_matches_argmax():
    rng = np.random.default_rng(41)
    pts = rng.uniform(2, 61, (8, 2))
    hm = gaussian_target(pts)
    decoded = argmax_decode(hm, identity_crop(256))
    assert np.allclose(decoded / 4.0, np.round(pts)), (pts, decoded)


# ---------------------------------------------------------------------------
# Heatmap loss and decoding

def test_heatmap_loss_identity():
    hm = gaussian_target(np.array([[4.0, 4.0]]))
    assert heatmap_loss(hm, hm) == 0.0


def test_heatmap_loss_single_element():
    a = np.zeros((4, 4, 1))
    b = np.zeros((4, 4, 1))
    b[1, 2, 0] = 2.0
    assert heatmap_loss(a, b) == 4.0


def test_heatmap_loss_matches_elementwise_oracle():
    rng = np.random.default_rng(42)
    a = rng.random((16, 16, 4))
    b = rng.random((16, 16, 4))
    ref = sum((float(a[i, j, k]) - float(b[i, j, k])) ** 2
              for i in range(16) for j in range(16) for k in range(4))
    assert heatmap_loss(a, b) == pytest.approx(ref, rel=1e-9)


def test_heatmap_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        heatmap_loss(np.zeros((4, 4, 1)), np.zeros((4, 5, 1)))


def test_argmax_decode_scaling():
    hm = np.zeros((64, 64, 1))
    hm[20, 10, 0] = 1.0  # row 20 = y, col 10 = x
    out = argmax_decode(hm, identity_crop(256))
    assert out[0].tolist() == [40.0, 80.0]


def test_argmax_uniform_tie():
    hm = np.ones((64, 64, 1))
    assert argmax_decode(hm, identity_crop(256))[0].tolist() == [0.0, 0.0]


def test_argmax_two_equal_peaks_row_major():
    hm = np.zeros((64, 64, 1))
    hm[5, 5, 0] = 2.0
    hm[9, 9, 0] = 2.0
    assert argmax_decode(hm, identity_crop(256))[0].tolist() == [20.0, 20.0]


# ---------------------------------------------------------------------------
# smooth_l1

def test_smooth_l1_values():
    assert smooth_l1([0.0], [0.0]) == 0.0
    assert smooth_l1([1.0], [0.0]) == 0.5
    assert smooth_l1([3.0], [0.0]) == 2.5


def test_smooth_l1_sums_over_joints():
    assert smooth_l1([1.0, 3.0], [0.0, 0.0]) == 3.0


def test_smooth_l1_length_mismatch():
    with pytest.raises(ValueError):
        smooth_l1([1.0], [1.0, 2.0])


@given(st.floats(min_value=0.0, max_value=100.0))
def test_smooth_l1_nonnegative(d):
    assert smooth_l1([d], [0.0]) >= 0.0


@given(st.floats(min_value=-1e-6, max_value=1e-6))
def test_smooth_l1_continuous_at_branch(eps):
    lo = smooth_l1([1.0 + eps], [0.0])
    assert abs(lo - 0.5) < 2e-6


# ---------------------------------------------------------------------------
# total_loss

def heatmap_aligned_pose(zs):
    # crop coordinates on multiples of 4 so the heatmap argmax is exact
    rng = np.random.default_rng(7)
    xy = rng.integers(2, 62, (16, 2)) * 4.0
    return Pose3D(np.column_stack([xy, zs]))


def test_total_loss_perfect_prediction_in_free_space():
    gt = heatmap_aligned_pose(np.full(16, 500.0))
    mld = make_layer_mld([1000.0, 1400.0], size=256)
    hm = gaussian_target(gt.joints[:, :2] / 4.0)
    out = total_loss(hm, gt.joints[:, 2], gt, mld=mld,
                     normalizer=DepthNormalizer(0.0, 5000.0))
    assert out.total == 0.0
    assert (out.heatmap, out.depth, out.geometry) == (0.0, 0.0, 0.0)


def test_total_loss_geometry_term_isolated_and_converted():
    gt = heatmap_aligned_pose(np.full(16, 500.0))
    z_pred = gt.joints[:, 2].copy()
    z_pred[0] = 1100.0  # 100 mm inside the slab
    pred_pose_z = z_pred
    mld = make_layer_mld([1000.0, 1400.0], size=256)
    hm = gaussian_target(gt.joints[:, :2] / 4.0)
    norm = DepthNormalizer(0.0, 5000.0)
    gt_match = gt.with_joints(np.column_stack([gt.joints[:, :2], z_pred]))
    out = total_loss(hm, pred_pose_z, gt_match, mld=mld, normalizer=norm)
    assert out.heatmap == 0.0
    assert out.depth == 0.0
    assert out.geometry == pytest.approx(100.0 / 5000.0)
    assert out.total == pytest.approx(out.geometry)


def test_total_loss_weight_masking():
    gt = heatmap_aligned_pose(np.full(16, 1100.0))  # penetrating
    mld = make_layer_mld([1000.0, 1400.0], size=256)
    hm = gaussian_target(gt.joints[:, :2] / 4.0) * 0.9
    pred_z = gt.joints[:, 2] + 0.2
    norm = DepthNormalizer(0.0, 1000.0)
    masked = total_loss(hm, pred_z, gt, mld=mld, normalizer=norm,
                        weights=(1.0, 1.0, 0.0))
    assert masked.geometry == 0.0
    assert masked.total == pytest.approx(masked.heatmap + masked.depth)
    assert masked.total > 0.0


def test_total_loss_term_omitted_without_map():
    gt = heatmap_aligned_pose(np.full(16, 1100.0))
    hm = gaussian_target(gt.joints[:, :2] / 4.0)
    out = total_loss(hm, gt.joints[:, 2], gt)
    assert out.geometry == 0.0


# ---------------------------------------------------------------------------
# Metrics

def test_mpjpe_identity():
    rng = np.random.default_rng(43)
    gt = metric_pose(rng.uniform(-500, 500, (16, 3)))
    assert mpjpe(gt, gt) == 0.0


def test_mpjpe_345_triangle():
    rng = np.random.default_rng(44)
    gt_joints = rng.uniform(-500, 500, (16, 3))
    pred_joints = gt_joints.copy()
    for j in range(16):
        if j != 6:
            pred_joints[j] += (3.0, 4.0, 0.0)
    assert mpjpe(metric_pose(pred_joints), metric_pose(gt_joints)) == \
        pytest.approx(5.0, abs=1e-12)


def test_mpjpe_translation_invariance():
    rng = np.random.default_rng(45)
    pred, gt = random_metric_pair(rng)
    shifted = pred.with_joints(pred.joints + np.array([500.0, 0.0, 0.0]))
    assert mpjpe(shifted, gt) == pytest.approx(mpjpe(pred, gt), abs=1e-9)
    both = (pred.with_joints(pred.joints + 123.0),
            gt.with_joints(gt.joints + 123.0))
    assert mpjpe(*both) == pytest.approx(mpjpe(pred, gt), abs=1e-9)


def test_mpjpe_taxonomy_mismatch():
    a = metric_pose(np.zeros((16, 3)))
    b = Pose3D(np.zeros((16, 3)), taxonomy="MPII16", units="mm,mm,mm")
    with pytest.raises(ValueError, match="taxonomy"):
        mpjpe(a, b)


def test_mpjpe_requires_metric_units():
    a = Pose3D(np.zeros((16, 3)))  # pixel units
    with pytest.raises(ValueError, match="metric"):
        mpjpe(a, a)


def test_pck3d_identity_and_boundary():
    rng = np.random.default_rng(46)
    gt_joints = rng.uniform(-500, 500, (16, 3))
    gt = metric_pose(gt_joints)
    assert pck3d(gt, gt) == 1.0
    # every evaluated joint exactly at the threshold: strict less-than
    pred_joints = gt_joints.copy()
    for j in range(16):
        if j != 6:
            pred_joints[j, 0] += 150.0
    assert pck3d(metric_pose(pred_joints), gt, threshold=150.0) == 0.0


def test_metrics_match_loop_oracle():
    rng = np.random.default_rng(47)
    for _ in range(20):
        pred, gt = random_metric_pair(rng, spread=200.0)
        assert mpjpe(pred, gt) == pytest.approx(
            mpjpe_loops(pred.joints, gt.joints, 6), rel=1e-12)
        assert pck3d(pred, gt) == pytest.approx(
            pck3d_loops(pred.joints, gt.joints, 6, 150.0), rel=1e-12)


def test_metrics_report_structure():
    rng = np.random.default_rng(48)
    pairs = [random_metric_pair(rng) for _ in range(5)]
    rep = metrics_report(pairs)
    assert set(rep) == {"mpjpe_mm", "pck3d", "threshold_mm", "n_poses",
                        "per_joint"}
    assert rep["n_poses"] == 5
    # per-joint table lists every joint except the root
    assert len(rep["per_joint"]) == 15
    assert "hips" not in rep["per_joint"]
    assert "rightfoot" in rep["per_joint"]
    mean_of_joints = np.mean([v["mpjpe_mm"] for v in rep["per_joint"].values()])
    assert rep["mpjpe_mm"] == pytest.approx(mean_of_joints, rel=1e-9)


# ---------------------------------------------------------------------------
# Taxonomy

def test_taxonomy_slot_names():
    assert GPA16_NAMES[0] == "rightfoot" and MPII16_NAMES[0] == "r_ankle"
    assert GPA16_NAMES[9] == "site" and MPII16_NAMES[9] == "head_top"
    assert GPA16_NAMES[6] == "hips" and MPII16_NAMES[6] == "pelvis"


def test_convert_taxonomy_positional():
    rng = np.random.default_rng(49)
    pose = Pose3D(rng.uniform(0, 100, (16, 3)))
    out = convert_taxonomy(pose, "GPA16", "MPII16")
    assert out.taxonomy == "MPII16"
    assert out.joint_names[0] == "r_ankle"
    assert out.joint_names[9] == "head_top"
    assert np.array_equal(out.joints[0], pose.joints[0])


def test_convert_taxonomy_round_trip():
    rng = np.random.default_rng(50)
    pose = Pose3D(rng.uniform(0, 100, (16, 3)))
    back = convert_taxonomy(convert_taxonomy(pose, "GPA16", "MPII16"),
                            "MPII16", "GPA16")
    assert np.array_equal(back.joints, pose.joints)
    assert back.joint_names == pose.joint_names
    assert back.root_index == pose.root_index


def test_convert_taxonomy_unsupported():
    pose = Pose3D(np.zeros((16, 3)))
    with pytest.raises(ValueError, match="unsupported"):
        convert_taxonomy(pose, "GPA16", "COCO17")
    with pytest.raises(ValueError, match="taxonomy is"):
        convert_taxonomy(pose, "MPII16", "GPA16")


# ---------------------------------------------------------------------------
# Depth normalization, crop, back-projection

def test_normalize_endpoints():
    n = DepthNormalizer(1000.0, 6000.0)
    assert n.normalize(1000.0) == 0.0
    assert n.normalize(6000.0) == 1.0


def test_normalize_round_trip():
    n = DepthNormalizer(500.0, 7300.0)
    rng = np.random.default_rng(51)
    z = rng.uniform(0, 10000, 100)
    assert np.max(np.abs(n.denormalize(n.normalize(z)) - z)) < 1e-9


def test_normalize_out_of_range_passthrough_and_clamp():
    n = DepthNormalizer(0.0, 100.0)
    assert n.normalize(-50.0) == -0.5
    assert n.normalize(-50.0, clamp=True) == 0.0


def test_normalizer_validation():
    with pytest.raises(ParseError):
        DepthNormalizer(5.0, 5.0)


def test_crop_round_trip():
    crop = CropTransform(100.0, 50.0, 512.0, target_size=256)
    assert crop.scale == 0.5
    cx, cy = crop.to_crop(356.0, 306.0)
    assert (cx, cy) == (128.0, 128.0)
    sx, sy = crop.to_source(cx, cy)
    assert (float(sx), float(sy)) == (356.0, 306.0)


def test_crop_validation():
    with pytest.raises(ParseError):
        CropTransform(0.0, 0.0, 0.0)


def test_backproject_principal_point():
    cam = Camera(fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64,
                 rotation=np.eye(3), translation=np.zeros(3))
    joints = np.zeros((16, 3))
    joints[:, 0] = 32.0
    joints[:, 1] = 32.0
    joints[:, 2] = 2000.0
    joints[0] = (42.0, 32.0, 1000.0)
    metric = backproject_to_metric(Pose3D(joints), cam)
    assert metric.units == "mm,mm,mm"
    assert np.allclose(metric.joints[1], [0.0, 0.0, 2000.0])
    assert np.allclose(metric.joints[0], [100.0, 0.0, 1000.0])


# ---------------------------------------------------------------------------
# JSON I/O

def test_pose_json_round_trip(tmp_path):
    rng = np.random.default_rng(52)
    pose = Pose3D(rng.uniform(0, 200, (16, 3)))
    p = tmp_path / "pose.json"
    save_pose(pose, p)
    back = load_pose(p)
    assert np.array_equal(back.joints, pose.joints)
    assert back.units == "px,px,mm"
    assert back.joint_names == pose.joint_names
    data = json.loads(p.read_text())
    assert set(data["joints"][0]) == {"name", "x", "y", "z"}


def test_metric_pose_json_schema(tmp_path):
    pose = metric_pose(np.arange(48, dtype=float).reshape(16, 3))
    p = tmp_path / "pose.json"
    save_pose(pose, p)
    data = json.loads(p.read_text())
    assert set(data["joints"][0]) == {"name", "x_mm", "y_mm", "z_mm"}
    back = load_pose(p)
    assert back.units == "mm,mm,mm"
    assert np.array_equal(back.joints, pose.joints)


def test_pose_json_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ParseError):
        load_pose(p)
    with pytest.raises(ParseError):
        pose_from_json_dict({"taxonomy": "GPA16", "joints": []})


def test_pose_validation():
    with pytest.raises(ParseError, match="root index"):
        Pose3D(np.zeros((16, 3)), root_index=16)
    with pytest.raises(ParseError, match="expects 16"):
        Pose3D(np.zeros((4, 3)), root_index=0, taxonomy="GPA16")
    p34 = Pose3D(np.zeros((34, 3)), root_index=0, taxonomy="MOCAP34")
    assert p34.n_joints == 34
    assert p34.joint_names[3] == "joint_3"
