"""Scene-affordance geometry toolkit.

Renders multi-layer depth maps of triangle-mesh scenes by multi-hit ray
tracing, evaluates and differentiates a free-space consistency loss for 3D
human poses, refines poses to respect scene geometry, and provides the pose
metrics and capture-pipeline algorithms (robust time alignment, adaptive
frame sampling, test-subset predicates) that go with them.
"""

__version__ = "0.1.0"

from .scene import (Camera, Ray, TriangleMesh, box_mesh, calibrate_dlt,
                    distort_point, load_camera, load_mesh, pixel_ray, project,
                    save_camera, undistort_point)
from .mldepth import (MultiLayerDepthMap, load_mld, multi_hit_trace,
                      render_mld, save_mld, visualize_layers)
from .affordance import (FreeSpaceIntervals, GeometryFeatureMap,
                         encode_depth_features, encode_volumetric,
                         free_intervals, geometry_loss,
                         geometry_loss_gradient, load_feature_map,
                         nearest_valid_depth, slab_penetration, valid_joints)
from .pose import (CropTransform, DepthNormalizer, Pose3D, argmax_decode,
                   backproject_to_metric, convert_taxonomy, gaussian_target,
                   heatmap_loss, load_pose, metrics_report, mpjpe, pck3d,
                   save_pose, smooth_l1, total_loss)
from .refine import (RefineConfig, RefineReport, project_to_free_space,
                     refine_pose)
from .pipeline import (SkeletonSequence, TimeModel, adaptive_sample,
                       close_to_geometry, frame_difference, load_sequence,
                       occlusion_flags, point_mesh_distance, ransac_time_align,
                       save_sequence, subset_report)

__all__ = [name for name in dir() if not name.startswith("_")]
