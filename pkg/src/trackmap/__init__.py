"""Keyframe-based dense camera tracking and plane-sweep mapping toolkit."""

__version__ = "0.1.0"

from .geometry import (HypothesisSet, Pose, Twist, aggregate_hypotheses,
                       apply_increment, compose, exp_twist, inverse, log_pose,
                       relative_transform)
from .imaging import (CameraIntrinsics, FlowField, Image, InverseDepthMap,
                      bilinear_sample, build_pyramid, flow_from_depth,
                      warp_image)
from .keyframe import Keyframe, render_virtual_keyframe, should_switch_keyframe
from .costvolume import (CostVolume, LabelSet, accumulate_cost_volume,
                         confidence_weight, fixed_band_labels,
                         narrow_band_labels, sad_patch_cost)
from .depthestim import (ExtractionConfig, extract_depth, interp_factor_to_depth,
                         narrow_band_refine, sgm_aggregate, soft_argmin,
                         winner_take_all)
from .tracker import (PhotometricGNEstimator, TrackerConfig, track_frame,
                      track_sequence)
from .losses import (LossValue, bessel_k, endpoint_error_loss,
                     finite_difference_check, l1_inverse_depth_loss,
                     laplace_uncertainty_loss, motion_loss,
                     scale_invariant_gradient_loss)
from .metrics import l1_inv, l1_rel, sc_inv, translational_rpe_rmse
from .synth import SyntheticScene, perturb_poses, render_scene
