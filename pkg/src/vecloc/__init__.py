"""vecloc: ego-localization against lightweight vectorized maps.

Matches vectorized landmarks to BEV feature grids with a transformer decoder
and estimates the planar pose offset with a multi-level histogram solver.
"""

from .bev import (BevGrid, BevPyramid, bilinear_sample, make_pyramid_specs,
                  positional_encoding_2d, rasterize_semantic_gt, upsample_layer)
from .geometry import (GridSpec, Pose6, PoseOffset3, compose, invert_offset,
                       project_elements, project_endpoint_to_bev,
                       relative_offset, sample_candidate_offsets, wrap_yaw)
from .map_core import (MapElement, SemanticType, VectorMap, filter_surfels,
                       load_map, map_size_report, query_window, save_map)
from .matcher import (MapEmbedding, Matcher, MatcherDims, ScoreHead,
                      configure_oracle_scoring, load_checkpoint,
                      normalize_map_descriptors, save_checkpoint)
from .solver import (Posterior, SolverConfig, SolverResult, expected_offset,
                     offset_covariance, posterior, score_candidates,
                     solve_multilevel)
from .synth import (Frame, OracleSignatures, SceneSpec, ablate_landmarks,
                    augment_lidar_rotation, augment_world_rotation,
                    generate_scene, make_frame, perturb_pose, render_oracle_bev)
from .training import (RandomPoseDistribution, TrainingConfig, backward,
                       focal_seg_loss, gradient_check, pose_solver_kl_loss,
                       random_pose_kl_loss, rmse_loss, total_loss, train_loop,
                       train_step)

__version__ = "0.1.0"
