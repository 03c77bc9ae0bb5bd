"""Motion prior built from a sequence of latent primitives.

Main entry points: :class:`MotionPriorModel` (encoder and temporally
continuous decoder), :func:`train`, :func:`complete` for point-cloud
sequences, and the scikit-learn style :class:`MotionPrior` and
:class:`MotionCompleter` wrappers.
"""

from .body import KinematicBody, Skeleton, default_skeleton, forward_kinematics, mpjpe, surface_points
from .completion import CompletionConfig, InitEncoder, chamfer, complete, downsample, init_encode
from .estimator import MotionCompleter, MotionPrior
from .fileio import PointCloudSequence, load_motion, load_point_clouds, save_motion, save_point_clouds
from .losses import LossWeights, duration_reg, global_rec_loss, kl_loss, segment_rec_loss, total_loss
from .model import MotionPriorModel, ModelConfig, gaussian_mask, layout, load_checkpoint, save_checkpoint, tiny_config
from .motion import FrameSequence, NormalizationInfo, denormalize, normalize
from .rotation import RigidTransform, apply_rigid, blend_rot6d, matrix_to_rot6d, rot6d_to_matrix
from .synthetic import MotionSpec, generate, make_splits
from .training import TrainConfig, train

__version__ = "0.1.0"
