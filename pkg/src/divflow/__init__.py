"""Flow matching across multiple population pairs with learnable
non-crossing interpolants, plus baselines, metrics, and synthetic setups."""

from . import autodiff, coupling, data, flow, interpolant, metrics, nn, surface

from .autodiff import Node, ShapeError, NonFiniteError, backward, finite_diff_check, forward, leaf
from .coupling import ConditionalDataset, PairBatch, hungarian, independent_coupling, ot_coupling
from .data import BlobSpec, PairedSplit, apply_gstar, blob_dataset, gen_blobs, load_dataset, make_preset, save_dataset, sdc_check
from .flow import (TrainConfig, TrainResult, Trajectory, VelocityField, fm_loss,
                   integrate, integrate_batch, run_training, train_dfm_interleaved,
                   train_dfm_two_phase, train_fm, train_split, translate)
from .interpolant import (KernelParams, LearnableInterpolant, interp_dt, interp_eval,
                          kernel_gamma, linear_interp, make_interpolant, repulsion_loss)
from .metrics import EvalReport, cross_cluster_rate, emd, reflection_velocity_oracle, translation_error
from .nn import MlpParams, adam_init, adam_step, ema_init, ema_update, load_checkpoint, mlp_apply, mlp_forward, mlp_init, save_checkpoint
from .surface import LandParams, PointCloud, land_metric, make_bump_cloud, mfm_loss, nearest_neighbor_xy, surface_adherence, swarm_scenario

__version__ = "0.1.0"
