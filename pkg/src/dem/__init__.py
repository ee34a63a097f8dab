"""Directed evolution of pseudo-labels for unsupervised domain adaptation."""
from .calibration import ConfidenceState, update_confidences
from .da_losses import LossWeights, joint_loss, joint_objective
from .errors import DEMError
from .evolution import BeamCandidate, DEMResult, LoopConfig, ReplayBuffer, run_dem, source_only_baseline
from .metrics import MetricsReport, bootstrap_ci, compute_metrics, emit_report, run_ablation, run_cross_validation
from .nn_core import ModelColumn, init_column, load_checkpoint, save_checkpoint
from .policy import PolicyModel, compute_reward
from .synth_domains import DomainDataset, ShiftSpec, generate_domain_pair, make_split

__version__ = "0.1.0"
