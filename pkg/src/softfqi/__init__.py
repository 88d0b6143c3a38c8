"""Stationary-reweighted soft fitted Q-iteration on tabular MDPs."""

from .errors import (ConfigError, DegenerateSupportError, DimensionError, InvalidSpecError,
                     NoGapError, NonConvergenceError, OutOfRegionError, SingularDesignError,
                     SoftFqiError)
from .mdp import (GarnetSpec, TabularMdp, TransitionDataset, behavior_measure,
                  dirichlet_behavior_policy, generate_garnet, sample_reset_dataset)
from .soft_bellman import (soft_bellman_apply, soft_eval_operator, softmax_policy,
                           solve_soft_q_star)
from .geometry import (StateActionMeasure, contraction_profile, density_ratio,
                       projection_weighted_ls, stationary_distribution, weighted_l2_norm)
from .features import FeatureMap, LinearQ, build_realizable_features, one_hot_features
from .fqi import HomotopySchedule, WeightingMode, robust_stationary, run_fqi, run_homotopy

__version__ = "0.1.0"
