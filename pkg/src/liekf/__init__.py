"""Quaternion left-invariant EKF for attitude estimation with EM-based
noise covariance identification, plus the simulation harness used to
benchmark it."""

from . import quaternion
from .attitude import (ImuSample, NoiseSpec, ReferenceFields, assemble_R,
                       attitude_from_vectors, jacobian_H, measure_h,
                       process_noise_Q, propagate_quaternion, transition_F)
from .em import (EmConfig, EmResult, SufficientStats, compute_s_matrices,
                 evaluate_objective, log_likelihood, run_em, run_linear_em,
                 update_Q, update_R)
from .estimator import AdaptiveAttitudeEKF
from .exceptions import ConfigError, NumericalError
from .filter import (FilterParams, FilterState, StepRecord, WindowBuffer,
                     predict, run_linear_window, run_window, update)
from .simulation import (ConfigResult, EmOptions, McConfig, McSummary,
                         NoiseConfig, RateProfile, Trajectory,
                         TrajectoryConfig, attitude_rmse,
                         generate_trajectory, quaternion_rmse, replay_run,
                         run_monte_carlo, synthesize_measurements)
from .smoothing import (SmoothedWindow, lag_one_smooth, rts_smooth,
                        smooth_window)

__version__ = "0.1.0"
