"""Small-noise estimation toolkit for partially observed linear systems.

Simulation, kernel estimators of the quadratic variation of the limit
derivative, substitution and one-step MLE parameter estimators, and
Kalman--Bucy / adaptive filters, with a Monte Carlo harness.
"""

from .errors import *  # noqa: F401,F403
from .fields import ParamField, ScalarField, field_from_dict
from .filtering import (FilterPath, InfoProfile, MLEResult, OneStepResult, RiccatiSolution,
                        adaptive_filter, bayes_estimator, filter_sensitivity, fisher_information,
                        gamma_inf, info_profile, kalman_bucy, kalman_bucy_by_parts,
                        log_likelihood, mle_grid, one_step_mle_process, solve_riccati)
from .kernels import (Kernel, KernelConstants, ValidationReport, constants, default_pair,
                      solve_moment_kernel, validate)
from .model import (SystemSpec, ThetaBounds, constant_system, dpsi_dtheta, psi_of_theta,
                    psi_true, var_Y, var_Z)
from .param_est import (SEResult, ThetaSpace, certify, se_limit_stddev, substitution_estimator,
                        substitution_estimates)
from .qv import (EstimatorConfig, QVComponents, endpoint_derivative, estimate_int_b2,
                 estimate_int_f2, qv_components, qv_estimate, smooth_derivative,
                 weighted_qv_estimate)
from .sim import (PathPair, TimeGrid, derivative_oracle, derive_seed, load_path,
                  realized_qv_oracle, simulate, simulate_batch)

__version__ = "0.1.0"
