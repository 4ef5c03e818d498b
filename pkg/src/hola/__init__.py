"""Higher-order Langevin Monte Carlo with Picard-Lagrange steps."""

__version__ = "0.1.0"

from .errors import (ContractionWarning, DivergenceError, HolaError, InsufficientDataError,
                     InvalidParameterError, NotPSDError, UnsupportedOperationError)
from .potentials import (GradientCounter, Potential, check_gradient, gaussian_potential,
                         hyperbolic_potential, potential_from_config, shift)
from .algebra import (CanonicalOperators, NodeSet, StepPlan, alpha_weights, build_canonical,
                      build_plan, factor_covariance, lebesgue_constant, make_nodes,
                      noise_covariance, phi_functions)
from .sampler import (ChainState, EnsembleResult, SamplerConfig, picard_step, run_chain,
                      run_ensemble)
from .baselines import (exact_gaussian_chain, linear_sde_step, run_exact_chain, run_ula_chain,
                        run_underdamped_chain, ula_step, underdamped_step)
from .diagnostics import (MomentReport, OrderSweepResult, gaussian_w2, interpolation_order_check,
                          moment_report, order_sweep, picard_probe, stationary_moment_check,
                          theory_checks)
