"""Rough stochastic differential equations: rough paths, stochastic sewing, solvers."""
__version__ = "0.1.0"

from .timegrid import TimeGrid, make_grid, holder_seminorm, holder_norm_lm
from .roughpath import (RoughPath, RandomRoughPath, lift_smooth, lift_brownian, lift_fbm, chen_defect,
                        symmetrization_defect, rough_distance, stop_rough_path, restrict)
from .branching import BranchedEnsemble, conditional_norm, cond_norm
from .controlled import (ControlledPath, ControlledVectorField, make_field, compose, remainder,
                         scrp_norm, scrp_distance, cvf_distance)
from .sewing import Germ, sew, forward_germ, backward_germ, rsi_forward, rsi_backward, dyadic_defect_decomposition
from .solver import (RSDECoefficients, Trajectory, StoppingPolicy, step_davie, solve_rsde, solve_local,
                     remainder_diagnostics, doob_meyer_split)
from .harness import (ExperimentConfig, oracle_linear_rsde, oracle_euler_maruyama, run_convergence_study,
                      run_stability_study, regression_slope, emit_report)
