"""Monte Carlo solvers for flows of forward-backward SDEs with diagonal feedback."""

from .bsde import BsdeConfig, BsdeSlice, solve_bsde, solve_bsde_family
from .condexp import (CondExpModel, Projector, RegressionBasis, evaluate, fit_conditional,
                      tower_check)
from .errors import (BlowUpError, CoefficientEvaluationError, ConfigError, FfbsdeError,
                     InconclusiveStudyError, InvalidArgumentError, OracleDivergenceError,
                     UnsupportedProblemError, UnsupportedReductionError)
from .experiments import (ContractionRow, ConvergenceRow, StabilityRow, contraction_study,
                          convergence_study, stability_study)
from .flow import (EquilibriumSolution, PicardReport, export_solution_csv, extract_diagonal,
                   phi_step, solve_equilibrium, solve_pi_equilibrium, stack_coefficients,
                   unstack_slices)
from .model import (Partition, ProblemSpec, TimeGrid, ValidationReport, make_partition,
                    make_uniform_grid, partition_from_times, validate_problem)
from .oracle import (AffineOracleSolution, AffineProblemSpec, LQControlProblem,
                     build_lq_control_problem, solve_affine_oracle,
                     solve_deterministic_oracle, spike_variation_check)
from .paths import (BrownianBundle, DiagonalProcess, PathEnsemble, sample_brownian,
                    simulate_forward)

__version__ = "0.1.0"
