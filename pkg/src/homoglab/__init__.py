"""Numerical laboratory for curvature-based homogenization of
nondivergence-form elliptic operators in random tile environments."""

__version__ = "0.1.0"

from .envelope import (EnvelopeResult, convex_envelope, mc_subdiff_measure,
                       subdiff_at, subdiff_measure, support_certificate)
from .environment import (Realization, TileEnsemble, bellman_checkerboard,
                          checkerboard, constant_ensemble, field_of,
                          load_realization, sample_realization,
                          save_realization, window_for)
from .grid import (Box, GridFunction, TriadicCube, cube_of,
                   load_gridfunction, restrict, save_gridfunction, subcubes)
from .homogenize import (DecayResult, EffectiveEstimate, MomentCurve,
                         balance_constant, effective_from_cell,
                         error_rate_experiment, expected_mu_curve,
                         variance_decay_experiment)
from .mu import (ConstCoeffMu, MuEstimate, MuEstimateConfig,
                 mu_bruteforce_tiny, mu_constant_coeff, mu_estimate,
                 mu_star_estimate)
from .operators import (Bellman, Linear, LocalOperator, OperatorField,
                        PucciShift, SymMatrix, constant_field,
                        ellipticity_report, pucci, shift, star, translate)
from .solver import (BoundaryData, SolveReport, apply_operator, solve_cell,
                     solve_dirichlet, stencil_weights)
