"""Bivariate density estimation over quasiconformal deformations.

A known target density exp(H) is pulled back through a parameterized
smooth invertible map f of the plane; the map's complex dilatation lives
in a truncated Fourier class, and the fit maximizes a penalized
log-likelihood with exact variational gradients.
"""

from .dilatation import (
    BasisSpec,
    ParamVector,
    bump,
    eval_phi,
    perturb_nu,
    phi_to_mu,
    load_theta,
    save_theta,
)
from .grid import ComplexGrid, GridSpec, interp, poisson_solve, quad, wirtinger
from .beltrami import VectorField, divergence_at, l_operator, solve_u, target_spec_for
from .deformation import (
    DeformationState,
    beltrami_residual,
    evaluate,
    init_affine,
    rebuild,
    step,
)
from .likelihood import (
    TargetDensity,
    gaussian_target,
    grad_loglike,
    halfg_target,
    loglike,
    penalty,
    penalty_grad,
)
from .data import (
    Dataset,
    DensityGrid,
    density_grid,
    kde,
    kde_oracle_ise,
    metrics,
    sample,
    true_density,
)
from .optimizer import (
    FitResult,
    OptimizerConfig,
    bfgs_fit,
    bfgs_minimize,
    default_lambda_grid,
    fitted_density,
    lambda_sweep,
    moment_match_affine,
)
from . import errors

__version__ = "0.1.0"
