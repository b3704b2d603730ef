"""Adjusted exponentially tilted empirical likelihood for longitudinal estimating equations.

The package covers single-dataset estimation and testing (:mod:`tetel.el`),
estimating-equation builders for GEE and time-dependent covariate types
(:mod:`tetel.moments`), the two-stage spatial procedure on voxel lattices
(:mod:`tetel.spatial`), chi-square and FDR utilities, the simulation harness
(:mod:`tetel.sim`) and a command-line interface.
"""

from .chi2 import chi2_cdf, chi2_quantile, chi2_sf
from .data import LongitudinalDataset, Subject
from .el import (
    DualSolution,
    Estimate,
    InfeasibleMomentsError,
    LinearHypothesis,
    MomentMatrix,
    SingularMomentCovarianceError,
    TestKind,
    TestResult,
    adjusted_moment_matrix,
    aetel_objective,
    fit,
    goodness_of_fit,
    lr_test,
    sandwich_covariance,
    solve_dual,
)
from .fdr import PValueVector, fdr_adjust
from .moments import (
    MeanSpec,
    MomentModel,
    WorkingCorrelation,
    covariate_type_test,
    estimate_correlation,
    full_type1_moments,
    gee_model,
    gee_moments,
    type1_moments,
    type2_moments,
    type3_moments,
)
from .spatial import (
    Lattice,
    ModelRecipe,
    StageOneResult,
    TetelResult,
    VoxelField,
    adaptive_weights,
    combined_moments,
    cross_lr,
    heat_kernel_smooth,
    neighborhood,
    stage_one,
    stage_two,
)
from .wald import wald_test

__version__ = "0.1.0"
