"""Monte Carlo tests for preferential sampling in spatial data."""

from .randfield import (
    GridField,
    MaternParams,
    interpolate,
    matern_correlation,
    read_grid_csv,
    simulate_field,
    write_grid_csv,
)
from .pointproc import (
    FittedIntensity,
    HardcoreModel,
    IntensityModel,
    PointPattern,
    fit_hardcore,
    fit_intensity,
    read_points_csv,
    sample_binomial_ipp,
    sample_hardcore,
    sample_ipp,
    select_bandwidth_loocv,
    smoothed_residual_field,
    write_points_csv,
)
from .latent import KrigingModel, fit_kriging, predict_z
from .nnstats import knn_mean_distances, spearman_rho
from .pstest import TestConfig, TestReport, run_naive_permutation_test, run_nn_test, run_residual_test

from .discrete import (
    ArealPopulation,
    SelectionModel,
    estimate_unit_z,
    fit_selection,
    read_areal_csv,
    run_discrete_test,
    write_areal_csv,
)
from .simstudy import ExperimentResult, ExperimentSpec, run_experiment

__version__ = "0.1.0"
