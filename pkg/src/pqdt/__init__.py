"""Phase-insensitive quantum detector tomography at scale.

Reconstructs the POVM of a photon-number-resolving detector from probe data
by constrained least squares, using a two-stage projected truncated-Newton
solver over row blocks of the POVM matrix.
"""
from .core import (BandedMatrix, DenseMatrix, MatrixFormatError, PovmMatrix, ProblemInstance,
                   load_matrix, max_hilbert_dim, mem_solver, mem_storage, save_matrix)
from .detector import (DetectorParams, ProbeSchedule, analytic_povm, build_probe_matrix,
                       fit_detector_params, fitted_detector, poisson_binomial,
                       quadratic_schedule_for_dimension, simulate_outcomes)
from .simplex import project_rows, project_simplex
from .solver import ConvergenceReport, SmoothingConfig, SolverConfig, solve_two_stage
from .analysis import (fidelity, infidelity_report, make_grid, wigner_diag,
                       wigner_precision_sweep)

__version__ = "0.1.0"
