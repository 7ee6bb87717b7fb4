"""Non-local Hessian regularization for image restoration.

The package provides, bottom up: image containers and synthetic scenes
(:mod:`nlhessian.grid`), eikonal geodesic distances and neighborhood weights
(:mod:`nlhessian.eikonal`), explicit and least-squares non-local Hessian
operators (:mod:`nlhessian.hessian`), primal-dual solvers for the associated
denoising energies plus TV / TV2 / TGV2 baselines (:mod:`nlhessian.solver`),
a numerical verification suite (:mod:`nlhessian.verify`) and a command line
interface (:mod:`nlhessian.cli`).
"""

__version__ = "0.1.0"

from .grid import (ImageGrid, ImageIOError, NoiseSpec, Offset, PixelIndex,
                   add_gaussian_noise, central_gradient, load_image, make_disc_slope,
                   make_opposing_slopes, psnr, save_image, ssim)
from .eikonal import (MetricField, NeighborhoodWeights, build_local_weights,
                      build_metric, build_neighborhoods, fast_march_from)
from .hessian import (MollifierFamily, NlHessianOperator, QuadraticFit,
                      SphereConstants, assemble_operator, explicit_nl_hessian,
                      fit_quadratic, implicit_on_circle, nl_divergence2,
                      sphere_constants)
from .solver import (EnergySpec, NumericalError, SolveReport, SolverConfig,
                     energy, estimate_operator_norm, solve_baseline,
                     solve_primal_dual)
from .verify import CheckResult, format_results, run_verification

__all__ = [
    "ImageGrid", "ImageIOError", "NoiseSpec", "Offset", "PixelIndex",
    "add_gaussian_noise", "central_gradient", "load_image", "make_disc_slope",
    "make_opposing_slopes", "psnr", "save_image", "ssim",
    "MetricField", "NeighborhoodWeights", "build_local_weights",
    "build_metric", "build_neighborhoods", "fast_march_from",
    "MollifierFamily", "NlHessianOperator", "QuadraticFit", "SphereConstants",
    "assemble_operator", "explicit_nl_hessian", "fit_quadratic",
    "implicit_on_circle", "nl_divergence2", "sphere_constants",
    "EnergySpec", "NumericalError", "SolveReport", "SolverConfig", "energy",
    "estimate_operator_norm", "solve_baseline", "solve_primal_dual",
    "CheckResult", "format_results", "run_verification",
    "__version__",
]
