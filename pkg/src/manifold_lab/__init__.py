"""Classification on low-dimensional data manifolds: data, models, optimizers and attacks."""
from .attacks import AttackConfig, RobustnessReport, l1_margin, linear_attack_oracle, pgd_linf, robust_accuracy
from .distribution import Dataset, ManifoldSpec, make_rng, ovl, region, sample
from .lab import RateFit, SweepConfig, export_boundary_grid, fit_rate, run_convergence_sweep, \
    run_loss_threshold, run_robustness_curve
from .models import IdentifiableParams, LinearParams, TwoLayerParams, collapse, orthogonalize, project_to_ball
from .objective import PopulationProxy, grad_theta, hessian_theta, loss
from .optimizers import OptimizerConfig, StepPolicy, estimate_optimum, gd_step, newton_step, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "RobustnessReport", "l1_margin", "linear_attack_oracle", "pgd_linf", "robust_accuracy",
    "Dataset", "ManifoldSpec", "make_rng", "ovl", "region", "sample",
    "RateFit", "SweepConfig", "export_boundary_grid", "fit_rate", "run_convergence_sweep",
    "run_loss_threshold", "run_robustness_curve",
    "IdentifiableParams", "LinearParams", "TwoLayerParams", "collapse", "orthogonalize", "project_to_ball",
    "PopulationProxy", "grad_theta", "hessian_theta", "loss",
    "OptimizerConfig", "StepPolicy", "estimate_optimum", "gd_step", "newton_step", "train",
]
