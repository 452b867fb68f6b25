"""Reduced-order soft-robot simulation, receding-horizon control in a learned
control subspace, and Bayesian optimization of that subspace on the Grassmannian."""

from .bayesopt import (GPModel, KernelParams, boca_select_fidelity, fidelity_ladder, gp_fit,
                       gp_hyperopt, gp_predict, kernel, maximize_acquisition, ucb)
from .dynamics import Environment, ReducedState, SimCounter, Task, Trajectory, rollout, simulate, step
from .fem import Material, Mesh, assemble, build_mesh, modal_basis
from .grassmann import grassmann_distance, random_grassmann
from .mpc import ControlSpline, MPCConfig, gauss_newton_update, mpc_run, mppi_update
from .pipeline import (EvalRecord, Problem, RbboConfig, compare_bo_vs_boca, identity_baseline, load_dataset,
                   persist_dataset, rbbo)
from .rom import ReducedModel, reduce

__version__ = "0.1.0"

__all__ = [
    "ControlSpline", "Environment", "EvalRecord", "GPModel", "KernelParams", "MPCConfig", "Material",
    "Mesh", "Problem", "RbboConfig", "ReducedModel", "ReducedState", "SimCounter", "Task", "Trajectory",
    "assemble", "boca_select_fidelity", "build_mesh", "compare_bo_vs_boca", "fidelity_ladder",
    "gauss_newton_update", "gp_fit", "gp_hyperopt", "gp_predict", "grassmann_distance",
    "identity_baseline", "kernel", "load_dataset", "maximize_acquisition", "modal_basis", "mpc_run",
    "mppi_update", "persist_dataset", "random_grassmann", "rbbo", "reduce", "rollout", "simulate",
    "step", "ucb",
]
