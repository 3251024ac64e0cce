"""Exact GP regression on Cartesian grids with missing cells.

Product kernels on full grids give Kronecker-factored covariance matrices;
this package keeps that structure alive when responses are missing, through
three equivalent formulations of the training solve (penalize-gaps,
ignore-gaps, fill-gaps), rank-p preconditioners for the iterative solver, and
Kronecker-fast posterior inference.
"""

from .grids import GappyDataset, GridSpec, IndexSets, load_dataset, save_dataset, scatter, select
from .kernels import DiscretePSD, Hyperparams, Periodic, ProductKernel, SquaredExponential
from .kron import (
    KroneckerEigen,
    KroneckerOperator,
    RectKroneckerOperator,
    eig_column,
    eig_solve,
    full_eigenvalues,
    kron_eig,
    kron_mvm,
)
from .model import GPModel, TrainConfig, load_model, log_marginal_likelihood, nystrom_logdet, save_model, train
from .solvers import (
    CGConfig,
    SolveReport,
    cg_solve,
    fg_operator,
    fg_preconditioner,
    fg_recover_alpha,
    ig_operator,
    ig_preconditioner,
    pg_operator,
    pg_preconditioner,
    solve_gap_system,
)
from .harness import (
    DenseOracle,
    PreconStudyConfig,
    SweepConfig,
    apply_gaps,
    gen_rastrigin,
    gen_wave_membrane,
    rastrigin_grid,
    run_gappiness_sweep,
    run_precon_study,
)

__version__ = "0.1.0"
