"""Gaussian-process regression on gappy grids: likelihood, training, inference.

The marginal likelihood pairs the solver-of-choice quadratic term with a
Nystrom approximation of the log-determinant built from the largest full-grid
eigenvalues (exact when no cells are missing). The weight vector alpha is
cached at full grid length with explicit zeros on the gaps, so the posterior
mean at any test point is a plain dot product ``g . alpha`` and grid-batched
means are one rectangular Kronecker matrix-vector product.

Posterior variance follows the exact latent form
``V[y*] = k(x*, x*) - g_X^T (K_XX + sigma^2 I)^-1 g_X`` (predictive-response
variance would add sigma^2 to this); a Nystrom-approximate variance replaces
the inverse with the rank-p inversion-lemma form shared with the IG
preconditioner.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .grids import GappyDataset, GridSpec, atomic_write_bytes, load_dataset, save_dataset, scatter
from .kernels import Hyperparams
from .kron import KroneckerEigen, kron_eig, kron_mvm, top_eigenvalues
from .solvers import (
    CGConfig,
    GapSolveResult,
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

__all__ = [
    "GPModel",
    "TrainConfig",
    "TrainReport",
    "PosteriorResult",
    "nystrom_logdet",
    "log_marginal_likelihood",
    "train",
    "save_model",
    "load_model",
]

_VAR_CLAMP = -1e-8


@dataclass
class TrainConfig:
    """Settings for marginal-likelihood maximization."""

    method: str = "fg"
    rank: int = 0
    gamma: float | None = None
    cg: CGConfig = field(default_factory=CGConfig)
    max_evaluations: int = 300
    n_starts: int = 3
    step_scale: float = 0.5      # log-space scale of multi-start perturbations
    ll_tolerance: float = 1e-6   # simplex convergence tolerance on the log-likelihood
    free_mask: np.ndarray | None = None  # boolean over the packed vector; None = all free
    seed: int = 0


@dataclass
class TrainReport:
    initial_loglik: float
    best_loglik: float
    n_evaluations: int
    n_starts: int
    converged: bool
    budget_exhausted: bool
    unreliable_evaluations: int = 0

    def to_json(self) -> dict:
        return self.__dict__.copy()


@dataclass
class PosteriorResult:
    """Posterior means (and optionally variances) for a batch of test points."""

    means: np.ndarray
    variances: np.ndarray | None = None
    reports: list[SolveReport] | None = None
    clamped: bool = False  # a variance fell below the -1e-8 round-off floor


def nystrom_logdet(eig: KroneckerEigen, n_observed: int, sigma2: float) -> float:
    """``log |K_XX + sigma^2 I| ~= sum_i log((N/M) lambda_i + sigma^2)``.

    The sum runs over the N largest full-grid eigenvalues; with no gaps
    (N = M) the approximation is the exact log-determinant.
    """
    if not sigma2 > 0:
        raise ValueError("nystrom log-det requires sigma2 > 0")
    m = eig.size
    if not 0 < n_observed <= m:
        raise ValueError(f"n_observed must be in [1, {m}]")
    values = reduce(np.multiply.outer, eig.psd_clamped_eigvals()).ravel()
    _, lam = top_eigenvalues(values, n_observed)
    return float(np.sum(np.log((n_observed / m) * lam + sigma2)))


def log_marginal_likelihood(hyper: Hyperparams, data: GappyDataset, method: str = "fg",
                            config: CGConfig | None = None, rank: int = 0,
                            gamma: float | None = None) -> tuple[float, GapSolveResult]:
    """Log marginal likelihood of the observed responses under ``hyper``.

    Returns the value together with the gap-system solve used for the
    quadratic term; a non-converged solve marks the value unreliable (caller
    checks ``result.report.converged``).
    """
    k_op = hyper.kernel.grid_covariance(data.grid)
    eig = kron_eig(k_op)
    result = solve_gap_system(k_op, data.idx, data.y_obs, method, hyper.sigma2,
                              config=config, rank=rank, gamma=gamma, eig=eig)
    alpha_x = result.alpha[data.idx.x_indices]
    quad = float(data.y_obs @ alpha_x)
    n = data.idx.n_observed
    ll = -0.5 * nystrom_logdet(eig, n, hyper.sigma2) - 0.5 * quad - 0.5 * n * math.log(2 * math.pi)
    return ll, result


def _clamp_variance(value: float) -> tuple[float, bool]:
    if value >= 0.0:
        return value, False
    if value >= _VAR_CLAMP:
        return 0.0, False
    warnings.warn(f"posterior variance {value:.3e} below round-off floor; clamped to 0")
    return 0.0, True


class GPModel:
    """A product-kernel GP bound to a gappy-grid dataset.

    The model is fitted by solving the training system once with any of the
    three formulations; prediction methods then reuse the cached
    eigendecomposition and weight vector. Changing hyperparameters means
    building a new model (``with_hyper``), which drops the cache.
    """

    def __init__(self, hyper: Hyperparams, data: GappyDataset):
        if hyper.kernel.ndim != data.grid.ndim:
            raise ValueError("kernel and grid dimension mismatch")
        self.hyper = hyper
        self.data = data
        self._k_op = None
        self._eig: KroneckerEigen | None = None
        self._alpha: np.ndarray | None = None
        self._y_filled: np.ndarray | None = None
        self._fit_result: GapSolveResult | None = None
        self._fit_method: str | None = None
        self._var_solvers: dict = {}
        self._nystrom_ops: dict = {}

    # -- construction ------------------------------------------------------

    def with_hyper(self, hyper: Hyperparams) -> "GPModel":
        return GPModel(hyper, self.data)

    @property
    def k_op(self):
        if self._k_op is None:
            self._k_op = self.hyper.kernel.grid_covariance(self.data.grid)
        return self._k_op

    @property
    def eig(self) -> KroneckerEigen:
        if self._eig is None:
            self._eig = kron_eig(self.k_op)
        return self._eig

    @property
    def is_fitted(self) -> bool:
        return self._alpha is not None

    @property
    def alpha(self) -> np.ndarray:
        """Cached weight vector, length M with exact zeros on the gaps."""
        if self._alpha is None:
            raise RuntimeError("model is not fitted; call fit() first")
        return self._alpha

    def fit(self, method: str = "fg", config: CGConfig | None = None, rank: int = 0,
            gamma: float | None = None) -> GapSolveResult:
        """Solve the training system and cache the weight vector."""
        result = solve_gap_system(self.k_op, self.data.idx, self.data.y_obs, method,
                                  self.hyper.sigma2, config=config, rank=rank,
                                  gamma=gamma, eig=self._eig)
        if result.eig is not None:
            self._eig = result.eig
        alpha = result.alpha.copy()
        alpha[self.data.idx.z_indices] = 0.0  # store the g^T alpha form exactly
        self._alpha = alpha
        self._y_filled = result.y_filled
        self._fit_result = result
        self._fit_method = method
        return result

    def _set_fitted(self, alpha: np.ndarray, y_filled: np.ndarray | None, method: str | None):
        alpha = np.asarray(alpha, dtype=np.float64).copy()
        alpha[self.data.idx.z_indices] = 0.0
        self._alpha = alpha
        self._y_filled = y_filled
        self._fit_method = method

    @property
    def y_filled(self) -> np.ndarray | None:
        """Gap responses inferred by the most recent fill-gaps fit, if any."""
        return self._y_filled

    # -- likelihood --------------------------------------------------------

    def log_marginal_likelihood(self, method: str | None = None,
                                config: CGConfig | None = None, rank: int = 0,
                                gamma: float | None = None) -> float:
        """Likelihood at the current hyperparameters (fits if necessary)."""
        method = method or self._fit_method or "fg"
        if not self.is_fitted or self._fit_method != method:
            self.fit(method, config=config, rank=rank, gamma=gamma)
        n = self.data.idx.n_observed
        quad = float(self.data.y_obs @ self._alpha[self.data.idx.x_indices])
        logdet = nystrom_logdet(self.eig, n, self.hyper.sigma2)
        return -0.5 * logdet - 0.5 * quad - 0.5 * n * math.log(2 * math.pi)

    # -- posterior mean ----------------------------------------------------

    def predict_mean_point(self, x_star) -> float:
        """Posterior mean ``g^T alpha`` at one test point."""
        g = self.hyper.kernel.cross_covariance_point(self.data.grid, x_star)
        return float(g @ self.alpha)

    def predict_mean_grid(self, test_grid: GridSpec) -> np.ndarray:
        """Posterior means on a whole test grid via one rectangular product."""
        g_op = self.hyper.kernel.cross_covariance_grid(self.data.grid, test_grid)
        return kron_mvm(g_op.transpose(), self.alpha)

    # -- posterior variance ------------------------------------------------

    def _variance_solver(self, method: str, rank: int, gamma: float | None,
                         config: CGConfig | None):
        """Solver for ``(K_XX + sigma^2 I)^-1 g_X``, built once and reused.

        The preconditioner (and for FG the eigendecomposition) is assembled on
        first use and shared across test points.
        """
        cfg = config or CGConfig()
        key = (method, rank, gamma, cfg.tolerance, cfg.max_iters)
        if key in self._var_solvers:
            return self._var_solvers[key]

        idx = self.data.idx
        sigma2 = self.hyper.sigma2
        m = self.data.grid.size

        if method == "ig":
            op = ig_operator(self.k_op, idx, sigma2)
            precon = ig_preconditioner(self.eig, idx, rank, sigma2) if rank > 0 else None

            def solve(g_x):
                u_x, report = cg_solve(op, g_x, precon, cfg)
                return u_x, report

        elif method == "pg":
            from .solvers import default_gamma

            gam = gamma if gamma is not None else default_gamma(self.k_op, sigma2)
            op = pg_operator(self.k_op, idx, gam, sigma2)
            precon = pg_preconditioner(idx, gam, sigma2).squared()

            def solve(g_x):
                u, report = cg_solve(op, scatter(g_x, idx.x_indices, m), precon, cfg)
                return u[idx.x_indices], report

        elif method == "fg":
            if idx.n_gaps == 0:
                from .kron import eig_solve, shifted_eigenvalues

                shifted = shifted_eigenvalues(self.eig, sigma2)

                def solve(g_x):
                    u = eig_solve(self.eig, sigma2, g_x, shifted=shifted)
                    return u, SolveReport(0, 0.0, True)

            else:
                op, rhs = fg_operator(self.eig, idx, sigma2)
                precon = fg_preconditioner(self.eig, idx, rank, sigma2) if rank > 0 else None

                def solve(g_x):
                    g_z, report = cg_solve(op, rhs(g_x), precon, cfg)
                    u = fg_recover_alpha(self.eig, idx, sigma2, g_x, g_z)
                    return u[idx.x_indices], report

        else:
            raise ValueError(f"unknown method {method!r}")

        self._var_solvers[key] = solve
        return solve

    def predict_var_point_exact(self, x_star, method: str = "ig", rank: int = 0,
                                gamma: float | None = None,
                                config: CGConfig | None = None) -> float:
        """Exact latent posterior variance at one test point (any solve route)."""
        if not self.hyper.sigma2 > 0:
            raise ValueError("exact variance solve requires sigma2 > 0")
        self.alpha  # require a fitted model, matching the mean path
        g = self.hyper.kernel.cross_covariance_point(self.data.grid, x_star)
        g_x = g[self.data.idx.x_indices]
        solve = self._variance_solver(method, rank, gamma, config)
        u_x, report = solve(g_x)
        if not report.converged:
            raise RuntimeError(f"variance solve did not converge: {report.status}")
        value = self.hyper.kernel.point_variance(x_star) - float(g_x @ u_x)
        clamped, _ = _clamp_variance(value)
        return clamped

    def predict_var_point_nystrom(self, x_star, p: int) -> float:
        """Rank-p Nystrom-approximate posterior variance.

        Replaces ``(K_XX + sigma^2 I)^-1`` with the inversion-lemma form built
        from the p largest full-grid eigenpairs. At p = 0 this degenerates to
        ``k(x*, x*) - ||g_X||^2 / sigma^2``, clamped at zero.
        """
        self.alpha
        if p not in self._nystrom_ops:
            self._nystrom_ops[p] = ig_preconditioner(self.eig, self.data.idx, p,
                                                     self.hyper.sigma2)
        apply_inv = self._nystrom_ops[p]
        g = self.hyper.kernel.cross_covariance_point(self.data.grid, x_star)
        g_x = g[self.data.idx.x_indices]
        value = self.hyper.kernel.point_variance(x_star) - float(g_x @ apply_inv(g_x))
        return max(value, 0.0)

    # -- batched prediction (used by the command-line tools) ----------------

    def predict_points(self, points, variance: str = "none", method: str = "ig",
                       rank: int = 0, gamma: float | None = None,
                       config: CGConfig | None = None) -> PosteriorResult:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        means = np.array([self.predict_mean_point(x) for x in points])
        if variance == "none":
            return PosteriorResult(means)
        clamped = False
        variances = np.empty(points.shape[0])
        for i, x in enumerate(points):
            if variance == "exact":
                v = self.predict_var_point_exact(x, method=method, rank=rank,
                                                 gamma=gamma, config=config)
            elif variance == "nystrom":
                v = self.predict_var_point_nystrom(x, rank)
            else:
                raise ValueError(f"unknown variance mode {variance!r}")
            variances[i] = v
        return PosteriorResult(means, variances, clamped=clamped)


def train(model: GPModel, config: TrainConfig | None = None) -> tuple[GPModel, TrainReport]:
    """Maximize the marginal likelihood with multi-start Nelder-Mead.

    Optimization runs on the packed log-transformed hyperparameter vector
    (optionally restricted by ``free_mask``). Deterministic for a fixed seed.
    Returns a model fitted at the best hyperparameters found; the likelihood
    never decreases below the initial value since the initial point is a
    candidate.
    """
    cfg = config or TrainConfig()
    base = model.hyper.to_vector()
    free = (np.ones(base.size, dtype=bool) if cfg.free_mask is None
            else np.asarray(cfg.free_mask, dtype=bool))
    if free.size != base.size:
        raise ValueError(f"free_mask has {free.size} entries, expected {base.size}")

    evals = {"n": 0, "unreliable": 0}

    def loglik_at(vec_free) -> float:
        full = base.copy()
        full[free] = vec_free
        hyper = model.hyper.with_vector(full)
        evals["n"] += 1
        try:
            ll, result = log_marginal_likelihood(hyper, model.data, cfg.method,
                                                 config=cfg.cg, rank=cfg.rank,
                                                 gamma=cfg.gamma)
        except (np.linalg.LinAlgError, ValueError):
            evals["unreliable"] += 1
            return -np.inf
        if not result.report.converged:
            evals["unreliable"] += 1
            return -np.inf
        return ll

    x0 = base[free]
    initial_ll = loglik_at(x0)
    if x0.size == 0:
        fitted = model.with_hyper(model.hyper)
        fitted.fit(cfg.method, config=cfg.cg, rank=cfg.rank, gamma=cfg.gamma)
        report = TrainReport(initial_ll, initial_ll, evals["n"], 0, True, False,
                             evals["unreliable"])
        return fitted, report
    if not np.isfinite(initial_ll):
        raise ValueError("likelihood is not finite at the initial hyperparameters")

    rng = np.random.default_rng(cfg.seed)
    best_vec, best_ll = x0.copy(), initial_ll
    budget = max(cfg.max_evaluations, 1)
    per_start = max(budget // max(cfg.n_starts, 1), 2)
    any_converged = False

    for start in range(cfg.n_starts):
        if evals["n"] >= budget:
            break
        start_vec = x0 if start == 0 else x0 + cfg.step_scale * rng.standard_normal(x0.size)
        res = minimize(
            lambda v: -loglik_at(v),
            start_vec,
            method="Nelder-Mead",
            options={
                "maxfev": min(per_start, budget - evals["n"] + 1),
                "fatol": cfg.ll_tolerance,
                "xatol": 1e-4,
            },
        )
        any_converged = any_converged or bool(res.success)
        if np.isfinite(res.fun) and -res.fun > best_ll:
            best_ll, best_vec = -res.fun, res.x.copy()

    full = base.copy()
    full[free] = best_vec
    fitted = model.with_hyper(model.hyper.with_vector(full))
    fitted.fit(cfg.method, config=cfg.cg, rank=cfg.rank, gamma=cfg.gamma)
    budget_exhausted = evals["n"] >= budget and not any_converged
    report = TrainReport(initial_ll, best_ll, evals["n"], cfg.n_starts,
                         any_converged, budget_exhausted, evals["unreliable"])
    return fitted, report


# ---------------------------------------------------------------------------
# Model artifacts: dataset files + hyperparameter JSON + weight payloads.
# ---------------------------------------------------------------------------


def save_model(model: GPModel, directory, fit_info: dict | None = None) -> Path:
    directory = Path(directory)
    save_dataset(model.data, directory)
    atomic_write_bytes(directory / "hyperparams.json", (model.hyper.to_json() + "\n").encode())
    if model.is_fitted:
        atomic_write_bytes(directory / "alpha.f64", model.alpha.astype("<f8").tobytes())
        if model.y_filled is not None and model.y_filled.size:
            atomic_write_bytes(directory / "y_filled.f64",
                               np.asarray(model.y_filled).astype("<f8").tobytes())
    if fit_info is not None:
        atomic_write_bytes(directory / "fit.json",
                           (json.dumps(fit_info, indent=2) + "\n").encode())
    return directory


def load_model(directory) -> GPModel:
    directory = Path(directory)
    data = load_dataset(directory)
    hyper = Hyperparams.from_json((directory / "hyperparams.json").read_text())
    model = GPModel(hyper, data)
    alpha_path = directory / "alpha.f64"
    if alpha_path.exists():
        alpha = np.frombuffer(alpha_path.read_bytes(), dtype="<f8")
        y_filled = None
        filled_path = directory / "y_filled.f64"
        if filled_path.exists():
            y_filled = np.frombuffer(filled_path.read_bytes(), dtype="<f8")
        model._set_fitted(alpha, y_filled, None)
    return model
