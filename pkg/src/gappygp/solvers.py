"""Conjugate-gradient solver and the three gap-handling formulations.

Training a GP on a gappy grid reduces to solving
``(K_XX + sigma^2 I_N) alpha_X = y_X`` without ever forming the unstructured
``K_XX``. Three equivalent routes are provided, each expressed as a symmetric
linear operator with fast Kronecker matrix-vector products:

* penalize-gaps (PG): solve the full M x M system
  ``(K + gamma R + sigma^2 I_M) alpha = y`` where R places a large penalty
  ``gamma`` on the gap rows and the gap entries of y hold arbitrary values
  (zeros here); exact in the limit gamma -> infinity.
* ignore-gaps (IG): solve the N x N system
  ``W (K + sigma^2 I_M) W^T alpha_X = y_X`` with W the observed-row selection.
* fill-gaps (FG): solve the L x L system
  ``V Q (T + s I)^-1 Q^T V^T y_Z = -V Q (T + s I)^-1 Q^T W^T y_X`` for the gap
  responses, then recover ``alpha = Q (T + s I)^-1 Q^T y`` on the full grid.

Two rank-p preconditioners accompany IG and FG, built from the extreme
full-grid eigenvalues and inverted with the matrix inversion lemma.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import reduce

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .grids import IndexSets, scatter, select
from .kron import (
    KroneckerEigen,
    KroneckerOperator,
    bottom_eigenvalues,
    eig_column,
    eig_solve,
    kron_eig,
    kron_mvm,
    shifted_eigenvalues,
    top_eigenvalues,
)

__all__ = [
    "LinearOperator",
    "DiagonalOperator",
    "CGConfig",
    "SolveReport",
    "cg_solve",
    "pg_operator",
    "pg_preconditioner",
    "ig_operator",
    "fg_operator",
    "fg_recover_alpha",
    "ig_preconditioner",
    "fg_preconditioner",
    "default_gamma",
    "GapSolveResult",
    "solve_gap_system",
    "METHODS",
]

METHODS = ("pg", "ig", "fg")


class LinearOperator:
    """Symmetric linear map of a fixed size, given by its matvec."""

    def __init__(self, size: int, matvec):
        self.size = int(size)
        self._matvec = matvec

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1 or x.size != self.size:
            raise ValueError(f"operand has size {x.size}, operator expects {self.size}")
        return self._matvec(x)


class DiagonalOperator(LinearOperator):
    """Diagonal operator; ``squared()`` gives the elementwise square."""

    def __init__(self, diag):
        diag = np.ascontiguousarray(diag, dtype=np.float64)
        super().__init__(diag.size, lambda x: diag * x)
        self.diag = diag

    def squared(self) -> "DiagonalOperator":
        return DiagonalOperator(self.diag**2)


@dataclass
class CGConfig:
    """Conjugate-gradient settings; tolerance is on the 2-norm relative residual."""

    tolerance: float = 1e-6
    max_iters: int | None = None  # None -> 10 * n
    record_history: bool = False
    restart_every: int = 5000

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class SolveReport:
    """Outcome of one linear solve."""

    iterations: int
    rel_residual: float
    converged: bool
    status: str = "converged"
    residual_history: list[float] | None = None
    wall_seconds: float = 0.0
    precon_setup_seconds: float = 0.0

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "rel_residual": self.rel_residual,
            "converged": self.converged,
            "status": self.status,
            "residual_history": self.residual_history,
            "wall_seconds": self.wall_seconds,
            "precon_setup_seconds": self.precon_setup_seconds,
        }


def cg_solve(A: LinearOperator, b, precon: LinearOperator | None = None,
             config: CGConfig | None = None) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned conjugate gradients for symmetric positive definite A.

    ``precon`` is the approximate-inverse form: it is applied to residuals as
    ``z = M^-1 r``. Convergence is declared on the true (recomputed) residual,
    so recurrence drift cannot produce a false pass. On non-convergence the
    best iterate seen is returned with ``converged=False``.
    """
    cfg = config or CGConfig()
    b = np.asarray(b, dtype=np.float64).ravel()
    if b.size != A.size:
        raise ValueError(f"rhs has size {b.size}, operator expects {A.size}")
    t0 = time.perf_counter()

    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        report = SolveReport(0, 0.0, True, wall_seconds=time.perf_counter() - t0,
                             residual_history=[] if cfg.record_history else None)
        return np.zeros(A.size), report

    max_iters = cfg.max_iters if cfg.max_iters is not None else 10 * A.size
    x = np.zeros(A.size)
    r = b.copy()
    z = precon(r) if precon is not None else r
    p = z.copy()
    rz = float(r @ z)

    rel = 1.0
    best_rel, best_x = rel, x.copy()
    history = [rel] if cfg.record_history else None
    status = "max_iters"
    it = 0

    while it < max_iters:
        it += 1
        q = A(p)
        pq = float(p @ q)
        if not np.isfinite(pq) or pq <= 0.0:
            status = "breakdown"
            break
        step = rz / pq
        x += step * p
        restart = it % cfg.restart_every == 0
        if restart:
            r = b - A(x)  # discard the recurrence and the search direction
        else:
            r -= step * q
        rel = float(np.linalg.norm(r)) / b_norm
        if history is not None:
            history.append(rel)
        if rel < best_rel:
            best_rel, best_x = rel, x.copy()

        if rel <= cfg.tolerance and not restart:
            r_true = b - A(x)
            rel = float(np.linalg.norm(r_true)) / b_norm
            if rel <= cfg.tolerance:
                status = "converged"
                break
            r = r_true  # recurrence had drifted; continue from the true residual
            restart = True
        if restart:
            z = precon(r) if precon is not None else r
            p = z.copy()
            rz = float(r @ z)
        else:
            z = precon(r) if precon is not None else r
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new

    if status != "converged":
        x = best_x
        rel = float(np.linalg.norm(b - A(x))) / b_norm
    return x, SolveReport(
        iterations=it,
        rel_residual=rel,
        converged=status == "converged",
        status=status,
        residual_history=history,
        wall_seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# The three formulations.
# ---------------------------------------------------------------------------


def pg_operator(K: KroneckerOperator, idx: IndexSets, gamma: float, sigma2: float) -> LinearOperator:
    """Penalized full-grid operator ``K + gamma R + sigma^2 I_M``.

    R is zero except for identity on the gap rows/columns, so gap
    pseudo-observations are priced out of the solution as gamma grows.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    m = K.size
    if idx.n_total != m:
        raise ValueError("index sets do not match operator size")
    z_idx = idx.z_indices

    def matvec(x):
        out = kron_mvm(K, x) + sigma2 * x
        out[z_idx] += gamma * x[z_idx]
        return out

    return LinearOperator(m, matvec)


def pg_preconditioner(idx: IndexSets, gamma: float, sigma2: float) -> DiagonalOperator:
    """Split preconditioner ``(gamma R + sigma^2 I)^(-1/2)`` for the PG system.

    Returned in split (two-sided) form: diagonal ``sigma^-1`` on observed rows
    and ``(gamma + sigma^2)^(-1/2)`` on gap rows. Pass ``.squared()`` to
    :func:`cg_solve`, which expects the equivalent approximate-inverse form.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if not sigma2 > 0:
        raise ValueError("pg preconditioner requires sigma2 > 0")
    diag = np.full(idx.n_total, sigma2**-0.5)
    diag[idx.z_indices] = (gamma + sigma2) ** -0.5
    return DiagonalOperator(diag)


def ig_operator(K: KroneckerOperator, idx: IndexSets, sigma2: float) -> LinearOperator:
    """Observed-rows operator ``W (K + sigma^2 I_M) W^T`` of size N."""
    m = K.size
    if idx.n_total != m:
        raise ValueError("index sets do not match operator size")
    x_idx = idx.x_indices

    def matvec(v):
        return kron_mvm(K, scatter(v, x_idx, m))[x_idx] + sigma2 * v

    return LinearOperator(idx.n_observed, matvec)


def fg_operator(eig: KroneckerEigen, idx: IndexSets, sigma2: float):
    """Gap-rows operator ``V Q (T + s I)^-1 Q^T V^T`` of size L, plus rhs builder.

    The rhs builder maps observed responses to
    ``-V Q (T + s I)^-1 Q^T W^T y_X``, the right-hand side of the fill-gaps
    system for the unknown gap responses ``y_Z``.
    """
    if idx.n_gaps < 1:
        raise ValueError("fill-gaps needs at least one gap; use eig_solve directly")
    m = eig.size
    if idx.n_total != m:
        raise ValueError("index sets do not match operator size")
    shifted = shifted_eigenvalues(eig, sigma2)
    x_idx, z_idx = idx.x_indices, idx.z_indices

    def matvec(u):
        return eig_solve(eig, sigma2, scatter(u, z_idx, m), shifted=shifted)[z_idx]

    def rhs(y_x):
        return -eig_solve(eig, sigma2, scatter(y_x, x_idx, m), shifted=shifted)[z_idx]

    return LinearOperator(idx.n_gaps, matvec), rhs


def fg_recover_alpha(eig: KroneckerEigen, idx: IndexSets, sigma2: float, y_x, y_z) -> np.ndarray:
    """Weight vector ``alpha = Q (T + s I)^-1 Q^T y`` from observed + filled responses.

    When ``y_z`` solves the fill-gaps system, ``alpha`` vanishes on the gaps up
    to the solve tolerance and ``alpha_X`` solves the training system.
    """
    y = scatter(y_x, idx.x_indices, idx.n_total)
    if idx.n_gaps:
        y += scatter(y_z, idx.z_indices, idx.n_total)
    return eig_solve(eig, sigma2, y)


# ---------------------------------------------------------------------------
# Rank-p preconditioners (matrix inversion lemma on selected eigenpairs).
# ---------------------------------------------------------------------------


def _selected_panel(eig: KroneckerEigen, sel_idx, rows) -> np.ndarray:
    """Rows ``rows`` of the selected eigenvector columns, as |rows| x p."""
    panel = np.empty((rows.size, sel_idx.size))
    for k, j in enumerate(sel_idx):
        panel[:, k] = eig_column(eig, int(j))[rows]
    return panel


def ig_preconditioner(eig: KroneckerEigen, idx: IndexSets, p: int, sigma2: float,
                      materialize: bool = True) -> LinearOperator:
    """Approximate inverse of ``K_XX + sigma^2 I`` from the p largest eigenpairs.

    Approximating K by its top-p eigenpairs and applying the matrix inversion
    lemma gives
    ``sigma^-2 [ I - U (sigma^2 I_p + T_p U^T U)^-1 T_p U^T ]`` with
    ``U = W Q S_p^T``. The p x p system is assembled in the symmetric form
    ``sigma^2 I_p + C U^T U C`` (``C = T_p^(1/2)``), which is SPD for any PSD
    spectrum, and Cholesky-factorized once at setup.

    With ``materialize=True`` the N x p panel U is stored for O(Np + p^2)
    applies; otherwise applies use two Kronecker matrix-vector products and
    only the p x p factor stays resident.
    """
    if not sigma2 > 0:
        raise ValueError("ig preconditioner requires sigma2 > 0")
    m = eig.size
    if not 0 <= p <= m:
        raise ValueError(f"rank p={p} outside [0, {m}]")
    if p == 0:
        return LinearOperator(idx.n_observed, lambda r: r / sigma2)

    # top-p of the clamped PSD spectrum; zero eigenvalues contribute nothing
    clamped = reduce(np.multiply.outer, eig.psd_clamped_eigvals()).ravel()
    sel_idx, sel_vals = top_eigenvalues(clamped, p)
    keep = sel_vals > 0
    sel_idx, sel_vals = sel_idx[keep], sel_vals[keep]
    if sel_idx.size == 0:
        return LinearOperator(idx.n_observed, lambda r: r / sigma2)
    sqrt_vals = np.sqrt(sel_vals)
    x_idx, z_idx = idx.x_indices, idx.z_indices
    n = idx.n_observed

    if materialize:
        v_panel = _selected_panel(eig, sel_idx, x_idx) * sqrt_vals
        small = sigma2 * np.eye(sel_idx.size) + v_panel.T @ v_panel
        factor = cho_factor(small)

        def matvec(r):
            return (r - v_panel @ cho_solve(factor, v_panel.T @ r)) / sigma2

        return LinearOperator(n, matvec)

    # Implicit mode: U^T U = I_p - Utilde^T Utilde with Utilde the gap rows
    # (columns of Q are orthonormal), so assemble on whichever side is smaller.
    if idx.n_gaps <= n:
        gap_panel = _selected_panel(eig, sel_idx, z_idx)
        utu = np.eye(sel_idx.size) - gap_panel.T @ gap_panel
    else:
        obs_panel = _selected_panel(eig, sel_idx, x_idx)
        utu = obs_panel.T @ obs_panel
    small = sigma2 * np.eye(sel_idx.size) + (sqrt_vals[:, None] * utu) * sqrt_vals
    factor = cho_factor(small)

    def matvec_implicit(r):
        ut_r = eig.apply_qt(scatter(r, x_idx, m))[sel_idx]
        c = cho_solve(factor, sqrt_vals * ut_r)
        back = np.zeros(m)
        back[sel_idx] = sqrt_vals * c
        return (r - eig.apply_q(back)[x_idx]) / sigma2

    return LinearOperator(n, matvec_implicit)


def fg_preconditioner(eig: KroneckerEigen, idx: IndexSets, p: int, sigma2: float,
                      zeta: float | None = None) -> LinearOperator:
    """Approximate inverse of the fill-gaps operator from the p smallest eigenpairs.

    Splitting ``V Q (T + s I)^-1 Q^T V^T = J + zeta I_L`` with a spectral shift
    ``zeta`` and keeping the p largest diagonal entries of
    ``(T + s I)^-1 - zeta I`` (the p smallest eigenvalues of K) gives, via the
    matrix inversion lemma,
    ``zeta^-1 [ I - Ubar (zeta I_p + Tbar_p Ubar^T Ubar)^-1 Tbar_p Ubar^T ]``.
    The shift must satisfy ``0 < zeta < (lambda_p + sigma^2)^-1`` (open
    interval) where lambda_p is the p-th smallest eigenvalue of K; the default
    is the midpoint ``(lambda_p + sigma^2)^-1 / 2``.
    """
    if idx.n_gaps < 1:
        raise ValueError("fill-gaps preconditioner needs at least one gap")
    m = eig.size
    if not 1 <= p <= m:
        raise ValueError(f"rank p={p} outside [1, {m}]")

    clamped = reduce(np.multiply.outer, eig.psd_clamped_eigvals()).ravel()
    sel_idx, sel_vals = bottom_eigenvalues(clamped, p)
    lam_p = sel_vals[-1]  # p-th smallest eigenvalue of K
    bound = 1.0 / (lam_p + sigma2)
    if zeta is None:
        zeta = 0.5 * bound
    if not 0.0 < zeta < bound:
        raise ValueError(
            f"spectral shift zeta={zeta:.6e} outside the open interval (0, {bound:.6e})"
        )

    tbar = 1.0 / (sel_vals + sigma2) - zeta  # strictly positive inside the bound
    ubar = _selected_panel(eig, sel_idx, idx.z_indices)
    v_panel = ubar * np.sqrt(tbar)
    small = zeta * np.eye(p) + v_panel.T @ v_panel
    factor = cho_factor(small)

    def matvec(r):
        return (r - v_panel @ cho_solve(factor, v_panel.T @ r)) / zeta

    return LinearOperator(idx.n_gaps, matvec)


# ---------------------------------------------------------------------------
# One-call reconstruction: pick a formulation, solve for the weight vector.
# ---------------------------------------------------------------------------


def default_gamma(K: KroneckerOperator, sigma2: float) -> float:
    """Reproducible PG penalty default: ``1e8 * (lambda_max + sigma^2)``."""
    lam_max = 1.0
    for f in K.factors:
        lam_max *= max(np.linalg.eigvalsh(f).max(), 0.0)
    return 1e8 * (lam_max + sigma2)


@dataclass
class GapSolveResult:
    """Weight vector and bookkeeping from one gap-system solve."""

    alpha: np.ndarray                 # length M; small but nonzero on Z for PG/FG
    y_filled: np.ndarray | None       # FG only: inferred gap responses y_Z
    report: SolveReport
    gamma: float | None = None        # PG only: penalty actually used
    eig: KroneckerEigen | None = None # eigendecomposition, when one was computed


def solve_gap_system(K: KroneckerOperator, idx: IndexSets, y_x, method: str,
                     sigma2: float, config: CGConfig | None = None, rank: int = 0,
                     gamma: float | None = None,
                     eig: KroneckerEigen | None = None) -> GapSolveResult:
    """Solve ``(K_XX + sigma^2 I) alpha_X = y_X`` by the chosen formulation.

    ``rank`` enables the rank-p preconditioner for IG and FG (ignored at 0);
    PG always uses its diagonal preconditioner. Setup work (eigendecomposition,
    preconditioner assembly, penalty selection) is timed separately from the
    CG solve in the returned report.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    cfg = config or CGConfig()
    y_x = np.asarray(y_x, dtype=np.float64).ravel()
    if y_x.size != idx.n_observed:
        raise ValueError(f"y_x has {y_x.size} entries, expected {idx.n_observed}")
    m = K.size

    setup_start = time.perf_counter()

    if method == "pg":
        if gamma is None:
            gamma = default_gamma(K, sigma2)
        op = pg_operator(K, idx, gamma, sigma2)
        precon = pg_preconditioner(idx, gamma, sigma2).squared()
        setup = time.perf_counter() - setup_start
        alpha, report = cg_solve(op, scatter(y_x, idx.x_indices, m), precon, cfg)
        report.precon_setup_seconds = setup
        return GapSolveResult(alpha, None, report, gamma=gamma, eig=eig)

    if method == "ig":
        op = ig_operator(K, idx, sigma2)
        precon = None
        if rank > 0:
            if eig is None:
                eig = kron_eig(K)
            precon = ig_preconditioner(eig, idx, rank, sigma2)
        setup = time.perf_counter() - setup_start
        alpha_x, report = cg_solve(op, y_x, precon, cfg)
        report.precon_setup_seconds = setup
        alpha = scatter(alpha_x, idx.x_indices, m)
        return GapSolveResult(alpha, None, report, eig=eig)

    # fill-gaps
    if eig is None:
        eig = kron_eig(K)
    if idx.n_gaps == 0:
        setup = time.perf_counter() - setup_start
        t0 = time.perf_counter()
        alpha = eig_solve(eig, sigma2, y_x)
        report = SolveReport(0, 0.0, True, wall_seconds=time.perf_counter() - t0,
                             precon_setup_seconds=setup)
        return GapSolveResult(alpha, np.empty(0), report, eig=eig)

    op, rhs = fg_operator(eig, idx, sigma2)
    precon = fg_preconditioner(eig, idx, rank, sigma2) if rank > 0 else None
    setup = time.perf_counter() - setup_start

    t0 = time.perf_counter()
    y_z, report = cg_solve(op, rhs(y_x), precon, cfg)
    alpha = fg_recover_alpha(eig, idx, sigma2, y_x, y_z)
    report.wall_seconds = time.perf_counter() - t0
    report.precon_setup_seconds = setup
    return GapSolveResult(alpha, y_z, report, eig=eig)
