"""Synthetic datasets, dense brute-force oracles, and experiment runners.

Two stress-test workloads are provided: the two-dimensional Rastrigin
function evaluated on a grid, and a resonating elastic membrane (the 2-d wave
equation integrated by leapfrog finite differences) whose frames form a 3-d
space-time grid. Gaps are applied by masking cells uniformly at random.

:class:`DenseOracle` evaluates the kernel pairwise on all grid points and
factorizes the dense system directly; it is the ground truth every fast path
is checked against, and is capped to desk-scale problems.

The runners reproduce the two benchmark protocols at configurable scale:
a gappiness sweep timing full reconstructions per method, and a
preconditioner-efficacy study on random responses with a small noise floor.
All randomness flows through seeded PCG64 generators, so reports are
reproducible bit-for-bit (timing columns aside).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .grids import GappyDataset, GridSpec, IndexSets, atomic_write_bytes
from .kernels import ProductKernel, SquaredExponential
from .solvers import CGConfig, solve_gap_system

__all__ = [
    "DEFAULT_ORACLE_CAP",
    "OracleCapError",
    "DenseOracle",
    "dense_oracle_solve",
    "rastrigin_grid",
    "gen_rastrigin",
    "gen_wave_membrane",
    "wave_energy",
    "apply_gaps",
    "SweepConfig",
    "PreconStudyConfig",
    "SweepRow",
    "RelativeRow",
    "run_gappiness_sweep",
    "run_precon_study",
    "rows_to_csv",
    "CSV_COLUMNS",
    "RELATIVE_CSV_COLUMNS",
]

DEFAULT_ORACLE_CAP = 4096


class OracleCapError(ValueError):
    """Problem too large for the dense oracle."""


# ---------------------------------------------------------------------------
# Synthetic data generators.
# ---------------------------------------------------------------------------


def rastrigin_grid(nx: int, ny: int, domain: tuple[float, float] = (-2.0, 2.0)) -> GridSpec:
    lo, hi = domain
    return GridSpec((np.linspace(lo, hi, nx), np.linspace(lo, hi, ny)))


def gen_rastrigin(grid: GridSpec) -> GappyDataset:
    """Rastrigin responses ``20 + sum_i (x_i^2 - 10 cos 2 pi x_i)`` on a 2-d grid."""
    if grid.ndim != 2:
        raise ValueError("rastrigin generator needs a 2-d grid")
    x1, x2 = np.meshgrid(grid.axes[0], grid.axes[1], indexing="ij")
    y = 20.0 + (x1**2 - 10.0 * np.cos(2.0 * np.pi * x1)) + (x2**2 - 10.0 * np.cos(2.0 * np.pi * x2))
    return GappyDataset.fully_observed(grid, y.ravel())


def _smooth_random_field(nx: int, ny: int, seed: int, passes: int = 10) -> np.ndarray:
    # Seeded white noise smoothed by neighbor averaging; boundary pinned at 0
    # so the field is compatible with the membrane constraint.
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((nx, ny))
    u[0, :] = u[-1, :] = 0.0
    u[:, 0] = u[:, -1] = 0.0
    for _ in range(passes):
        interior = 0.25 * (u[:-2, 1:-1] + u[2:, 1:-1] + u[1:-1, :-2] + u[1:-1, 2:])
        u[1:-1, 1:-1] = interior
    peak = np.abs(u).max()
    return u / peak if peak > 0 else u


def gen_wave_membrane(nx: int, ny: int, nt: int, wave_speed: float = 1.0, seed: int = 0,
                      courant: float = 0.9,
                      initial_displacement: np.ndarray | None = None) -> GappyDataset:
    """Video of a membrane obeying ``u_x1x1 + u_x2x2 = u_x3x3`` on a 3-d grid.

    The membrane is clamped along the frame edges (zero Dirichlet every step)
    and starts from a smooth seeded random displacement at rest. Leapfrog time
    stepping with the step chosen as ``courant`` times the stability bound
    ``c dt sqrt(dx^-2 + dy^-2) <= 1``.
    """
    if nx < 3 or ny < 3 or nt < 1:
        raise ValueError("membrane needs nx, ny >= 3 and nt >= 1")
    if not 0 < courant <= 1:
        raise ValueError(f"courant={courant} violates the CFL stability bound")
    if not wave_speed > 0:
        raise ValueError("wave speed must be positive")

    dx = 1.0 / (nx - 1)
    dy = 1.0 / (ny - 1)
    dt = courant / (wave_speed * np.sqrt(dx**-2 + dy**-2))

    if initial_displacement is None:
        u = _smooth_random_field(nx, ny, seed)
    else:
        u = np.array(initial_displacement, dtype=np.float64)
        if u.shape != (nx, ny):
            raise ValueError(f"initial displacement must have shape {(nx, ny)}")

    cx = (wave_speed * dt / dx) ** 2
    cy = (wave_speed * dt / dy) ** 2

    def laplacian_term(v):
        out = np.zeros_like(v)
        out[1:-1, 1:-1] = cx * (v[2:, 1:-1] - 2 * v[1:-1, 1:-1] + v[:-2, 1:-1]) + cy * (
            v[1:-1, 2:] - 2 * v[1:-1, 1:-1] + v[1:-1, :-2]
        )
        return out

    frames = np.empty((nt, nx, ny))
    frames[0] = u
    if nt > 1:
        # zero initial velocity: first step is the half-accelerated Taylor step
        frames[1] = u + 0.5 * laplacian_term(u)
        frames[1][0, :] = frames[1][-1, :] = 0.0
        frames[1][:, 0] = frames[1][:, -1] = 0.0
    for n in range(2, nt):
        frames[n] = 2 * frames[n - 1] - frames[n - 2] + laplacian_term(frames[n - 1])
        frames[n][0, :] = frames[n][-1, :] = 0.0
        frames[n][:, 0] = frames[n][:, -1] = 0.0

    grid = GridSpec((np.linspace(0, 1, nx), np.linspace(0, 1, ny), dt * np.arange(nt)))
    # axes order (x1, x2, x3=time): frame k supplies the slice [:, :, k]
    y_full = np.transpose(frames, (1, 2, 0)).ravel()
    return GappyDataset.fully_observed(grid, y_full)


def wave_energy(frames: np.ndarray, dx: float, dy: float, dt: float, wave_speed: float) -> np.ndarray:
    """Discrete leapfrog energy at each half step; conserved by the scheme.

    ``E = 1/2 ||(u+ - u)/dt||^2 + c^2/2 <grad_h u+, grad_h u>`` summed with
    cell weights dx*dy; the mixed-step gradient product is what the scheme
    conserves exactly (up to round-off).
    """
    nt = frames.shape[0]
    energies = np.empty(nt - 1)
    c2 = wave_speed**2
    for n in range(nt - 1):
        a, b = frames[n], frames[n + 1]
        kinetic = 0.5 * np.sum(((b - a) / dt) ** 2)
        gx = np.sum((np.diff(b, axis=0) / dx) * (np.diff(a, axis=0) / dx))
        gy = np.sum((np.diff(b, axis=1) / dy) * (np.diff(a, axis=1) / dy))
        energies[n] = (kinetic + 0.5 * c2 * (gx + gy)) * dx * dy
    return energies


def apply_gaps(data: GappyDataset, gappiness: float, seed: int) -> GappyDataset:
    """Mask ``round(gappiness * M)`` cells uniformly at random (PCG64-seeded)."""
    if not 0 <= gappiness < 1:
        raise ValueError(f"gappiness must be in [0, 1), got {gappiness}")
    if data.y_full_oracle is None:
        raise ValueError("apply_gaps needs a fully known dataset (y_full_oracle)")
    m = data.grid.size
    n_gaps = int(round(gappiness * m))
    rng = np.random.default_rng(seed)
    z = np.sort(rng.choice(m, size=n_gaps, replace=False))
    mask = np.ones(m, dtype=bool)
    mask[z] = False
    idx = IndexSets.from_mask(mask)
    return GappyDataset(data.grid, idx, data.y_full_oracle[idx.x_indices],
                        y_full_oracle=data.y_full_oracle)


# ---------------------------------------------------------------------------
# Dense brute-force oracle.
# ---------------------------------------------------------------------------


class DenseOracle:
    """Direct dense evaluation of the GP equations for desk-scale checks.

    The kernel is evaluated pairwise on all grid points (no Kronecker
    shortcuts anywhere), the observed block is Cholesky-factorized, and every
    quantity of interest comes from dense solves.
    """

    def __init__(self, kernel: ProductKernel, data: GappyDataset, sigma2: float,
                 cap: int = DEFAULT_ORACLE_CAP):
        m = data.grid.size
        if m > cap:
            raise OracleCapError(f"grid size {m} exceeds the dense-oracle cap {cap}")
        self.kernel = kernel
        self.data = data
        self.sigma2 = sigma2
        pts = data.grid.all_points()
        k_full = np.ones((m, m))
        for l, kern in enumerate(kernel.kernels):
            k_full *= kern(pts[:, l], pts[:, l])
        if kernel.amplitude is not None:
            k_full *= kernel.amplitude
        self.points = pts
        self.k_full = k_full
        x, z = data.idx.x_indices, data.idx.z_indices
        self.k_xx = k_full[np.ix_(x, x)]
        self.k_zx = k_full[np.ix_(z, x)]
        self._factor = cho_factor(self.k_xx + sigma2 * np.eye(x.size))

    def alpha_x(self, y_x=None) -> np.ndarray:
        y_x = self.data.y_obs if y_x is None else np.asarray(y_x, dtype=np.float64)
        return cho_solve(self._factor, y_x)

    def y_z_expected(self, y_x=None) -> np.ndarray:
        """Posterior mean on the gaps, ``K_ZX (K_XX + s I)^-1 y_X``."""
        return self.k_zx @ self.alpha_x(y_x)

    def logdet(self) -> float:
        c, _ = self._factor
        return float(2.0 * np.sum(np.log(np.diag(c))))

    def log_marginal_likelihood(self, y_x=None) -> float:
        y_x = self.data.y_obs if y_x is None else np.asarray(y_x, dtype=np.float64)
        n = y_x.size
        return float(-0.5 * self.logdet() - 0.5 * y_x @ self.alpha_x(y_x)
                     - 0.5 * n * np.log(2 * np.pi))

    def _cross(self, x_star) -> np.ndarray:
        x_star = np.asarray(x_star, dtype=np.float64).ravel()
        g = np.ones(self.points.shape[0])
        for l, kern in enumerate(self.kernel.kernels):
            g *= kern(self.points[:, l], np.array([x_star[l]]))[:, 0]
        if self.kernel.amplitude is not None:
            g *= self.kernel.amplitude
        return g

    def posterior_mean(self, x_star, y_x=None) -> float:
        g_x = self._cross(x_star)[self.data.idx.x_indices]
        return float(g_x @ self.alpha_x(y_x))

    def posterior_var(self, x_star) -> float:
        g_x = self._cross(x_star)[self.data.idx.x_indices]
        return float(self.kernel.point_variance(x_star) - g_x @ cho_solve(self._factor, g_x))

    def full_alpha(self, y_full) -> np.ndarray:
        """Dense solve of the no-gap system ``(K + s I) alpha = y``."""
        m = self.k_full.shape[0]
        return np.linalg.solve(self.k_full + self.sigma2 * np.eye(m),
                               np.asarray(y_full, dtype=np.float64))


def dense_oracle_solve(data: GappyDataset, kernel: ProductKernel, sigma2: float,
                       cap: int = DEFAULT_ORACLE_CAP) -> dict:
    """One-shot oracle bundle: weights, expected gap fills, and the log-det."""
    oracle = DenseOracle(kernel, data, sigma2, cap=cap)
    return {
        "alpha_x": oracle.alpha_x(),
        "y_z_expected": oracle.y_z_expected(),
        "logdet": oracle.logdet(),
        "oracle": oracle,
    }


# ---------------------------------------------------------------------------
# Experiment runners.
# ---------------------------------------------------------------------------

CSV_COLUMNS = [
    "run_id", "M", "N", "L", "gappiness", "method", "rank_p", "gamma", "theta",
    "sigma2", "seed", "rep", "setup_seconds", "solve_seconds", "cg_iters",
    "rel_residual", "alpha_err_vs_oracle", "status",
]

RELATIVE_CSV_COLUMNS = [
    "method", "theta", "rank_p", "mean_cg_iters", "rel_solve_time",
    "rel_total_time", "n_reps",
]


@dataclass
class SweepRow:
    run_id: str
    M: int
    N: int
    L: int
    gappiness: float
    method: str
    rank_p: int
    gamma: float | None
    theta: str
    sigma2: float
    seed: int
    rep: int
    setup_seconds: float
    solve_seconds: float
    cg_iters: int
    rel_residual: float
    alpha_err_vs_oracle: float | None
    status: str


@dataclass
class RelativeRow:
    method: str
    theta: float
    rank_p: int
    mean_cg_iters: float
    rel_solve_time: float
    rel_total_time: float
    n_reps: int


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


def rows_to_csv(rows, path, columns=CSV_COLUMNS) -> None:
    """Write rows (dataclasses or dicts) with the fixed column order."""
    lines = [",".join(columns)]
    for row in rows:
        record = asdict(row) if not isinstance(row, dict) else row
        lines.append(",".join(_fmt(record[c]) for c in columns))
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode())


def _cell_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class SweepConfig:
    """Gappiness-sweep protocol: reconstruct one workload at many gap levels."""

    kind: str = "rastrigin"          # rastrigin | wave | random
    nx: int = 100
    ny: int = 100
    nt: int = 1                      # wave only
    wave_speed: float = 1.0
    domain: tuple[float, float] = (-2.0, 2.0)
    gappiness: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    runs: tuple[tuple[str, int], ...] = (("fg", 0), ("ig", 0))
    theta: tuple[float, ...] = (0.5,)
    sigma2: float = 1.0
    gamma: float | None = None
    cg_tolerance: float = 1e-6
    max_iters: int | None = None
    seed: int = 0
    repetitions: int = 1
    oracle_cap: int = 0              # 0 disables oracle comparison

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SweepConfig":
        obj = json.loads(text)
        obj["gappiness"] = tuple(obj.get("gappiness", ()))
        obj["runs"] = tuple((str(m), int(p)) for m, p in obj.get("runs", ()))
        obj["domain"] = tuple(obj.get("domain", (-2.0, 2.0)))
        theta = obj.get("theta", (0.5,))
        obj["theta"] = tuple(theta) if isinstance(theta, (list, tuple)) else (float(theta),)
        return cls(**obj)


def _sweep_dataset(cfg: SweepConfig) -> GappyDataset:
    if cfg.kind == "rastrigin":
        return gen_rastrigin(rastrigin_grid(cfg.nx, cfg.ny, cfg.domain))
    if cfg.kind == "wave":
        return gen_wave_membrane(cfg.nx, cfg.ny, cfg.nt, cfg.wave_speed, seed=cfg.seed)
    if cfg.kind == "random":
        lo, hi = cfg.domain
        grid = GridSpec((np.linspace(lo, hi, cfg.nx), np.linspace(lo, hi, cfg.ny)))
        rng = np.random.default_rng(cfg.seed)
        return GappyDataset.fully_observed(grid, rng.standard_normal(grid.size))
    raise ValueError(f"unknown workload kind {cfg.kind!r}")


def _sweep_kernel(cfg: SweepConfig, ndim: int) -> ProductKernel:
    thetas = cfg.theta if len(cfg.theta) == ndim else cfg.theta * ndim
    if len(thetas) != ndim:
        raise ValueError(f"theta must broadcast to {ndim} axes")
    return ProductKernel(tuple(SquaredExponential(t) for t in thetas))


def _sweep_cell(cfg: SweepConfig, k_op, kernel, full: GappyDataset, rep: int,
                gi: int) -> list[SweepRow]:
    gap = cfg.gappiness[gi]
    theta_label = "|".join("%.17g" % t for t in cfg.theta)
    cg = CGConfig(tolerance=cfg.cg_tolerance, max_iters=cfg.max_iters)
    data = apply_gaps(full, gap, _cell_seed(cfg.seed, rep, gi))
    oracle_alpha = None
    if 0 < data.grid.size <= cfg.oracle_cap:
        oracle_alpha = DenseOracle(kernel, data, cfg.sigma2, cap=cfg.oracle_cap).alpha_x()

    rows = []
    for method, rank in cfg.runs:
        run_id = f"{cfg.kind}-M{full.grid.size}-g{gap:g}-{method}-p{rank}-s{cfg.seed}-r{rep}"
        try:
            result = solve_gap_system(k_op, data.idx, data.y_obs, method, cfg.sigma2,
                                      config=cg, rank=rank, gamma=cfg.gamma)
            err = None
            if oracle_alpha is not None:
                got = result.alpha[data.idx.x_indices]
                err = float(np.linalg.norm(got - oracle_alpha)
                            / max(np.linalg.norm(oracle_alpha), 1e-300))
            status = "ok" if result.report.converged else f"failed:{result.report.status}"
            rows.append(SweepRow(
                run_id, full.grid.size, data.idx.n_observed, data.idx.n_gaps,
                gap, method, rank, result.gamma, theta_label, cfg.sigma2,
                cfg.seed, rep, result.report.precon_setup_seconds,
                result.report.wall_seconds, result.report.iterations,
                result.report.rel_residual, err, status))
        except Exception as exc:  # record the cell failure, keep sweeping
            rows.append(SweepRow(
                run_id, full.grid.size, data.idx.n_observed, data.idx.n_gaps,
                gap, method, rank, cfg.gamma, theta_label, cfg.sigma2,
                cfg.seed, rep, 0.0, 0.0, 0, float("nan"), None,
                f"failed:{type(exc).__name__}"))
    return rows


def run_gappiness_sweep(cfg: SweepConfig, jobs: int = 1) -> list[SweepRow]:
    """Time full reconstructions (fill + weight solve) per method and gap level.

    Cells (one per repetition and gap level) are independent; ``jobs > 1``
    runs them on a thread pool. Rows are sorted deterministically, so only the
    timing columns differ between runs with the same seed.
    """
    full = _sweep_dataset(cfg)
    kernel = _sweep_kernel(cfg, full.grid.ndim)
    k_op = kernel.grid_covariance(full.grid)
    cells = [(rep, gi) for rep in range(cfg.repetitions) for gi in range(len(cfg.gappiness))]

    rows: list[SweepRow] = []
    if jobs > 1 and len(cells) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for cell_rows in pool.map(
                    lambda c: _sweep_cell(cfg, k_op, kernel, full, *c), cells):
                rows.extend(cell_rows)
    else:
        for rep, gi in cells:
            rows.extend(_sweep_cell(cfg, k_op, kernel, full, rep, gi))
    rows.sort(key=lambda r: r.run_id)
    return rows


@dataclass
class PreconStudyConfig:
    """Preconditioner-efficacy protocol: random responses, fixed gappiness."""

    nx: int = 100
    ny: int = 100
    domain: tuple[float, float] = (0.0, 1.0)
    gappiness: float = 0.5
    sigma2: float = 1e-6
    thetas: tuple[float, ...] = (0.2, 0.5)
    ranks: tuple[int, ...] = (0, 100, 500, 1000)
    methods: tuple[str, ...] = ("ig",)
    cg_tolerance: float = 1e-6
    max_iters: int | None = None
    seed: int = 0
    repetitions: int = 5

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PreconStudyConfig":
        obj = json.loads(text)
        obj["domain"] = tuple(obj.get("domain", (0.0, 1.0)))
        obj["thetas"] = tuple(obj.get("thetas", (0.2,)))
        obj["ranks"] = tuple(int(p) for p in obj.get("ranks", (0,)))
        obj["methods"] = tuple(obj.get("methods", ("ig",)))
        return cls(**obj)


def run_precon_study(cfg: PreconStudyConfig) -> tuple[list[SweepRow], list[RelativeRow]]:
    """Sweep preconditioner rank and lengthscale on the random-response workload.

    Returns raw rows plus per-(method, theta, rank) relative timings: CG time
    relative to the rank-0 baseline, and the same with the preconditioner
    construction cost added (baseline setup, e.g. the eigendecomposition that
    fill-gaps always needs, is subtracted so the ratio isolates the
    preconditioner itself).
    """
    lo, hi = cfg.domain
    grid = GridSpec((np.linspace(lo, hi, cfg.nx), np.linspace(lo, hi, cfg.ny)))
    cg = CGConfig(tolerance=cfg.cg_tolerance, max_iters=cfg.max_iters)
    rows: list[SweepRow] = []
    timings: dict = {}

    for ti, theta in enumerate(cfg.thetas):
        kernel = ProductKernel((SquaredExponential(theta), SquaredExponential(theta)))
        k_op = kernel.grid_covariance(grid)
        for rep in range(cfg.repetitions):
            rng = np.random.default_rng(_cell_seed(cfg.seed, ti, rep, 1))
            full = GappyDataset.fully_observed(grid, rng.standard_normal(grid.size))
            data = apply_gaps(full, cfg.gappiness, _cell_seed(cfg.seed, ti, rep, 2))
            for method in cfg.methods:
                for p in cfg.ranks:
                    run_id = (f"precon-{method}-t{theta:g}-p{p}-s{cfg.seed}-r{rep}")
                    result = solve_gap_system(k_op, data.idx, data.y_obs, method,
                                              cfg.sigma2, config=cg, rank=p)
                    status = "ok" if result.report.converged else f"failed:{result.report.status}"
                    rows.append(SweepRow(
                        run_id, grid.size, data.idx.n_observed, data.idx.n_gaps,
                        cfg.gappiness, method, p, result.gamma, "%.17g" % theta,
                        cfg.sigma2, cfg.seed, rep, result.report.precon_setup_seconds,
                        result.report.wall_seconds, result.report.iterations,
                        result.report.rel_residual, None, status))
                    timings[(method, theta, p, rep)] = (
                        result.report.precon_setup_seconds,
                        result.report.wall_seconds,
                        result.report.iterations,
                    )

    baseline_rank = 0 if 0 in cfg.ranks else cfg.ranks[0]
    relative: list[RelativeRow] = []
    for method in cfg.methods:
        for theta in cfg.thetas:
            for p in cfg.ranks:
                ratios, totals, iters = [], [], []
                for rep in range(cfg.repetitions):
                    if (method, theta, p, rep) not in timings:
                        continue
                    setup, solve, n_iter = timings[(method, theta, p, rep)]
                    base_setup, base_solve, _ = timings[(method, theta, baseline_rank, rep)]
                    ratios.append(solve / base_solve)
                    totals.append((solve + setup - base_setup) / base_solve)
                    iters.append(n_iter)
                if ratios:
                    relative.append(RelativeRow(method, theta, p, float(np.mean(iters)),
                                                float(np.mean(ratios)), float(np.mean(totals)),
                                                len(ratios)))
    rows.sort(key=lambda r: r.run_id)
    return rows, relative
