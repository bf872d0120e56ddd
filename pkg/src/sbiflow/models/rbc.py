"""Real business cycle model with fixed labor, solved by time iteration.

Timing: ``K_{t-1}`` is capital entering period ``t``, output is
``Y_t = Z_t K_{t-1}^alpha Lbar^(1-alpha)`` and the resource constraint is
``K_t = (1 - delta) K_{t-1} + Y_t - C_t``.  The consumption policy
``C(K, Z)`` is the fixed point of the Euler operator

    C^-gamma = beta E[ C(K', Z')^-gamma (alpha Z' K'^(alpha-1) Lbar^(1-alpha) + 1 - delta) ]

iterated with the endogenous-grid update on a log-spaced capital grid.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .base import PolicyGrid, SimulatorFailure, interp_extrap
from .tauchen import tauchen


@dataclass(frozen=True)
class RBCParams:
    alpha: float = 0.36
    beta: float = 0.96
    delta: float = 0.1
    rho: float = 0.9
    gamma: float = 2.0
    sigma_eps: float = 0.01
    labor: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "rho"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.gamma <= 0 or self.sigma_eps < 0 or self.labor <= 0:
            raise ValueError("gamma and labor must be positive, sigma_eps nonnegative")


@dataclass(frozen=True)
class RBCGridConfig:
    n_k: int = 100
    k_lo: float = 0.25  # multiples of K*
    k_hi: float = 4.0
    n_z: int = 7
    width_m: float = 3.0
    tol: float = 1e-9
    max_iter: int = 1000
    extra: dict = field(default_factory=dict)


def _tfp(p):
    return p.labor ** (1.0 - p.alpha)


def rbc_steady_state(p):
    """Deterministic steady state ``(K*, C*, Y*)`` with ``Zbar = 1``.

    ``K*`` is found by a bracketing root-finder on the Euler condition
    ``beta (alpha A K^(alpha-1) + 1 - delta) = 1``.
    """
    A = _tfp(p)

    def euler(k):
        return p.beta * (p.alpha * A * k ** (p.alpha - 1.0) + 1.0 - p.delta) - 1.0

    lo, hi = 1e-12, 1.0
    while euler(hi) > 0:
        hi *= 2.0
        if hi > 1e300:
            raise ValueError("no steady state found in bracket")
    if euler(lo) < 0:
        raise ValueError("no steady state found in bracket")
    k = brentq(euler, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    y = A * k**p.alpha
    c = y - p.delta * k
    return k, c, y


def _euler_rhs_marginal(p, k_next, c_next, z_levels, P):
    """beta * E[u'(C') R'] for each (k_next, current z index).

    c_next has shape (n_k, n_z) giving C(k_next, z_j).
    """
    A = _tfp(p)
    ret = p.alpha * z_levels[None, :] * A * k_next[:, None] ** (p.alpha - 1.0) + 1.0 - p.delta
    mu = c_next ** (-p.gamma) * ret  # (n_k, n_z')
    return p.beta * mu @ P.T  # (n_k, n_z)


def solve_rbc(params, grid_cfg=None):
    """Solve for the consumption policy on a (K, Z) grid.

    Returns a :class:`PolicyGrid` with ``policy`` of shape ``(n_k, n_z)``
    holding consumption.  Raises :class:`SimulatorFailure` when the
    iteration does not converge within ``grid_cfg.max_iter`` steps.
    """
    p = params
    g = grid_cfg or RBCGridConfig()
    kss, css, _ = rbc_steady_state(p)
    A = _tfp(p)
    k_grid = kss * np.exp(np.linspace(np.log(g.k_lo), np.log(g.k_hi), g.n_k))
    log_z, P = tauchen(p.rho, p.sigma_eps, g.n_z, g.width_m)
    z = np.exp(log_z)

    resources = z[None, :] * A * k_grid[:, None] ** p.alpha + (1.0 - p.delta) * k_grid[:, None]
    # initial guess: consume steady-state share of resources net of replacement
    c = np.maximum(resources - (1.0 - p.delta) * k_grid[:, None] - p.delta * kss, 0.0)
    c = np.maximum(c, 0.1 * resources)

    trace = []
    for _ in range(g.max_iter):
        rhs = _euler_rhs_marginal(p, k_grid, c, z, P)
        c_endo = rhs ** (-1.0 / p.gamma)  # (n_k over k', n_z)
        m_endo = c_endo + k_grid[:, None]
        c_new = np.empty_like(c)
        for j in range(g.n_z):
            c_new[:, j] = interp_extrap(resources[:, j], m_endo[:, j], c_endo[:, j])
        c_new = np.clip(c_new, 1e-12 * resources, resources * (1.0 - 1e-12))
        if not np.all(np.isfinite(c_new)):
            raise SimulatorFailure("non-finite consumption policy")
        dist = float(np.max(np.abs(c_new - c)) / css)
        trace.append(dist)
        c = c_new
        if dist < g.tol:
            break
    else:
        raise SimulatorFailure(f"time iteration did not converge in {g.max_iter} steps")

    return PolicyGrid(
        k_grid=k_grid,
        z_grid=z,
        policy=c,
        transition=P,
        trace=np.asarray(trace),
        info={"kss": kss, "css": css},
    )


def consumption(sol, p, k, z):
    """Interpolated consumption at arbitrary (k, z): linear in log K and log Z."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    lk_grid = np.log(sol.k_grid)
    cols = np.stack([interp_extrap(np.log(k), lk_grid, sol.policy[:, j]) for j in range(len(sol.z_grid))], axis=1)
    lz_grid = np.log(sol.z_grid)
    if np.ptp(lz_grid) == 0.0:
        return cols[:, len(lz_grid) // 2]
    lz = np.log(z)
    idx = np.clip(np.searchsorted(lz_grid, lz) - 1, 0, len(lz_grid) - 2)
    w = (lz - lz_grid[idx]) / (lz_grid[idx + 1] - lz_grid[idx])
    rows = np.arange(len(k))
    return (1.0 - w) * cols[rows, idx] + w * cols[rows, idx + 1]


def euler_residuals(sol, p, k, z_index):
    """Relative Euler residuals ``|1 - C_implied / C|`` at off-grid capital.

    ``z_index`` selects productivity on the solution grid, so the
    expectation over ``Z'`` is exact for the discretized process.
    """
    k = np.atleast_1d(np.asarray(k, dtype=float))
    A = _tfp(p)
    zi = np.atleast_1d(z_index)
    z = sol.z_grid[zi]
    c = consumption(sol, p, k, z)
    k_next = z * A * k**p.alpha + (1.0 - p.delta) * k - c
    c_next = np.stack([consumption(sol, p, k_next, np.full_like(k_next, zj)) for zj in sol.z_grid], axis=1)
    ret = p.alpha * sol.z_grid[None, :] * A * k_next[:, None] ** (p.alpha - 1.0) + 1.0 - p.delta
    expect = np.sum(sol.transition[zi] * c_next ** (-p.gamma) * ret, axis=1)
    c_implied = (p.beta * expect) ** (-1.0 / p.gamma)
    return np.abs(1.0 - c_implied / c)


def _simulate_path(p, sol, T, seed):
    """Full path rows of (K_{t-1}, K_t, Y_t, C_t, Z_t)."""
    A = _tfp(p)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(T) * p.sigma_eps
    lk_grid = np.log(sol.k_grid)
    lz_grid = np.log(sol.z_grid)
    flat_z = np.ptp(lz_grid) == 0.0
    pol = sol.policy
    nk, nz = pol.shape

    rows = np.empty((T, 5))
    k_prev = sol.info["kss"]
    log_z = 0.0
    for t in range(T):
        log_z = p.rho * log_z + eps[t]
        z = np.exp(log_z)
        y = z * A * k_prev**p.alpha
        lk = np.log(k_prev)
        i = min(max(int(np.searchsorted(lk_grid, lk)) - 1, 0), nk - 2)
        wk = (lk - lk_grid[i]) / (lk_grid[i + 1] - lk_grid[i])
        if flat_z:
            j, wz = nz // 2, 0.0
            jj = j
        else:
            j = min(max(int(np.searchsorted(lz_grid, log_z)) - 1, 0), nz - 2)
            wz = (log_z - lz_grid[j]) / (lz_grid[j + 1] - lz_grid[j])
            jj = j + 1
        c_lo = pol[i, j] + wk * (pol[i + 1, j] - pol[i, j])
        c_hi = pol[i, jj] + wk * (pol[i + 1, jj] - pol[i, jj])
        c = (1.0 - wz) * c_lo + wz * c_hi
        c = min(max(c, 1e-12), y + (1.0 - p.delta) * k_prev - 1e-12)
        k = (1.0 - p.delta) * k_prev + y - c
        rows[t] = (k_prev, k, y, c, z)
        k_prev = k
    if not np.all(np.isfinite(rows)):
        raise SimulatorFailure("non-finite simulated path")
    return rows


def simulate_rbc(params, T=200, burn_in=100, seed=0, grid_cfg=None, solution=None):
    """Simulate ``burn_in + T`` periods and return the last ``T`` rows of (C, I, Z).

    Log productivity follows the continuous AR(1) driven by seeded normal
    shocks; consumption comes from the interpolated policy.  Capital starts
    at the deterministic steady state.
    """
    _check_lengths(T, burn_in)
    sol = solution if solution is not None else solve_rbc(params, grid_cfg)
    rows = _simulate_path(params, sol, burn_in + T, seed)[burn_in:]
    c, y, z = rows[:, 3], rows[:, 2], rows[:, 4]
    return np.column_stack([c, y - c, z])


def simulate_rbc_accounts(params, T=200, burn_in=100, seed=0, grid_cfg=None, solution=None):
    """``T`` rows of (K_{t-1}, K_t, Y_t, C_t, Z_t) after burn-in, for accounting checks."""
    _check_lengths(T, burn_in)
    sol = solution if solution is not None else solve_rbc(params, grid_cfg)
    return _simulate_path(params, sol, burn_in + T, seed)[burn_in:]


def _check_lengths(T, burn_in):
    if T <= 0:
        raise ValueError("T must be positive")
    if burn_in < 0:
        raise ValueError("burn_in must be nonnegative")
