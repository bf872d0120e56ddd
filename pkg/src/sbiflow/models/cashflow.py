"""Partial-equilibrium capital formation model solved by value function iteration.

A risk-neutral manager with state ``(K, Z)`` solves

    V(K, Z) = max_{K'}  Z K^alpha - (K' - (1 - delta) K) + beta E[V(K', Z') | Z]

with ``beta = 1 / (1 + r)`` and ``log Z`` a Tauchen-discretized AR(1).
The choice ``K'`` is restricted to the capital grid.
"""

from dataclasses import dataclass

import numpy as np

from .base import PolicyGrid, SimulatorFailure
from .tauchen import simulate_chain, tauchen


@dataclass(frozen=True)
class CashflowParams:
    alpha: float = 0.4
    delta: float = 0.15
    rho: float = 0.7
    sigma: float = 0.2
    r: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")

    @property
    def beta(self):
        return 1.0 / (1.0 + self.r)


@dataclass(frozen=True)
class VFIGridConfig:
    n_k: int = 100
    n_z: int = 7
    width_m: float = 3.0
    tol: float = 1e-6
    max_iter: int = 5000
    pad: float = 2.0  # grid extends this factor beyond the optimal capital range


def _target_capital(p, log_z_grid, P):
    """Frictionless optimum K'(z) = (alpha E[Z'|z] / (r + delta))^(1/(1-alpha))."""
    ez = P @ np.exp(log_z_grid)
    return (p.alpha * ez / (p.r + p.delta)) ** (1.0 / (1.0 - p.alpha))


def capital_grid(p, log_z_grid, P, g):
    target = _target_capital(p, log_z_grid, P)
    lo = np.log(target.min() / g.pad)
    hi = np.log(target.max() * g.pad)
    return np.exp(np.linspace(lo, hi, g.n_k))


def bellman_step(V, k_grid, z_grid, P, p):
    """One application of the Bellman operator.

    Returns the updated value array ``(n_k, n_z)`` and the maximizing
    next-capital index for every state.
    """
    ev = V @ P.T  # ev[i', j] = E[V(k_i', Z') | z_j]
    # choice part -k' + beta E V(k', Z') does not depend on current K
    choice = -k_grid[:, None] + p.beta * ev
    best = np.argmax(choice, axis=0)  # (n_z,)
    cont = choice[best, np.arange(len(z_grid))]
    flow = z_grid[None, :] * k_grid[:, None] ** p.alpha + (1.0 - p.delta) * k_grid[:, None]
    V_new = flow + cont[None, :]
    policy = np.broadcast_to(best, V.shape).copy()
    return V_new, policy


def solve_cashflow_vfi(params, grid_cfg=None):
    """Iterate the Bellman operator from ``V = 0`` to a sup-norm fixed point.

    The returned :class:`PolicyGrid` carries ``policy`` as integer indices
    into ``k_grid`` and ``trace`` as successive sup-norm changes.
    """
    p = params
    g = grid_cfg or VFIGridConfig()
    log_z, P = tauchen(p.rho, p.sigma, g.n_z, g.width_m)
    z = np.exp(log_z)
    k_grid = capital_grid(p, log_z, P, g)

    V = np.zeros((g.n_k, g.n_z))
    trace = []
    for _ in range(g.max_iter):
        V_new, policy = bellman_step(V, k_grid, z, P, p)
        if not np.all(np.isfinite(V_new)):
            raise SimulatorFailure("non-finite value function")
        dist = float(np.max(np.abs(V_new - V)))
        trace.append(dist)
        V = V_new
        if dist < g.tol:
            break
    else:
        raise SimulatorFailure(f"VFI did not converge in {g.max_iter} iterations")

    return PolicyGrid(
        k_grid=k_grid,
        z_grid=z,
        policy=policy,
        transition=P,
        value=V,
        trace=np.asarray(trace),
        info={"log_z_grid": log_z},
    )


def simulate_cashflow(params, T=200, burn_in=100, seed=0, grid_cfg=None, solution=None):
    """Capital path after burn-in as a ``(T, 1)`` panel.

    The discretized productivity chain is drawn with the seeded generator;
    capital starts at the grid point closest to the median-state optimum.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    if burn_in < 0:
        raise ValueError("burn_in must be nonnegative")
    sol = solution if solution is not None else solve_cashflow_vfi(params, grid_cfg)
    T = T + burn_in
    rng = np.random.default_rng(seed)
    n_z = len(sol.z_grid)
    states = simulate_chain(sol.transition, T, rng, start=n_z // 2)

    k_target = _target_capital(params, sol.info["log_z_grid"], sol.transition)[n_z // 2]
    i = int(np.argmin(np.abs(np.log(sol.k_grid) - np.log(k_target))))
    path = np.empty(T)
    for t in range(T):
        path[t] = sol.k_grid[i]
        i = int(sol.policy[i, states[t]])
    return path[burn_in:, None]
