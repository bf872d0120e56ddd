"""Finite-state Markov approximation of a Gaussian AR(1) in logs."""

import numpy as np
from scipy.stats import norm


def tauchen(rho, sigma, n_states=7, width_m=3.0):
    """Discretize ``x' = rho * x + sigma * eps`` on an evenly spaced grid.

    Parameters
    ----------
    rho : float
        Persistence, ``0 <= rho < 1``.
    sigma : float
        Conditional standard deviation of the innovation.
    n_states : int
        Number of grid points (at least 3).
    width_m : float
        Grid spans ``+/- width_m`` unconditional standard deviations.

    Returns
    -------
    grid : ndarray, shape (n_states,)
        Grid in logs, symmetric about zero.
    P : ndarray, shape (n_states, n_states)
        Row-stochastic transition matrix, ``P[i, j] = Pr(x'=grid[j] | x=grid[i])``.
    """
    if n_states < 3:
        raise ValueError(f"n_states must be >= 3, got {n_states}")
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")

    if sigma == 0.0:
        # degenerate process: a single effective state at zero
        grid = np.zeros(n_states)
        P = np.zeros((n_states, n_states))
        P[:, n_states // 2] = 1.0
        return grid, P

    sd_x = sigma / np.sqrt(1.0 - rho**2)
    grid = np.linspace(-width_m * sd_x, width_m * sd_x, n_states)
    # exact symmetry about 0
    grid = 0.5 * (grid - grid[::-1])
    half = 0.5 * (grid[1] - grid[0])

    mean = rho * grid[:, None]
    upper = norm.cdf((grid[None, :] + half - mean) / sigma)
    lower = norm.cdf((grid[None, :] - half - mean) / sigma)
    P = upper - lower
    P[:, 0] = upper[:, 0]
    P[:, -1] = 1.0 - lower[:, -1]
    P /= P.sum(axis=1, keepdims=True)
    return grid, P


def stationary_distribution(P, tol=1e-14, max_iter=100_000):
    """Stationary distribution of a row-stochastic matrix by power iteration."""
    n = P.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ P
        if np.max(np.abs(nxt - pi)) < tol:
            return nxt / nxt.sum()
        pi = nxt
    return pi / pi.sum()


def simulate_chain(P, T, rng, start=None):
    """Simulate ``T`` states of the Markov chain ``P`` (state indices)."""
    n = P.shape[0]
    cdf = np.cumsum(P, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(T)
    states = np.empty(T, dtype=np.int64)
    s = n // 2 if start is None else int(start)
    for t in range(T):
        s = int(np.searchsorted(cdf[s], u[t], side="right"))
        states[t] = s
    return states
