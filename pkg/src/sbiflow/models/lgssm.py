"""Linear-Gaussian state-space models: the oracle-tractable test bed."""

from dataclasses import dataclass

import numpy as np


def _as_matrix(a):
    a = np.asarray(a, dtype=float)
    return a.reshape(1, 1) if a.ndim == 0 else a


@dataclass(frozen=True)
class LinearGaussianSSM:
    """``s_t = A s_{t-1} + w_t``, ``y_t = C s_t + v_t`` with ``w ~ N(0, Q)``, ``v ~ N(0, R)``.

    The initial state ``s_0 ~ N(mu0, Sigma0)`` is drawn before the first
    transition, so ``y_1`` observes ``A s_0 + w_1``.
    """

    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        for name in ("A", "C", "Q", "R", "Sigma0"):
            object.__setattr__(self, name, _as_matrix(getattr(self, name)))
        object.__setattr__(self, "mu0", np.atleast_1d(np.asarray(self.mu0, dtype=float)))
        n = self.A.shape[0]
        m = self.C.shape[0]
        if self.A.shape != (n, n) or self.C.shape != (m, n):
            raise ValueError("A must be square and C must have A's column count")
        if self.Q.shape != (n, n) or self.Sigma0.shape != (n, n) or self.mu0.shape != (n,):
            raise ValueError("Q, Sigma0, mu0 must match the state dimension")
        if self.R.shape != (m, m):
            raise ValueError("R must match the observation dimension")
        for name in ("Q", "R", "Sigma0"):
            M = getattr(self, name)
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M).min() < -1e-12 * max(1.0, np.abs(M).max()):
                raise ValueError(f"{name} must be positive semidefinite")

    @property
    def n_state(self):
        return self.A.shape[0]

    @property
    def n_obs(self):
        return self.C.shape[0]


def ar1_ssm(rho, sigma, obs_sd=0.0):
    """Scalar AR(1) state observed with optional noise, started from its stationary law."""
    var0 = sigma**2 / (1.0 - rho**2)
    return LinearGaussianSSM(
        A=[[rho]], C=[[1.0]], Q=[[sigma**2]], R=[[obs_sd**2]], mu0=[0.0], Sigma0=[[var0]]
    )


def _psd_factor(M):
    # eigen factor tolerates singular covariances (Q = 0, R = 0)
    w, U = np.linalg.eigh(M)
    return U * np.sqrt(np.clip(w, 0.0, None))


def simulate_lgssm(ssm, T, seed=0):
    """Simulate ``T`` observations, returning a ``(T, n_obs)`` panel."""
    if T <= 0:
        raise ValueError("T must be positive")
    rng = np.random.default_rng(seed)
    n, m = ssm.n_state, ssm.n_obs
    Lq, Lr, L0 = _psd_factor(ssm.Q), _psd_factor(ssm.R), _psd_factor(ssm.Sigma0)
    s = ssm.mu0 + L0 @ rng.standard_normal(n)
    w = rng.standard_normal((T, n))
    v = rng.standard_normal((T, m))
    out = np.empty((T, m))
    for t in range(T):
        s = ssm.A @ s + Lq @ w[t]
        out[t] = ssm.C @ s + Lr @ v[t]
    return out
