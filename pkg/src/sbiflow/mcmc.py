"""Random-walk Metropolis-Hastings and the Kalman-filter likelihood used as the exact baseline."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError

# stands in for log(0); finite so that differences never produce NaN
LOG_ZERO = -1e300
TARGET_ACCEPTANCE = 0.3
_LOG_2PI = math.log(2.0 * math.pi)


def _innovation_terms(S, v):
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NumericError("innovation covariance is not positive definite") from None
    alpha = np.linalg.solve(L, v)
    return 2.0 * np.log(np.diag(L)).sum(), float(alpha @ alpha), L


def _kalman_scalar(a, c, q, r, m, P, y):
    ll = 0.0
    for obs in y:
        m = a * m
        P = a * P * a + q
        S = c * P * c + r
        if not S > 0.0:
            raise NumericError("innovation variance is not positive")
        v = obs - c * m
        ll -= 0.5 * (_LOG_2PI + math.log(S) + v * v / S)
        K = P * c / S
        m = m + K * v
        one_kc = 1.0 - K * c
        P = one_kc * P * one_kc + K * r * K
    return ll


def kalman_loglik(ssm, panel):
    """Exact log-likelihood of a ``(T, n_obs)`` panel by the predict/update recursion.

    The covariance update uses the Joseph form.  Scalar models take a
    plain-float path that gives the same numbers much faster.
    """
    y = np.asarray(panel, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[1] != ssm.n_obs:
        raise DimensionError(f"panel has {y.shape[-1]} columns but C has {ssm.n_obs} rows")
    if ssm.n_state == 1 and ssm.n_obs == 1:
        return _kalman_scalar(
            float(ssm.A[0, 0]), float(ssm.C[0, 0]), float(ssm.Q[0, 0]), float(ssm.R[0, 0]),
            float(ssm.mu0[0]), float(ssm.Sigma0[0, 0]), y[:, 0].tolist(),
        )
    return kalman_loglik_dense(ssm, y)


def kalman_loglik_dense(ssm, y):
    A, C, Q, R = ssm.A, ssm.C, ssm.Q, ssm.R
    m, P = ssm.mu0.copy(), ssm.Sigma0.copy()
    eye = np.eye(ssm.n_state)
    ll = 0.0
    for obs in y:
        m = A @ m
        P = A @ P @ A.T + Q
        S = C @ P @ C.T + R
        v = obs - C @ m
        logdet, quad, L = _innovation_terms(S, v)
        ll -= 0.5 * (ssm.n_obs * _LOG_2PI + logdet + quad)
        K = np.linalg.solve(L.T, np.linalg.solve(L, C @ P)).T
        m = m + K @ v
        IKC = eye - K @ C
        P = IKC @ P @ IKC.T + K @ R @ K.T
        P = 0.5 * (P + P.T)
    return ll


@dataclass
class Chain:
    """Retained MH draws with their target log-densities and tuning record."""

    draws: np.ndarray
    log_density: np.ndarray
    accepted: int
    step_sizes: np.ndarray
    step_history: list = field(default_factory=list)
    burn_in: int = 0
    seed: int | None = None

    @property
    def n(self):
        return len(self.draws)

    @property
    def acceptance_rate(self):
        return self.accepted / max(self.n, 1)


def _as_log(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(np.isfinite(v), v, LOG_ZERO)


def mh_sample(
    log_target,
    init,
    steps,
    step_scale=0.5,
    rng=None,
    widths=None,
    burn_in=0,
    thin=1,
    adapt=True,
    vectorized=False,
    propose=None,
    adapt_window=50,
):
    """Random-walk Metropolis-Hastings with diagonal Gaussian proposals.

    Proposal sd per dimension is ``step_scale * widths``.  During the
    ``burn_in`` steps the scale is tuned towards 30% acceptance; afterwards
    it is frozen and ``steps`` draws are retained (every ``thin``-th state).

    ``init`` may be an ``(n_chains, dim)`` array; chains then advance in
    lockstep and ``log_target`` is called on all of them at once when
    ``vectorized`` is set.  Returns a ``Chain`` for a vector ``init`` and a
    list of chains otherwise.  ``propose(current, scale, rng)`` replaces
    the Gaussian proposal; it must be symmetric.
    """
    rng = rng if rng is not None else np.random.default_rng()
    x = np.array(init, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n_chains, dim = x.shape
    if steps < 1 or thin < 1 or burn_in < 0:
        raise ValueError("steps and thin must be >= 1 and burn_in >= 0")
    widths = np.ones(dim) if widths is None else np.broadcast_to(np.asarray(widths, dtype=float), (dim,))

    def evaluate(points):
        if vectorized:
            return _as_log(log_target(points))
        return _as_log([log_target(p) for p in points])

    lp = evaluate(x)
    if np.any(lp <= LOG_ZERO):
        raise ValueError("log_target must be finite at the initial state")
    log_scale = np.full(n_chains, math.log(step_scale))
    history = [float(step_scale)]
    window_acc = np.zeros(n_chains)
    total = burn_in + steps * thin
    draws = np.empty((steps, n_chains, dim))
    dens = np.empty((steps, n_chains))
    accepted = np.zeros(n_chains, dtype=np.int64)
    k = 0
    for t in range(total):
        scale = np.exp(log_scale)[:, None] * widths
        if propose is None:
            cand = x + scale * rng.standard_normal((n_chains, dim))
        else:
            cand = np.atleast_2d(propose(x, scale, rng))
        lp_cand = evaluate(cand)
        accept = np.log(rng.random(n_chains)) < lp_cand - lp
        x = np.where(accept[:, None], cand, x)
        lp = np.where(accept, lp_cand, lp)
        if t < burn_in:
            window_acc += accept
            if adapt and (t + 1) % adapt_window == 0:
                rate = window_acc / adapt_window
                gain = 1.0 / math.sqrt((t + 1) / adapt_window)
                log_scale += gain * (rate - TARGET_ACCEPTANCE) * 2.0
                window_acc[:] = 0.0
                history.append(float(np.exp(log_scale).mean()))
        else:
            accepted += accept
            if (t - burn_in) % thin == thin - 1:
                draws[k] = x
                dens[k] = lp
                k += 1
    chains = [
        Chain(
            draws=draws[:, c].copy(),
            log_density=dens[:, c].copy(),
            # acceptance counted per retained draw so that accepted <= n
            accepted=int(round(accepted[c] / thin)),
            step_sizes=np.exp(log_scale[c]) * widths,
            step_history=history,
            burn_in=burn_in,
        )
        for c in range(n_chains)
    ]
    return chains[0] if single else chains


@dataclass
class MHConfig:
    steps: int = 20000
    burn_in: int = 5000
    step_scale: float = 0.1
    thin: int = 1
    chains: int = 2
    min_acceptance: float = 0.01


def mh_posterior(ssm_builder, prior, panel, steps=None, cfg=None, rng=None, init=None):
    """MH on ``log prior + kalman_loglik``; one ``Chain`` per configured chain.

    Builder failures (invalid matrices at some theta) count as zero density.
    """
    cfg = cfg or MHConfig()
    steps = cfg.steps if steps is None else steps
    rng = rng if rng is not None else np.random.default_rng()

    def log_target(theta):
        lp = prior.log_pdf(theta)
        if lp <= LOG_ZERO:
            return LOG_ZERO
        try:
            ssm = ssm_builder(theta)
            return lp + kalman_loglik(ssm, panel)
        except (ValueError, NumericError):
            return LOG_ZERO

    if init is None:
        init = _feasible_starts(log_target, prior, cfg.chains, rng)
    chains = mh_sample(
        log_target, init, steps, cfg.step_scale, rng, widths=prior.widths, burn_in=cfg.burn_in, thin=cfg.thin
    )
    chains = chains if isinstance(chains, list) else [chains]
    rate = float(np.mean([c.acceptance_rate for c in chains]))
    if rate < cfg.min_acceptance:
        raise NumericError(f"MH acceptance {rate:.4f} below {cfg.min_acceptance} after adaptation")
    return chains


def _feasible_starts(log_target, prior, n, rng, tries=1000):
    starts = []
    for _ in range(tries):
        theta = prior.sample(1, rng)[0]
        if log_target(theta) > LOG_ZERO:
            starts.append(theta)
            if len(starts) == n:
                return np.array(starts)
    raise NumericError("no prior draw with positive target density")


def gelman_rubin(chains):
    """Potential scale reduction factor per dimension from two or more equal-length chains."""
    x = np.stack([np.asarray(c.draws if isinstance(c, Chain) else c, dtype=float) for c in chains])
    if x.ndim == 2:
        x = x[..., None]
    m, n, _ = x.shape
    if m < 2 or n < 2:
        raise ValueError("need at least two chains of length >= 2")
    means = x.mean(1)
    B = n * means.var(0, ddof=1)
    W = x.var(1, ddof=1).mean(0)
    var_hat = (n - 1) / n * W + B / n
    return np.sqrt(var_hat / W)


def pool(chains):
    return np.concatenate([c.draws for c in chains])
