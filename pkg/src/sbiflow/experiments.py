"""Named end-to-end studies with numeric results, runnable from the CLI and the acceptance suite.

Every study is a pure function of its seed: observed data, simulations,
network initialization, training order and sampling all come from named
streams of that seed, so rerunning a study reproduces its results dict.
"""

import math
import time

import numpy as np
import torch
from scipy import stats

from . import seeding
from .diagnostics import coverage, ks_distances, marginal_modes, wasserstein_distances
from .mcmc import MHConfig, gelman_rubin, kalman_loglik, mh_posterior, pool
from .models import get_model
from .models.cashflow import CashflowParams, VFIGridConfig, bellman_step, capital_grid, solve_cashflow_vfi
from .models.lgssm import ar1_ssm
from .models.tauchen import tauchen
from .snpe import EmbeddingConfig, SNPEConfig, UniformBoxPrior, run_snpe
from .snre import SNREConfig, run_snre

POSTERIOR_DRAWS = 10000


def observed_panel(model, theta, seed):
    """The pseudo-observed panel for a study: round index 0 of the shock stream."""
    return model(np.asarray(theta, dtype=float), seeding.int_seed(seed, "shocks", 0, 0))


def grid_posterior(x_obs, prior, noise_sd=1.0, n=20001):
    """Posterior of a Gaussian mean under a uniform prior, tabulated on a fine grid."""
    grid = np.linspace(prior.low[0], prior.high[0], n)
    y = np.asarray(x_obs, dtype=float).ravel()
    lp = -0.5 * len(y) * (grid - y.mean()) ** 2 / noise_sd**2
    w = np.exp(lp - lp.max())
    w /= w.sum()
    mean = float((w * grid).sum())
    sd = float(math.sqrt((w * (grid - mean) ** 2).sum()))
    return grid, np.cumsum(w), mean, sd


def _ks_to_grid(samples, grid, cdf):
    return float(stats.kstest(samples, lambda v: np.interp(v, grid, cdf)).statistic)


def _set_threads():
    # reproducibility across runs relies on single-threaded kernels
    torch.set_num_threads(1)


def kalman_oracle(seed=0, n_params=50, T=50):
    """Kalman log-likelihood against the dense joint-Gaussian density on random AR(1) instances."""
    rng = seeding.stream(seed, "prior", 0)
    worst = 0.0
    for _ in range(n_params):
        rho, sigma, obs_sd = rng.uniform(-0.95, 0.95), rng.uniform(0.1, 2.0), rng.uniform(0.05, 1.0)
        ssm = ar1_ssm(rho, sigma, obs_sd)
        y = rng.standard_normal(T)
        lags = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
        cov = sigma**2 / (1 - rho**2) * rho**lags + obs_sd**2 * np.eye(T)
        dense = float(stats.multivariate_normal(np.zeros(T), cov).logpdf(y))
        worst = max(worst, abs(kalman_loglik(ssm, y[:, None]) - dense))
    return {"max_abs_error": worst, "n_params": n_params, "T": T}


def _conjugate_config():
    return SNPEConfig(embedding=EmbeddingConfig(kind="recurrent"))


def conjugate(seed=0, sims=5000):
    """Single-round SNPE on the Gaussian-mean model against the grid posterior."""
    _set_threads()
    model = get_model("gaussian-mean")
    prior = UniformBoxPrior.from_model(model)
    x_obs = observed_panel(model, model.default_theta, seed)
    grid, cdf, mean, sd = grid_posterior(x_obs, prior, model.options["noise_sd"])
    t0 = time.perf_counter()
    post, manifest = run_snpe(model, prior, x_obs, R=1, S=sims, cfg=_conjugate_config(), seed=seed)
    draws = post.sample(POSTERIOR_DRAWS, seeding.stream(seed, "posterior"))[:, 0]
    return {
        "grid_mean": mean,
        "grid_sd": sd,
        "snpe_mean": float(draws.mean()),
        "snpe_sd": float(draws.std(ddof=1)),
        "mean_error_in_sd": abs(float(draws.mean()) - mean) / sd,
        "ks": _ks_to_grid(draws, grid, cdf),
        "best_val_loss": [h["best_val_loss"] for h in manifest["rounds"]],
    }, {"wall_s": time.perf_counter() - t0}


def proposal_shift(seed=0, sims=5000):
    """Two rounds where round 2 draws only from the upper half of the prior box."""
    _set_threads()
    model = get_model("gaussian-mean")
    prior = UniformBoxPrior.from_model(model)
    x_obs = observed_panel(model, model.default_theta, seed)
    grid, cdf, mean, sd = grid_posterior(x_obs, prior, model.options["noise_sd"])
    mid = 0.5 * (np.asarray(prior.low) + np.asarray(prior.high))
    upper = prior.restrict(low=mid)
    t0 = time.perf_counter()
    post, manifest = run_snpe(
        model, prior, x_obs, R=2, S=sims, cfg=_conjugate_config(), seed=seed, proposals={2: upper}
    )
    draws = post.sample(POSTERIOR_DRAWS, seeding.stream(seed, "posterior"))[:, 0]
    return {
        "grid_mean": mean,
        "grid_sd": sd,
        "snpe_mean": float(draws.mean()),
        "snpe_sd": float(draws.std(ddof=1)),
        "mean_error_in_sd": abs(float(draws.mean()) - mean) / sd,
        "ks": _ks_to_grid(draws, grid, cdf),
        "round2_low": upper.low[0],
        "round_sizes": manifest["round_sizes"],
    }, {"wall_s": time.perf_counter() - t0}


def ar1_comparison(seed=0, sims=5000, rounds=2, with_snre=True):
    """MH + Kalman oracle, SNPE and SNRE on the AR(1)-plus-noise model."""
    _set_threads()
    model = get_model("lgssm-ar1")
    prior = UniformBoxPrior.from_model(model)
    x_obs = observed_panel(model, model.default_theta, seed)
    timing = {}

    t0 = time.perf_counter()
    chains = mh_posterior(model.ssm_builder, prior, x_obs, cfg=MHConfig(), rng=seeding.stream(seed, "mh"))
    mh = pool(chains)
    timing["mh_s"] = time.perf_counter() - t0

    cfg = SNPEConfig(embedding=EmbeddingConfig(kind="recurrent"))
    t0 = time.perf_counter()
    post, _ = run_snpe(model, prior, x_obs, R=rounds, S=sims, cfg=cfg, seed=seed)
    snpe = post.sample(POSTERIOR_DRAWS, seeding.stream(seed, "posterior"))
    timing["snpe_s"] = time.perf_counter() - t0

    mh_mean, mh_sd = mh.mean(0), mh.std(0, ddof=1)
    out = {
        "truth": list(model.default_theta),
        "mh_mean": mh_mean.tolist(),
        "mh_sd": mh_sd.tolist(),
        "mh_acceptance": [c.acceptance_rate for c in chains],
        "gelman_rubin": gelman_rubin(chains).tolist(),
        "snpe_mean": snpe.mean(0).tolist(),
        "snpe_sd": snpe.std(0, ddof=1).tolist(),
        "snpe_mean_gap_in_mh_sd": (np.abs(snpe.mean(0) - mh_mean) / mh_sd).tolist(),
        "w1_snpe_mh": wasserstein_distances(snpe, mh, prior.widths).tolist(),
    }
    if with_snre:
        t0 = time.perf_counter()
        rpost, rman = run_snre(
            model, prior, x_obs, R=rounds, S=sims, cfg=SNREConfig(embedding=EmbeddingConfig(kind="recurrent")),
            seed=seed,
        )
        snre = rpost.sample(POSTERIOR_DRAWS, seeding.stream(seed, "posterior"))
        timing["snre_s"] = time.perf_counter() - t0
        out.update(
            {
                "snre_mean": snre.mean(0).tolist(),
                "snre_sd": snre.std(0, ddof=1).tolist(),
                "snre_acceptance": rpost.acceptance_rate,
                "w1_snre_snpe": wasserstein_distances(snre, snpe, prior.widths).tolist(),
                "w1_snre_mh": wasserstein_distances(snre, mh, prior.widths).tolist(),
            }
        )
    return out, timing


def rbc(seed=0, sims=5000, rounds=2):
    """SNPE on the four-parameter RBC model at its documented parameter values."""
    _set_threads()
    model = get_model("rbc")
    prior = UniformBoxPrior.from_model(model)
    truth = np.asarray(model.default_theta)
    x_obs = observed_panel(model, truth, seed)
    t0 = time.perf_counter()
    post, manifest = run_snpe(model, prior, x_obs, R=rounds, S=sims, seed=seed)
    draws = post.sample(POSTERIOR_DRAWS, seeding.stream(seed, "posterior"))
    mass = post.box_mass(rng=seeding.stream(seed, "posterior", 1))
    log_post = float(post.log_prob(truth, box_mass=mass)[0])
    covered = coverage(draws, truth)
    return {
        "truth": truth.tolist(),
        "mean": draws.mean(0).tolist(),
        "sd": draws.std(0, ddof=1).tolist(),
        "q025": np.quantile(draws, 0.025, axis=0).tolist(),
        "q975": np.quantile(draws, 0.975, axis=0).tolist(),
        "covered_95": [bool(c) for c in covered],
        "n_covered": int(covered.sum()),
        "log_posterior_at_truth": log_post,
        "log_prior_at_truth": float(prior.log_pdf(truth)),
        "box_mass": mass,
        "failures": [h["n_failed"] for h in manifest["rounds"]],
    }, {"wall_s": time.perf_counter() - t0}


def bellman_bruteforce(V, k_grid, z_grid, P, p):
    """Bellman update written as explicit loops over every state and choice."""
    nk, nz = V.shape
    out = np.empty_like(V)
    for i in range(nk):
        for j in range(nz):
            best = -np.inf
            for m in range(nk):
                ev = sum(P[j, jj] * V[m, jj] for jj in range(nz))
                val = (
                    z_grid[j] * k_grid[i] ** p.alpha
                    - (k_grid[m] - (1 - p.delta) * k_grid[i])
                    + p.beta * ev
                )
                best = max(best, val)
            out[i, j] = best
    return out


def vfi_checks(params=None):
    """Tiny-instance Bellman iterates against loops, plus the observed contraction factor."""
    p = params or CashflowParams()
    tiny = VFIGridConfig(n_k=5, n_z=3)
    log_z, P = tauchen(p.rho, p.sigma, tiny.n_z)
    z = np.exp(log_z)
    k = capital_grid(p, log_z, P, tiny)
    V_fast = np.zeros((tiny.n_k, tiny.n_z))
    V_slow = np.zeros((tiny.n_k, tiny.n_z))
    err = 0.0
    for _ in range(3):
        V_fast, _ = bellman_step(V_fast, k, z, P, p)
        V_slow = bellman_bruteforce(V_slow, k, z, P, p)
        err = max(err, float(np.abs(V_fast - V_slow).max()))
    sol = solve_cashflow_vfi(p, VFIGridConfig())
    trace = np.asarray(sol.trace)
    ratios = trace[1:] / trace[:-1]
    # skip the transient before the maximizing choices settle
    tail = ratios[len(ratios) // 2 :]
    return {"bruteforce_max_error": err, "max_contraction": float(tail.max()), "beta": p.beta}


def cashflow(seed=0, sims=5000, rounds=2):
    """VFI checks plus SNPE on the cash-flow model; reports marginal posterior modes."""
    _set_threads()
    t0 = time.perf_counter()
    out = vfi_checks()
    model = get_model("cashflow")
    prior = UniformBoxPrior.from_model(model)
    truth = np.asarray(model.default_theta)
    x_obs = observed_panel(model, truth, seed)
    post, manifest = run_snpe(model, prior, x_obs, R=rounds, S=sims, seed=seed)
    draws = post.sample(POSTERIOR_DRAWS, seeding.stream(seed, "posterior"))
    modes = marginal_modes(draws, prior.low, prior.high)
    names = list(model.param_names)
    out.update(
        {
            "truth": truth.tolist(),
            "mode": modes.tolist(),
            "mean": draws.mean(0).tolist(),
            "sd": draws.std(0, ddof=1).tolist(),
            "mode_error": np.abs(modes - truth).tolist(),
            "alpha_mode_error": float(abs(modes[names.index("alpha")] - truth[names.index("alpha")])),
            "rho_mode_error": float(abs(modes[names.index("rho")] - truth[names.index("rho")])),
            "failures": [h["n_failed"] for h in manifest["rounds"]],
        }
    )
    return out, {"wall_s": time.perf_counter() - t0}


def _timed(fn):
    def run(seed):
        t0 = time.perf_counter()
        return fn(seed), {"wall_s": time.perf_counter() - t0}

    return run


EXPERIMENTS = {
    "kalman-oracle": _timed(kalman_oracle),
    "conjugate": conjugate,
    "proposal-shift": proposal_shift,
    "ar1": ar1_comparison,
    "rbc": rbc,
    "cashflow": cashflow,
}


def run_experiment(name, seed=0):
    try:
        fn = EXPERIMENTS[name]
    except KeyError:
        raise KeyError(f"unknown experiment {name!r}; available: {sorted(EXPERIMENTS)}") from None
    return fn(seed)
