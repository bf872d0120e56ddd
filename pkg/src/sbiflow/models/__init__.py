"""Simulator registry.

Every registered model is a pure function of ``(theta, seed)`` returning a
``(T, V)`` panel, plus the metadata the estimators and the CLI need.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .base import PolicyGrid, SimulatorFailure, interp_extrap
from .cashflow import CashflowParams, VFIGridConfig, bellman_step, simulate_cashflow, solve_cashflow_vfi
from .lgssm import LinearGaussianSSM, ar1_ssm, simulate_lgssm
from .rbc import (
    RBCGridConfig,
    RBCParams,
    euler_residuals,
    rbc_steady_state,
    simulate_rbc,
    simulate_rbc_accounts,
    solve_rbc,
)
from .tauchen import simulate_chain, stationary_distribution, tauchen

MODEL_VERSION = "1"


@dataclass(frozen=True)
class Model:
    name: str
    param_names: tuple
    low: tuple
    high: tuple
    observables: tuple
    default_theta: tuple
    simulate_fn: Callable
    # rows returned; burn_in extra periods are simulated first and dropped
    T: int
    burn_in: int = 0
    # observables modelled on the log scale by the summary networks
    log_observables: tuple = ()
    ssm_builder: Callable | None = None
    options: dict = field(default_factory=dict)

    @property
    def dim(self):
        return len(self.param_names)

    @property
    def n_rows(self):
        return self.T

    def __call__(self, theta, seed, T=None, burn_in=None):
        T = self.T if T is None else int(T)
        burn_in = self.burn_in if burn_in is None else int(burn_in)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"{self.name} expects {self.dim} parameters, got shape {theta.shape}")
        try:
            out = self.simulate_fn(theta, T, burn_in, int(seed), **self.options)
        except ValueError as exc:
            raise SimulatorFailure(str(exc)) from exc
        out = np.asarray(out, dtype=float)
        if not np.all(np.isfinite(out)):
            raise SimulatorFailure("non-finite simulator output")
        return out


def _sim_rbc(theta, T, burn_in, seed, sigma_eps=0.01, gamma=2.0):
    alpha, beta, delta, rho = theta
    p = RBCParams(alpha=alpha, beta=beta, delta=delta, rho=rho, gamma=gamma, sigma_eps=sigma_eps)
    return simulate_rbc(p, T=T, burn_in=burn_in, seed=seed)


def _sim_cashflow(theta, T, burn_in, seed, r=0.05):
    alpha, delta, rho, sigma = theta
    p = CashflowParams(alpha=alpha, delta=delta, rho=rho, sigma=sigma, r=r)
    return simulate_cashflow(p, T=T, burn_in=burn_in, seed=seed)


def _ar1_builder(theta, obs_sd=0.1):
    rho, sigma = theta
    return ar1_ssm(rho, sigma, obs_sd)


def _sim_ar1(theta, T, burn_in, seed, obs_sd=0.1):
    return simulate_lgssm(_ar1_builder(theta, obs_sd), T + burn_in, seed)[burn_in:]


def _sim_gaussian_mean(theta, T, burn_in, seed, noise_sd=1.0):
    rng = np.random.default_rng(seed)
    return theta[0] + noise_sd * rng.standard_normal((T, 1))


def _sim_noise(theta, T, burn_in, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((T, 1))


REGISTRY = {
    "rbc": Model(
        name="rbc",
        param_names=("alpha", "beta", "delta", "rho"),
        low=(0.2, 0.9, 0.02, 0.5),
        high=(0.6, 0.999, 0.2, 0.99),
        observables=("C", "I", "Z"),
        default_theta=(0.36, 0.96, 0.1, 0.9),
        simulate_fn=_sim_rbc,
        T=200,
        burn_in=100,
        options={"sigma_eps": 0.01, "gamma": 2.0},
    ),
    "cashflow": Model(
        name="cashflow",
        param_names=("alpha", "delta", "rho", "sigma"),
        low=(0.2, 0.02, 0.5, 0.0),
        high=(0.6, 0.2, 0.99, 1.0),
        observables=("K",),
        default_theta=(0.4, 0.15, 0.7, 0.2),
        simulate_fn=_sim_cashflow,
        T=200,
        burn_in=100,
        log_observables=("K",),
        options={"r": 0.05},
    ),
    "lgssm-ar1": Model(
        name="lgssm-ar1",
        param_names=("rho", "sigma"),
        low=(0.0, 0.05),
        high=(0.99, 1.0),
        observables=("y",),
        default_theta=(0.7, 0.3),
        simulate_fn=_sim_ar1,
        T=100,
        burn_in=0,
        ssm_builder=_ar1_builder,
        options={"obs_sd": 0.1},
    ),
    "gaussian-mean": Model(
        name="gaussian-mean",
        param_names=("mu",),
        low=(-3.0,),
        high=(3.0,),
        observables=("y",),
        default_theta=(0.5,),
        simulate_fn=_sim_gaussian_mean,
        T=20,
        burn_in=0,
        options={"noise_sd": 1.0},
    ),
    "noise": Model(
        name="noise",
        param_names=("a", "b"),
        low=(0.0, 0.0),
        high=(1.0, 1.0),
        observables=("y",),
        default_theta=(0.5, 0.5),
        simulate_fn=_sim_noise,
        T=20,
        burn_in=0,
    ),
}


def get_model(name):
    try:
        return REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; registered: {sorted(REGISTRY)}") from None


__all__ = [
    "MODEL_VERSION",
    "REGISTRY",
    "CashflowParams",
    "LinearGaussianSSM",
    "Model",
    "PolicyGrid",
    "RBCGridConfig",
    "RBCParams",
    "SimulatorFailure",
    "VFIGridConfig",
    "ar1_ssm",
    "bellman_step",
    "euler_residuals",
    "get_model",
    "interp_extrap",
    "rbc_steady_state",
    "simulate_cashflow",
    "simulate_chain",
    "simulate_lgssm",
    "simulate_rbc",
    "simulate_rbc_accounts",
    "solve_cashflow_vfi",
    "solve_rbc",
    "stationary_distribution",
    "tauchen",
]
