"""Sequential neural ratio estimation.

A classifier ``d(x, theta)`` learns to pick the parameter that generated
``x`` out of ``K`` candidates; the other candidates are parameters from
other rows of the batch.  At the optimum ``exp(d)`` is proportional to
``p(x | theta) / p(x)``, so ``d(x_obs, theta) + log p(theta)`` is an
unnormalized log-posterior, sampled here by random-walk MH.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import seeding
from .diff import DTYPE, Activation, ParamStore, TrainConfig, as_tensor, train
from .embed import build_embedding, make_embedding
from .errors import ContractError, NumericError, SimulationBudgetExceeded
from .mcmc import LOG_ZERO, mh_sample
from .snpe import (
    EmbeddingConfig,
    RoundDataset,
    UniformBoxPrior,
    _describe,
    _log_vars,
    contrast_indices,
    draw_proposal,
    simulate_batch,
)

log = logging.getLogger(__name__)


class RatioClassifier(nn.Module):
    """Feed-forward logit over ``[embedded x, standardized theta]``."""

    def __init__(self, dim, embedding=None, context_dim=None, hidden=(64, 64, 64), slope=0.01,
                 theta_mean=None, theta_std=None):
        super().__init__()
        self.dim = dim
        self.embedding = embedding
        self.context_dim = embedding.output_dim if embedding is not None else int(context_dim)
        self.hidden_sizes, self.slope = tuple(hidden), slope
        mean = np.zeros(dim) if theta_mean is None else np.asarray(theta_mean, dtype=float)
        std = np.ones(dim) if theta_std is None else np.asarray(theta_std, dtype=float)
        self.register_buffer("theta_mean", torch.as_tensor(mean, dtype=DTYPE))
        self.register_buffer("theta_std", torch.as_tensor(std, dtype=DTYPE))
        sizes = (self.context_dim + dim, *self.hidden_sizes, 1)
        self.linears = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:]))
        self.act = Activation("leaky_relu", slope)

    def context(self, x):
        return as_tensor(x) if self.embedding is None else self.embedding(as_tensor(x))

    def logit_ctx(self, theta, ctx):
        theta = as_tensor(theta)
        if ctx.shape[0] == 1 and theta.shape[0] > 1:
            ctx = ctx.expand(theta.shape[0], -1)
        h = torch.cat([ctx, (theta - self.theta_mean) / self.theta_std], dim=-1)
        for i, layer in enumerate(self.linears):
            h = layer(h)
            if i < len(self.linears) - 1:
                h = self.act(h)
        return h[:, 0]

    def logit(self, theta, x):
        return self.logit_ctx(theta, self.context(x))

    def descriptor(self):
        return {
            "dim": self.dim,
            "context_dim": self.context_dim,
            "hidden": list(self.hidden_sizes),
            "slope": self.slope,
            "theta_mean": self.theta_mean.tolist(),
            "theta_std": self.theta_std.tolist(),
            "embedding": None if self.embedding is None else self.embedding.descriptor(),
        }


def contrastive_loss(clf, theta, x, K, rng):
    """Mean of ``-log softmax`` of the true pairing among ``K`` candidates per row.

    Candidate 0 is the row's own parameter; the other ``K - 1`` are drawn
    without replacement from the other rows of the batch.
    """
    theta = as_tensor(theta)
    n, dim = theta.shape
    if K < 2:
        raise ContractError("contrastive loss needs K >= 2")
    if K > n:
        raise ContractError(f"K={K} exceeds the batch size {n}")
    ctx = clf.context(x)
    cand = np.concatenate([np.arange(n)[:, None], contrast_indices(n, K - 1, rng)], axis=1)
    theta_c = theta[torch.as_tensor(cand)].reshape(n * K, dim)
    logits = clf.logit_ctx(theta_c, ctx.repeat_interleave(K, dim=0)).reshape(n, K)
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def ratio_to_discriminator(r):
    """Optimal discriminator probability ``r / (1 + r)`` for a density ratio ``r >= 0``."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise ValueError("density ratio must be nonnegative")
    out = np.where(np.isinf(r), 1.0, r / (1.0 + np.where(np.isinf(r), 0.0, r)))
    return float(out) if out.ndim == 0 else out


@dataclass
class SamplerConfig:
    chains: int = 20
    burn_in: int = 1000
    thin: int = 5
    step_scale: float = 0.05


@dataclass
class SNREConfig:
    contrasts: int = 10
    hidden: tuple = (64, 64, 64)
    slope: float = 0.01
    min_round_size: int = 20
    max_failure_rate: float = 0.2
    min_acceptance: float = 0.01
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)


class RatioPosterior:
    """Unnormalized posterior ``exp(d(x_obs, theta)) p(theta)``, sampled by MH."""

    def __init__(self, clf, x_obs, prior, round_index=0, sampler=None, min_acceptance=0.01):
        self.clf = clf
        self.x_obs = None if x_obs is None else np.asarray(x_obs, dtype=np.float64)
        self.prior = prior
        self.round = round_index
        self.sampler = sampler or SamplerConfig()
        self.min_acceptance = min_acceptance
        self.acceptance_rate = None
        self._ctx = None
        if clf is not None:
            with torch.no_grad():
                self._ctx = clf.context(self.x_obs[None]).detach()
        self._fn = None

    @classmethod
    def from_function(cls, log_ratio, prior, **kwargs):
        """Wrap a plain vectorized ``theta -> d`` function (useful for checks)."""
        post = cls(None, None, prior, **kwargs)
        post._fn = log_ratio
        return post

    def log_ratio(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if self._fn is not None:
            return np.asarray(self._fn(theta), dtype=float)
        with torch.no_grad():
            return self.clf.logit_ctx(torch.as_tensor(theta), self._ctx).numpy()

    def log_prob(self, theta):
        """``d + log p`` at each row; ``LOG_ZERO`` outside the prior box."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        inside = self.prior.contains(theta)
        out = np.full(len(theta), LOG_ZERO)
        if inside.any():
            out[inside] = self.log_ratio(theta[inside]) + self.prior.log_pdf(theta[inside])
        return out

    def sample(self, n, rng):
        return sample_ratio_posterior(self, n, rng)

    def describe(self):
        return {"kind": "ratio_posterior", "round": self.round}


def sample_ratio_posterior(post, n, rng):
    """Parallel random-walk MH chains, tuned during burn-in, thinned and pooled to ``n`` draws."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = post.sampler
    init = post.prior.sample(max(50 * cfg.chains, 1000), rng)
    lp = post.log_prob(init)
    # start from the best of a prior sweep so short burn-ins suffice
    init = init[np.argsort(-lp, kind="stable")[: cfg.chains]]
    steps = -(-n // cfg.chains)
    chains = mh_sample(
        post.log_prob, init, steps, cfg.step_scale, rng, widths=post.prior.widths,
        burn_in=cfg.burn_in, thin=cfg.thin, vectorized=True,
    )
    rate = float(np.mean([c.acceptance_rate for c in chains]))
    post.acceptance_rate = rate
    if rate < post.min_acceptance:
        steps_used = chains[0].step_sizes.tolist()
        raise NumericError(
            f"MH acceptance {rate:.4f} below {post.min_acceptance} after adaptation; step sizes {steps_used}"
        )
    # interleave so truncation to n keeps every chain represented
    draws = np.stack([c.draws for c in chains], axis=1).reshape(-1, post.prior.dim)
    return draws[:n]


class SNREState:
    def __init__(self, prior, x_obs, cfg=None, seed=0):
        self.prior = prior
        self.x_obs = np.asarray(x_obs, dtype=np.float64)
        self.cfg = cfg or SNREConfig()
        self.seed = int(seed)
        self.dataset = RoundDataset()
        self.clf = None
        self.posterior = None
        self.round = 0
        self.history = []

    def build(self, theta, x, log_vars=()):
        cfg = self.cfg
        torch.manual_seed(seeding.int_seed(self.seed, "init"))
        T, V = x.shape[1:]
        emb = make_embedding(
            cfg.embedding.kind, T, V, cfg.embedding.output_dim, cfg.embedding.hidden,
            log_vars, hidden_size=cfg.embedding.hidden_size,
        )
        emb.standardizer.fit(x)
        sd = theta.std(0)
        self.clf = RatioClassifier(
            self.prior.dim, emb, hidden=cfg.hidden, slope=cfg.slope, theta_mean=theta.mean(0),
            theta_std=np.where(sd > 0, sd, self.prior.widths / math.sqrt(12.0)),
        )


def run_snre_round(state, simulator, S, proposal=None, log_epoch=None):
    cfg = state.cfg
    if S < cfg.min_round_size:
        raise ContractError(f"round size {S} is below the minimum {cfg.min_round_size}")
    r = state.round + 1
    if proposal is None:
        proposal = state.prior if r == 1 else state.posterior
    t0 = time.perf_counter()
    thetas = draw_proposal(proposal, state.prior, S, seeding.stream(state.seed, "prior", r))
    proposal_acceptance = getattr(proposal, "acceptance_rate", None)
    theta, x, failed = simulate_batch(simulator, thetas, seeding.simulation_seeds(state.seed, r, S))
    if len(failed) > cfg.max_failure_rate * S:
        raise SimulationBudgetExceeded(f"{len(failed)} of {S} simulations failed in round {r}")
    t_sim = time.perf_counter() - t0

    state.dataset.append(theta, x, r)
    if state.clf is None:
        state.build(theta, x, _log_vars(simulator))
    clf = state.clf
    all_theta = torch.as_tensor(state.dataset.theta, dtype=DTYPE)
    all_x = torch.as_tensor(state.dataset.x, dtype=DTYPE)
    rng = seeding.stream(state.seed, "training", r)
    K = cfg.contrasts

    def batch_loss(idx, train=True):
        return contrastive_loss(clf, all_theta[idx], all_x[idx], K, rng)

    def val_loss(idx):
        fixed = seeding.stream(state.seed, "training", r, len(idx))
        return contrastive_loss(clf, all_theta[idx], all_x[idx], min(K, len(idx)), fixed)

    t1 = time.perf_counter()
    trace = train(clf, batch_loss, len(all_theta), cfg.train, rng, val_loss=val_loss, log=log_epoch)
    t_train = time.perf_counter() - t1

    state.round = r
    state.posterior = RatioPosterior(clf, state.x_obs, state.prior, r, cfg.sampler, cfg.min_acceptance)
    state.history.append(
        {
            "round": r,
            "proposal": _describe(proposal),
            "proposal_acceptance": proposal_acceptance,
            "n_requested": S,
            "n_simulated": len(theta),
            "n_failed": len(failed),
            "failure_rate": len(failed) / S,
            "dataset_size": len(state.dataset),
            "epochs": trace["epochs"],
            "best_epoch": trace["best_epoch"],
            "best_val_loss": trace["best_val"],
            "train_loss": trace["train"],
            "val_loss": trace["val"],
            "timing": {"simulate_s": t_sim, "train_s": t_train},
        }
    )
    return state.posterior


def run_snre(simulator, prior, x_obs, R=2, S=5000, K=None, cfg=None, seed=0, proposals=None, log_epoch=None):
    """``R`` rounds of ratio estimation; returns ``(RatioPosterior, manifest dict)``."""
    if R < 1:
        raise ContractError("need at least one round")
    cfg = cfg or SNREConfig()
    if K is not None:
        cfg.contrasts = K
    state = SNREState(prior, x_obs, cfg, seed)
    for r in range(1, R + 1):
        run_snre_round(state, simulator, S, (proposals or {}).get(r), log_epoch)
    manifest = {
        "method": "snre",
        "seed": state.seed,
        "rounds": state.history,
        "dataset_size": len(state.dataset),
        "round_sizes": state.dataset.sizes(),
        "prior": prior.describe(),
        "config": json.loads(json.dumps(asdict(cfg))),
    }
    return state.posterior, manifest


def save_ratio_posterior(post, directory, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    desc = {"classifier": post.clf.descriptor(), "prior": post.prior.describe(), "round": post.round, **(extra or {})}
    (directory / "architecture.json").write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
    ParamStore(post.clf).save(directory / "params.npz")
    np.save(directory / "observed.npy", post.x_obs)


def load_ratio_posterior(directory):
    directory = Path(directory)
    desc = json.loads((directory / "architecture.json").read_text())
    c = desc["classifier"]
    emb = None if c["embedding"] is None else build_embedding(c["embedding"])
    clf = RatioClassifier(
        c["dim"], emb, context_dim=c["context_dim"], hidden=c["hidden"], slope=c["slope"],
        theta_mean=c["theta_mean"], theta_std=c["theta_std"],
    )
    ParamStore(clf).load(directory / "params.npz")
    p = desc["prior"]
    prior = UniformBoxPrior(tuple(p["names"]), tuple(p["low"]), tuple(p["high"]))
    return RatioPosterior(clf, np.load(directory / "observed.npy"), prior, desc["round"])
