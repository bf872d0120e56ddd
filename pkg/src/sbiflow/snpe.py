"""Sequential neural posterior estimation with atomic proposal correction.

Round 1 draws parameters from the prior and fits the conditional flow by
maximum likelihood.  Later rounds draw from the previous posterior
estimate (or a caller-supplied proposal) and retrain on all accumulated
pairs with an atomic loss: each item's density is normalized against a
handful of parameter atoms from the same batch, each reweighted by the
inverse prior density.  The optimum of that loss is the true posterior
whatever proposal produced the atoms, so no proposal density is needed.
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
from .diff import DTYPE, ParamStore, TrainConfig, as_tensor, train
from .embed import build_embedding, make_embedding
from .errors import ContractError, NumericError, SimulationBudgetExceeded
from .flow import build_flow, make_flow
from .mcmc import LOG_ZERO, mh_sample
from .models.base import SimulatorFailure

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UniformBoxPrior:
    """Independent uniform priors on ``[low_j, high_j]``."""

    names: tuple
    low: tuple
    high: tuple

    def __post_init__(self):
        low = np.asarray(self.low, dtype=float)
        high = np.asarray(self.high, dtype=float)
        if low.shape != high.shape or low.ndim != 1 or len(self.names) != len(low):
            raise ValueError("names, low and high must have one entry per parameter")
        bad = [n for n, lo, hi in zip(self.names, low, high) if not lo < hi]
        if bad:
            raise ValueError(f"empty prior interval for {bad}")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "low", tuple(float(v) for v in low))
        object.__setattr__(self, "high", tuple(float(v) for v in high))

    @classmethod
    def from_model(cls, model, overrides=None):
        low, high = list(model.low), list(model.high)
        for name, (lo, hi) in (overrides or {}).items():
            if name not in model.param_names:
                raise KeyError(f"{model.name} has no parameter {name!r}")
            j = model.param_names.index(name)
            low[j], high[j] = lo, hi
        return cls(model.param_names, tuple(low), tuple(high))

    @property
    def dim(self):
        return len(self.names)

    @property
    def widths(self):
        return np.asarray(self.high) - np.asarray(self.low)

    @property
    def log_volume(self):
        return float(np.log(self.widths).sum())

    def contains(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.all((theta >= np.asarray(self.low)) & (theta <= np.asarray(self.high)), axis=-1)

    def sample(self, n, rng):
        if n < 1:
            raise ValueError("n must be >= 1")
        return rng.uniform(self.low, self.high, size=(n, self.dim))

    def log_pdf(self, theta):
        """``-log(volume)`` inside the box and ``LOG_ZERO`` outside; vectorized over rows."""
        inside = self.contains(theta)
        out = np.where(inside, -self.log_volume, LOG_ZERO)
        return float(out) if np.ndim(out) == 0 else out

    def restrict(self, low=None, high=None):
        """Sub-box with some bounds replaced, e.g. for a forced proposal."""
        lo = np.asarray(self.low) if low is None else np.maximum(self.low, low)
        hi = np.asarray(self.high) if high is None else np.minimum(self.high, high)
        return UniformBoxPrior(self.names, tuple(lo), tuple(hi))

    def describe(self):
        return {"kind": "uniform_box", "names": list(self.names), "low": list(self.low), "high": list(self.high)}


def sample_prior(prior, n, rng):
    return prior.sample(n, rng)


def prior_log_pdf(prior, theta):
    return prior.log_pdf(theta)


class RoundDataset:
    """Append-only store of ``(theta, panel, round)`` triples."""

    def __init__(self):
        self._theta, self._x, self._round = [], [], []
        self._cache = None

    def append(self, theta, x, round_index):
        theta = np.asarray(theta, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        if len(theta) != len(x):
            raise ContractError("theta and x must have the same number of rows")
        if self._x and x.shape[1:] != self._x[0].shape[1:]:
            raise ContractError(f"panel shape {x.shape[1:]} differs from earlier rounds {self._x[0].shape[1:]}")
        self._theta.append(theta)
        self._x.append(x)
        self._round.append(np.full(len(theta), int(round_index)))
        self._cache = None

    def _arrays(self):
        if self._cache is None:
            self._cache = (np.concatenate(self._theta), np.concatenate(self._x), np.concatenate(self._round))
        return self._cache

    @property
    def theta(self):
        return self._arrays()[0]

    @property
    def x(self):
        return self._arrays()[1]

    @property
    def rounds(self):
        return self._arrays()[2]

    def sizes(self):
        return [len(t) for t in self._theta]

    def __len__(self):
        return sum(self.sizes())


class NeuralPosterior(nn.Module):
    """Conditional flow plus the summary network that feeds it.

    Without an embedding the raw ``x`` rows are used as the context.
    """

    def __init__(self, flow, embedding=None):
        super().__init__()
        self.flow = flow
        self.embedding = embedding

    def context(self, x):
        if self.embedding is None:
            return as_tensor(x) if self.flow.context_dim else None
        return self.embedding(as_tensor(x))

    def log_prob_ctx(self, theta, ctx):
        return self.flow.log_prob(theta, ctx)

    def log_prob(self, theta, x):
        return self.flow.log_prob(theta, self.context(x))

    def descriptor(self):
        return {
            "flow": self.flow.descriptor(),
            "embedding": None if self.embedding is None else self.embedding.descriptor(),
        }


def contrast_indices(n, k, rng):
    """For each row ``i``, ``k`` distinct indices from ``range(n)`` excluding ``i``."""
    if k > n - 1:
        raise ContractError(f"cannot draw {k} contrasts from a batch of {n}")
    rows = np.arange(n)[:, None]
    idx = rng.integers(0, n - 1, size=(n, k))
    idx = idx + (idx >= rows)
    for _ in range(100):
        s = np.sort(idx, axis=1)
        dup = np.any(s[:, 1:] == s[:, :-1], axis=1) if k > 1 else np.zeros(n, dtype=bool)
        if not dup.any():
            return idx
        redo = np.nonzero(dup)[0]
        fresh = rng.integers(0, n - 1, size=(len(redo), k))
        idx[redo] = fresh + (fresh >= redo[:, None])
    # rejection stalls when k is close to n - 1
    for i in np.nonzero(dup)[0]:
        row = rng.choice(n - 1, size=k, replace=False)
        idx[i] = row + (row >= i)
    return idx


def nll_loss(estimator, theta, x):
    return -estimator.log_prob_ctx(as_tensor(theta), estimator.context(x)).mean()


def atomic_round_loss(estimator, theta, x, n_atoms, rng, prior=None):
    """Mean over the batch of ``-log softmax`` of the true parameter among its atoms.

    Atom logits are ``log q(theta_m | x_i) - log p(theta_m)``; the uniform
    prior makes the second term a constant that cancels.
    """
    theta = as_tensor(theta)
    n, dim = theta.shape
    if n_atoms < 2:
        raise ContractError("atomic loss needs at least two atoms")
    if n < n_atoms:
        raise ContractError(f"batch of {n} is smaller than the {n_atoms} atoms requested")
    ctx = estimator.context(x)
    atoms = np.concatenate([np.arange(n)[:, None], contrast_indices(n, n_atoms - 1, rng)], axis=1)
    theta_atoms = theta[torch.as_tensor(atoms)].reshape(n * n_atoms, dim)
    ctx_rep = None if ctx is None else ctx.repeat_interleave(n_atoms, dim=0)
    logits = estimator.log_prob_ctx(theta_atoms, ctx_rep).reshape(n, n_atoms)
    if prior is not None:
        lp = prior.log_pdf(theta_atoms.detach().numpy())
        if np.any(np.asarray(lp) <= LOG_ZERO):
            raise NumericError("atom outside the prior support: proposal and prior supports disagree")
        logits = logits - torch.as_tensor(np.asarray(lp, dtype=np.float64).reshape(n, n_atoms))
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def round_loss(estimator, theta, x, round_index, n_atoms, rng, prior=None):
    """Maximum likelihood in round 1, atomic loss afterwards."""
    if round_index <= 1:
        return nll_loss(estimator, theta, x)
    return atomic_round_loss(estimator, theta, x, n_atoms, rng, prior)


@dataclass
class FlowConfig:
    kind: str = "affine"
    n_layers: int = 5
    hidden: tuple = (50, 50)
    slope: float = 0.01
    n_components: int = 8
    link_slope: float | None = None


@dataclass
class EmbeddingConfig:
    kind: str = "dense"
    output_dim: int = 32
    hidden: tuple = (64,)
    hidden_size: int = 64


@dataclass
class SNPEConfig:
    atoms: int = 10
    min_round_size: int = 20
    max_failure_rate: float = 0.2
    flow: FlowConfig = field(default_factory=FlowConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # posterior sampling: rejection chunk and MH fallback threshold
    sample_chunk: int = 10000
    min_acceptance: float = 0.01


def simulate_batch(simulator, thetas, seeds):
    """Run the simulator over rows in index order; failing rows are dropped.

    Returns ``(kept_theta, panels, failed_indices)``.
    """
    kept, panels, failed = [], [], []
    for i, (theta, seed) in enumerate(zip(thetas, seeds)):
        try:
            panels.append(simulator(theta, seed))
            kept.append(theta)
        except SimulatorFailure as exc:
            log.info("simulation %d failed at theta=%s: %s", i, np.round(theta, 6).tolist(), exc)
            failed.append(i)
    shape = (0,) if not panels else panels[0].shape
    return np.asarray(kept).reshape(len(kept), -1), np.asarray(panels).reshape(len(panels), *shape), failed


def draw_proposal(proposal, prior, n, rng, max_tries=1000):
    """``n`` draws from ``proposal`` restricted to the prior box by rejection."""
    out, total = [], 0
    for _ in range(max_tries):
        theta = np.asarray(proposal.sample(n, rng), dtype=float).reshape(-1, prior.dim)
        keep = theta[prior.contains(theta)]
        out.append(keep)
        total += len(keep)
        if total >= n:
            return np.concatenate(out)[:n]
    raise NumericError("proposal places almost no mass inside the prior box")


def _describe(proposal):
    return proposal.describe() if hasattr(proposal, "describe") else {"kind": type(proposal).__name__}


class PosteriorEstimate:
    """A trained ``NeuralPosterior`` bound to one observed panel."""

    def __init__(self, estimator, x_obs, prior, round_index=0, sample_chunk=10000, min_acceptance=0.01):
        self.estimator = estimator
        self.x_obs = np.asarray(x_obs, dtype=np.float64)
        self.prior = prior
        self.round = round_index
        self.sample_chunk = sample_chunk
        self.min_acceptance = min_acceptance
        self.acceptance_rate = None
        self.used_mh = False
        with torch.no_grad():
            ctx = estimator.context(self.x_obs[None])
        self._ctx = None if ctx is None else ctx.detach()

    def flow_log_prob(self, theta):
        """Untruncated flow log-density at each row of ``theta``."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        with torch.no_grad():
            return self.estimator.log_prob_ctx(torch.as_tensor(theta), self._ctx).numpy()

    def log_prob(self, theta, box_mass=None):
        """Flow log-density restricted to the prior box (``LOG_ZERO`` outside).

        With ``box_mass`` (the flow's probability of the box, see
        ``box_mass``) the truncated density is normalized.
        """
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        out = np.where(self.prior.contains(theta), self.flow_log_prob(theta), LOG_ZERO)
        if box_mass is not None:
            out = np.where(out > LOG_ZERO, out - math.log(box_mass), LOG_ZERO)
        return out

    def box_mass(self, n=20000, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        draws = self.estimator.flow.sample(n, self._ctx, rng).numpy()
        return max(float(self.prior.contains(draws).mean()), 1.0 / n)

    def sample(self, n, rng):
        """Flow draws kept only inside the prior box; MH on the flow density if that stalls."""
        if n < 1:
            raise ValueError("n must be >= 1")
        out, drawn, kept = [], 0, 0
        chunk = max(self.sample_chunk, n)
        while kept < n:
            draws = self.estimator.flow.sample(chunk, self._ctx, rng).numpy()
            inside = draws[self.prior.contains(draws)]
            drawn += chunk
            kept += len(inside)
            out.append(inside)
            self.acceptance_rate = kept / drawn
            if self.acceptance_rate < self.min_acceptance:
                log.warning("rejection acceptance %.4f; switching to MH on the flow density", self.acceptance_rate)
                self.used_mh = True
                return self._sample_mh(n, rng)
        return np.concatenate(out)[:n]

    def _sample_mh(self, n, rng, n_chains=20, burn_in=2000, thin=5):
        init = self.prior.sample(max(n_chains * 50, 1000), rng)
        lp = self.log_prob(init)
        init = init[np.argsort(-lp)[:n_chains]]
        steps = -(-n // n_chains)
        chains = mh_sample(
            self.log_prob, init, steps, 0.05, rng, widths=self.prior.widths,
            burn_in=burn_in, thin=thin, vectorized=True,
        )
        return np.concatenate([c.draws for c in chains])[:n]

    def describe(self):
        return {"kind": "posterior", "round": self.round}


class SNPEState:
    """Mutable state carried between rounds: data, networks and the round log."""

    def __init__(self, prior, x_obs, cfg=None, seed=0):
        self.prior = prior
        self.x_obs = np.asarray(x_obs, dtype=np.float64)
        self.cfg = cfg or SNPEConfig()
        self.seed = int(seed)
        self.dataset = RoundDataset()
        self.estimator = None
        self.posterior = None
        self.round = 0
        self.history = []

    def build(self, theta, x, log_vars=()):
        """Create the networks, fitting standardization constants on round-1 data."""
        cfg = self.cfg
        torch.manual_seed(seeding.int_seed(self.seed, "init"))
        T, V = x.shape[1:]
        emb = make_embedding(
            cfg.embedding.kind, T, V, cfg.embedding.output_dim, cfg.embedding.hidden,
            log_vars, hidden_size=cfg.embedding.hidden_size,
        )
        emb.standardizer.fit(x)
        sd = theta.std(0)
        flow = make_flow(
            self.prior.dim, cfg.embedding.output_dim, cfg.flow.n_layers, cfg.flow.kind, cfg.flow.hidden,
            cfg.flow.slope, cfg.flow.n_components, cfg.flow.link_slope,
            mean=theta.mean(0), std=np.where(sd > 0, sd, self.prior.widths / math.sqrt(12.0)),
        )
        self.estimator = NeuralPosterior(flow, emb)


def _log_vars(simulator):
    names = getattr(simulator, "observables", ())
    return tuple(names.index(v) for v in getattr(simulator, "log_observables", ()))


def run_round(state, simulator, S, proposal=None, log_epoch=None):
    """One pass of: propose, simulate, append, retrain on everything, rebind to ``x_obs``."""
    cfg = state.cfg
    if S < cfg.min_round_size:
        raise ContractError(f"round size {S} is below the minimum {cfg.min_round_size}")
    r = state.round + 1
    if proposal is None:
        proposal = state.prior if r == 1 else state.posterior
    t0 = time.perf_counter()
    thetas = draw_proposal(proposal, state.prior, S, seeding.stream(state.seed, "prior", r))
    theta, x, failed = simulate_batch(simulator, thetas, seeding.simulation_seeds(state.seed, r, S))
    if len(failed) > cfg.max_failure_rate * S:
        raise SimulationBudgetExceeded(f"{len(failed)} of {S} simulations failed in round {r}")
    t_sim = time.perf_counter() - t0

    state.dataset.append(theta, x, r)
    if state.estimator is None:
        state.build(theta, x, _log_vars(simulator))
    est = state.estimator
    all_theta = torch.as_tensor(state.dataset.theta, dtype=DTYPE)
    all_x = torch.as_tensor(state.dataset.x, dtype=DTYPE)
    rng = seeding.stream(state.seed, "training", r)

    def batch_loss(idx, train=True):
        return round_loss(est, all_theta[idx], all_x[idx], r, cfg.atoms, rng, state.prior)

    def val_loss(idx):
        # fixed atoms on every evaluation so held-out scores are comparable
        fixed = seeding.stream(state.seed, "training", r, len(idx))
        return round_loss(est, all_theta[idx], all_x[idx], r, cfg.atoms, fixed, state.prior)

    t1 = time.perf_counter()
    trace = train(est, batch_loss, len(all_theta), cfg.train, rng, val_loss=val_loss, log=log_epoch)
    t_train = time.perf_counter() - t1

    state.round = r
    state.posterior = PosteriorEstimate(est, state.x_obs, state.prior, r, cfg.sample_chunk, cfg.min_acceptance)
    state.history.append(
        {
            "round": r,
            "proposal": _describe(proposal),
            "loss": "nll" if r == 1 else "atomic",
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


def run_snpe(simulator, prior, x_obs, R=2, S=5000, cfg=None, seed=0, proposals=None, log_epoch=None):
    """``R`` rounds of ``run_round``; returns ``(PosteriorEstimate, manifest dict)``.

    ``proposals`` maps a round number to a proposal object (anything with
    ``sample(n, rng)``) that replaces the default for that round.
    """
    if R < 1:
        raise ContractError("need at least one round")
    state = SNPEState(prior, x_obs, cfg, seed)
    for r in range(1, R + 1):
        run_round(state, simulator, S, (proposals or {}).get(r), log_epoch)
    return state.posterior, snpe_manifest(state)


def snpe_manifest(state):
    return {
        "method": "snpe",
        "seed": state.seed,
        "rounds": state.history,
        "dataset_size": len(state.dataset),
        "round_sizes": state.dataset.sizes(),
        "prior": state.prior.describe(),
        "config": _config_dict(state.cfg),
    }


def _config_dict(cfg):
    return json.loads(json.dumps(asdict(cfg)))


def save_posterior(posterior, directory, extra=None):
    """Architecture descriptor, parameters and the observed panel under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    desc = {
        **posterior.estimator.descriptor(),
        "prior": posterior.prior.describe(),
        "round": posterior.round,
        **(extra or {}),
    }
    (directory / "architecture.json").write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
    ParamStore(posterior.estimator).save(directory / "params.npz")
    np.save(directory / "observed.npy", posterior.x_obs)


def load_posterior(directory):
    directory = Path(directory)
    desc = json.loads((directory / "architecture.json").read_text())
    emb = None if desc["embedding"] is None else build_embedding(desc["embedding"])
    est = NeuralPosterior(build_flow(desc["flow"]), emb)
    ParamStore(est).load(directory / "params.npz")
    p = desc["prior"]
    prior = UniformBoxPrior(tuple(p["names"]), tuple(p["low"]), tuple(p["high"]))
    return PosteriorEstimate(est, np.load(directory / "observed.npy"), prior, desc["round"])
