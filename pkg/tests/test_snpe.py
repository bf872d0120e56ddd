import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sbiflow.diff import TrainConfig, as_tensor
from sbiflow.errors import ContractError, NumericError, SimulationBudgetExceeded
from sbiflow.flow import AffineARLayer, NormalizingFlow
from sbiflow.mcmc import LOG_ZERO
from sbiflow.models import SimulatorFailure, get_model
from sbiflow.snpe import (
    EmbeddingConfig,
    FlowConfig,
    NeuralPosterior,
    PosteriorEstimate,
    RoundDataset,
    SNPEConfig,
    SNPEState,
    UniformBoxPrior,
    atomic_round_loss,
    contrast_indices,
    load_posterior,
    nll_loss,
    prior_log_pdf,
    round_loss,
    run_round,
    run_snpe,
    sample_prior,
    save_posterior,
    simulate_batch,
)


def box(low, high):
    return UniformBoxPrior(tuple(f"p{i}" for i in range(len(low))), tuple(low), tuple(high))


class TestPrior:
    def test_mean_unit_square(self):
        x = sample_prior(box([0, 0], [1, 1]), 100_000, np.random.default_rng(0))
        se = math.sqrt(1 / 12 / len(x))
        assert np.all(np.abs(x.mean(0) - 0.5) < 3 * se)

    def test_tiny_box(self):
        prior = box([0.0], [1e-9])
        x = sample_prior(prior, 1000, np.random.default_rng(1))
        assert np.all(prior.contains(x))

    def test_ks_uniform(self):
        x = sample_prior(box([-1, 2], [1, 5]), 10_000, np.random.default_rng(2))
        assert stats.kstest(x[:, 0], "uniform", args=(-1, 2)).pvalue > 0.01
        assert stats.kstest(x[:, 1], "uniform", args=(2, 3)).pvalue > 0.01

    @pytest.mark.parametrize(
        "low, high, theta, expected",
        [([0, 0], [1, 1], [0.3, 0.7], 0.0), ([0], [2], [1.0], -math.log(2)), ([0], [2], [3.0], LOG_ZERO)],
    )
    def test_log_pdf(self, low, high, theta, expected):
        assert prior_log_pdf(box(low, high), theta) == pytest.approx(expected, abs=1e-15)

    def test_vectorized_log_pdf(self):
        lp = box([0], [2]).log_pdf(np.array([[1.0], [5.0]]))
        assert lp[0] == pytest.approx(-math.log(2)) and lp[1] == LOG_ZERO

    def test_restrict(self):
        upper = box([0, 0], [2, 2]).restrict(low=[1, 0.5])
        assert upper.low == (1.0, 0.5) and upper.high == (2.0, 2.0)

    def test_from_model_overrides(self):
        prior = UniformBoxPrior.from_model(get_model("lgssm-ar1"), {"rho": (0.2, 0.8)})
        assert prior.low == (0.2, 0.05) and prior.high == (0.8, 1.0)

    def test_empty_interval(self):
        with pytest.raises(ValueError):
            box([1.0], [1.0])


class TestContrasts:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 30), st.data())
    def test_distinct_and_exclude_self(self, n, data):
        k = data.draw(st.integers(1, n - 1))
        idx = contrast_indices(n, k, np.random.default_rng(data.draw(st.integers(0, 1000))))
        assert idx.shape == (n, k)
        assert np.all(idx != np.arange(n)[:, None])
        assert all(len(set(row)) == k for row in idx.tolist())
        assert idx.min() >= 0 and idx.max() < n

    def test_too_many(self):
        with pytest.raises(ContractError):
            contrast_indices(3, 3, np.random.default_rng(0))


class StubEstimator:
    """log q(theta | x) supplied directly; the context is ``x`` itself."""

    def __init__(self, fn):
        self.fn = fn

    def context(self, x):
        return as_tensor(x)

    def log_prob_ctx(self, theta, ctx):
        return self.fn(theta, ctx)


class FixedOffsets:
    """Stand-in generator making row ``i`` contrast with row ``(i + offset) % n``."""

    def __init__(self, offset):
        self.offset = offset

    def integers(self, low, high, size):
        n = size[0]
        i = np.arange(n)
        j = (i + self.offset) % n
        return np.where(j < i, j, j - 1)[:, None]


class TestAtomicLoss:
    def test_equal_density_two_atoms(self):
        est = StubEstimator(lambda th, ctx: torch.zeros(len(th), dtype=torch.float64))
        theta = np.array([[0.1], [0.7], [0.4]])
        loss = atomic_round_loss(est, theta, np.zeros((3, 1)), 2, np.random.default_rng(0))
        assert float(loss) == pytest.approx(math.log(2), abs=1e-15)

    def test_ratio_three(self):
        ln3 = math.log(3)
        est = StubEstimator(lambda th, ctx: ln3 * (th[:, 0] == ctx[:, 0]).to(torch.float64))
        theta = np.array([[0.0], [1.0]])
        loss = atomic_round_loss(est, theta, theta.copy(), 2, np.random.default_rng(0))
        assert float(loss) == pytest.approx(-math.log(3 / 4), abs=1e-15)

    def test_grid_search_recovers_posterior_ratio(self):
        # theta in {a, b}, x in {0, 1}; p(a, 0) = p(b, 1) = 0.4, p(a, 1) = p(b, 0) = 0.1
        rows = [(0.0, 0.0)] * 4 + [(0.0, 1.0)] + [(1.0, 0.0)] + [(1.0, 1.0)] * 4
        theta = np.array([[r[0]] for r in rows])
        x = np.array([[r[1]] for r in rows])

        def expected_loss(w):
            # log q(theta | x) = w when (theta, x) is (a, 0) or (b, 1)
            est = StubEstimator(lambda th, ctx: w * (th[:, 0] == ctx[:, 0]).to(torch.float64))
            return np.mean([float(atomic_round_loss(est, theta, x, 2, FixedOffsets(o))) for o in range(1, len(rows))])

        grid = np.linspace(0.5, 2.5, 2001)
        best = grid[np.argmin([expected_loss(w) for w in grid])]
        # true posterior odds p(a | 0) / p(b | 0) = 4
        assert abs(math.exp(best) / 4 - 1) < 0.01

    def test_atom_outside_prior(self):
        est = StubEstimator(lambda th, ctx: torch.zeros(len(th), dtype=torch.float64))
        with pytest.raises(NumericError):
            atomic_round_loss(est, np.array([[0.5], [2.0]]), np.zeros((2, 1)), 2, np.random.default_rng(0), box([0], [1]))

    def test_batch_smaller_than_atoms(self):
        est = StubEstimator(lambda th, ctx: torch.zeros(len(th), dtype=torch.float64))
        with pytest.raises(ContractError):
            atomic_round_loss(est, np.zeros((3, 1)), np.zeros((3, 1)), 5, np.random.default_rng(0))

    def test_round_one_is_nll(self):
        est = StubEstimator(lambda th, ctx: -(th[:, 0] - ctx[:, 0]) ** 2)
        theta, x = np.array([[0.0], [1.0]]), np.array([[1.0], [1.0]])
        assert float(round_loss(est, theta, x, 1, 2, None)) == float(nll_loss(est, theta, x)) == 0.5


class TestDataset:
    def test_append_and_rounds(self):
        ds = RoundDataset()
        ds.append(np.zeros((3, 2)), np.zeros((3, 5, 1)), 1)
        ds.append(np.ones((2, 2)), np.ones((2, 5, 1)), 2)
        assert len(ds) == 5 and ds.sizes() == [3, 2]
        assert ds.rounds.tolist() == [1, 1, 1, 2, 2]

    def test_shape_mismatch(self):
        ds = RoundDataset()
        ds.append(np.zeros((3, 2)), np.zeros((3, 5, 1)), 1)
        with pytest.raises(ContractError):
            ds.append(np.zeros((3, 2)), np.zeros((3, 4, 1)), 2)


def _shifted_flow(shift):
    layer = AffineARLayer(1, hidden=(4,))
    layer.conditioner.set_constant_output([[shift], [0.0]])
    return NormalizingFlow(1, 0, [layer])


class TestPosteriorEstimate:
    def test_rejection_keeps_draws_in_box(self):
        post = PosteriorEstimate(NeuralPosterior(_shifted_flow(0.5)), np.zeros((3, 1)), box([0], [1]))
        x = post.sample(2000, np.random.default_rng(0))
        assert x.shape == (2000, 1) and np.all((x >= 0) & (x <= 1))
        assert not post.used_mh

    def test_mh_fallback_when_box_is_in_the_tail(self):
        post = PosteriorEstimate(NeuralPosterior(_shifted_flow(6.0)), np.zeros((3, 1)), box([0], [1]), sample_chunk=2000)
        x = post.sample(500, np.random.default_rng(1))
        assert post.used_mh
        assert np.all((x >= 0) & (x <= 1))
        # truncated N(6, 1) on [0, 1] piles up near 1
        assert x.mean() > 0.75

    def test_truncated_density_normalizes(self):
        post = PosteriorEstimate(NeuralPosterior(_shifted_flow(0.0)), np.zeros((3, 1)), box([-1], [1]))
        mass = post.box_mass(200_000, np.random.default_rng(0))
        grid = np.linspace(-1, 1, 2001)
        dens = np.exp(post.log_prob(grid[:, None], box_mass=mass))
        assert abs(np.trapezoid(dens, grid) - 1) < 0.01
        assert post.log_prob([[2.0]])[0] == LOG_ZERO


def _small_cfg(**train):
    return SNPEConfig(
        flow=FlowConfig(n_layers=3, hidden=(16,)),
        embedding=EmbeddingConfig(output_dim=4, hidden=(16,)),
        train=TrainConfig(**{"max_epochs": 5, "batch_size": 64, **train}),
        min_round_size=10,
    )


class TestRounds:
    def test_single_round_equals_run_round(self):
        model = get_model("gaussian-mean")
        prior = UniformBoxPrior.from_model(model)
        x_obs = model(model.default_theta, seed=1)
        cfg = _small_cfg()
        post_a, _ = run_snpe(model, prior, x_obs, R=1, S=200, cfg=cfg, seed=3)
        state = SNPEState(prior, x_obs, cfg, seed=3)
        post_b = run_round(state, model, 200)
        theta = np.linspace(-3, 3, 50)[:, None]
        assert np.array_equal(post_a.flow_log_prob(theta), post_b.flow_log_prob(theta))

    def test_same_seed_same_samples(self):
        model = get_model("gaussian-mean")
        prior = UniformBoxPrior.from_model(model)
        x_obs = model(model.default_theta, seed=1)
        draws = []
        for _ in range(2):
            post, _ = run_snpe(model, prior, x_obs, R=2, S=100, cfg=_small_cfg(max_epochs=2), seed=9)
            draws.append(post.sample(300, np.random.default_rng(0)))
        assert np.array_equal(*draws)

    def test_failures_dropped_and_counted(self):
        def flaky(theta, seed):
            if theta[0] > 0.9:
                raise SimulatorFailure("boom")
            return np.full((4, 1), theta[0]) + np.random.default_rng(seed).normal(size=(4, 1))

        _, manifest = run_snpe(flaky, box([0], [1]), np.zeros((4, 1)), R=1, S=200, cfg=_small_cfg(), seed=0)
        rec = manifest["rounds"][0]
        assert rec["n_failed"] > 0
        assert rec["n_simulated"] + rec["n_failed"] == 200

    def test_failure_budget(self):
        def bad(theta, seed):
            if theta[0] > 0.5:
                raise SimulatorFailure("boom")
            return np.zeros((4, 1))

        with pytest.raises(SimulationBudgetExceeded):
            run_snpe(bad, box([0], [1]), np.zeros((4, 1)), R=1, S=100, cfg=_small_cfg(), seed=0)

    def test_round_too_small(self):
        with pytest.raises(ContractError):
            run_snpe(lambda t, s: np.zeros((2, 1)), box([0], [1]), np.zeros((2, 1)), S=5, cfg=_small_cfg())

    def test_simulate_batch_order(self):
        thetas = np.array([[0.1], [0.95], [0.3]])

        def sim(theta, seed):
            if theta[0] > 0.9:
                raise SimulatorFailure("x")
            return np.full((2, 1), seed, dtype=float)

        kept, panels, failed = simulate_batch(sim, thetas, [7, 8, 9])
        assert failed == [1]
        assert kept[:, 0].tolist() == [0.1, 0.3]
        assert panels[:, 0, 0].tolist() == [7.0, 9.0]

    def test_save_load(self, tmp_path):
        model = get_model("lgssm-ar1")
        prior = UniformBoxPrior.from_model(model)
        x_obs = model(model.default_theta, seed=0)
        post, _ = run_snpe(model, prior, x_obs, R=1, S=100, cfg=_small_cfg(max_epochs=1), seed=0)
        save_posterior(post, tmp_path)
        loaded = load_posterior(tmp_path)
        theta = prior.sample(20, np.random.default_rng(0))
        assert np.array_equal(post.flow_log_prob(theta), loaded.flow_log_prob(theta))


def test_uninformative_simulator_returns_prior():
    model = get_model("noise")
    prior = UniformBoxPrior.from_model(model)
    x_obs = model(model.default_theta, seed=0)
    cfg = SNPEConfig(flow=FlowConfig(kind="sigmoid_mixture"))
    post, _ = run_snpe(model, prior, x_obs, R=1, S=5000, cfg=cfg, seed=0)
    draws = post.sample(10_000, np.random.default_rng(0))
    for j in range(prior.dim):
        assert stats.kstest(draws[:, j], "uniform", args=(prior.low[j], prior.widths[j])).statistic < 0.05


def test_second_round_does_not_degrade_held_out_loss():
    model = get_model("gaussian-mean")
    prior = UniformBoxPrior.from_model(model)
    x_obs = model(model.default_theta, seed=0)
    cfg = SNPEConfig(train=TrainConfig(max_epochs=100))
    state = SNPEState(prior, x_obs, cfg, seed=0)
    round1 = run_round(state, model, 2000)
    est1 = copy.deepcopy(round1.estimator)
    run_round(state, model, 2000)
    # held-out pairs drawn where round 2 simulates: the round-1 posterior, then the simulator
    r = np.random.default_rng(99)
    theta = round1.sample(1000, r)
    x = np.stack([model(t, int(s)) for t, s in zip(theta, r.integers(0, 2**62, 1000))])
    with torch.no_grad():
        nll1 = float(nll_loss(est1, theta, x))
        nll2 = float(nll_loss(state.estimator, theta, x))
    assert nll2 <= nll1 + 0.05 * abs(nll1)


def test_conjugate_single_round_matches_grid(study):
    res, _ = study("conjugate")
    assert res["mean_error_in_sd"] < 0.1
    assert abs(res["snpe_sd"] / res["grid_sd"] - 1) < 0.1


def test_shifted_round_two_proposal_matches_grid(study):
    res, _ = study("proposal-shift")
    assert res["round2_low"] == 0.0
    assert res["ks"] < 0.1


def test_ar1_means_match_mh(study):
    res, _ = study("ar1")
    assert max(res["snpe_mean_gap_in_mh_sd"]) < 0.5
