"""End-to-end acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The heavy studies run once through ``sbiflow experiment`` (see conftest) and
are shared with the module tests.
"""

import time

import numpy as np
import tomli_w
import torch

from sbiflow import cli
from sbiflow.diff import Activation, ParamStore, finite_diff_grad
from sbiflow.embed import make_embedding
from sbiflow.flow import AffineARLayer, SigmoidMixtureLayer, flow_log_prob, layer_forward, make_flow
from sbiflow.snpe import NeuralPosterior, UniformBoxPrior, atomic_round_loss, nll_loss
from sbiflow.snre import RatioClassifier, contrastive_loss


def perturb(module, scale, seed):
    store = ParamStore(module)
    store.set_values(store.values() + scale * np.random.default_rng(seed).standard_normal(store.size))
    return module


def fd_jacobian(fn, y, eps=1e-6):
    J = np.empty((len(y), len(y)))
    for j in range(len(y)):
        e = np.zeros_like(y)
        e[j] = eps
        J[:, j] = (fn(y + e) - fn(y - e)) / (2 * eps)
    return J


# criterion 1 -------------------------------------------------------------


def test_criterion_01_flow_correctness(record_criterion):
    t0 = time.perf_counter()
    worst_trip = 0.0
    for dim in range(1, 7):
        torch.manual_seed(dim)
        flow = perturb(make_flow(dim, n_layers=8, hidden=(24, 24)), 0.1, seed=dim)
        z = torch.as_tensor(np.random.default_rng(dim).standard_normal((500, dim)))
        with torch.no_grad():
            theta, _ = flow.from_base(z)
            back, _ = flow.to_base(theta)
        worst_trip = max(worst_trip, float((back - z).abs().max()))

    worst_logdet = 0.0
    r = np.random.default_rng(0)
    for dim in range(1, 7):
        for layer in (AffineARLayer(dim, hidden=(16, 16)), SigmoidMixtureLayer(dim, n_components=4, hidden=(16,))):
            perturb(layer, 0.2, seed=dim)
            for _ in range(3):
                y = r.standard_normal(dim)
                with torch.no_grad():
                    _, logdet = layer_forward(layer, y)
                    J = fd_jacobian(lambda v: layer_forward(layer, v)[0].numpy(), y)
                expected = np.linalg.slogdet(J)[1]
                worst_logdet = max(worst_logdet, abs(float(logdet) - expected) / max(1.0, abs(expected)))

    torch.manual_seed(1)
    flow1 = perturb(make_flow(1, n_layers=3, hidden=(16,)), 0.2, seed=1)
    g1 = np.linspace(-10, 10, 8001)
    torch.manual_seed(2)
    flow2 = perturb(make_flow(2, n_layers=3, hidden=(16,)), 0.2, seed=2)
    g2 = np.linspace(-10, 10, 401)
    X, Y = np.meshgrid(g2, g2, indexing="ij")
    with torch.no_grad():
        mass1 = np.trapezoid(np.exp(flow_log_prob(flow1, g1[:, None]).numpy()), g1)
        d2 = np.exp(flow_log_prob(flow2, np.column_stack([X.ravel(), Y.ravel()])).numpy()).reshape(X.shape)
    mass2 = np.trapezoid(np.trapezoid(d2, g2, axis=1), g2)
    elapsed = time.perf_counter() - t0

    ok = worst_trip < 1e-5 and worst_logdet < 1e-4 and abs(mass1 - 1) < 0.02 and abs(mass2 - 1) < 0.02 and elapsed < 120
    detail = (f"round trip {worst_trip:.1e}, log-det rel {worst_logdet:.1e}, "
              f"mass 1-D {mass1:.4f} 2-D {mass2:.4f}, {elapsed:.0f}s")
    record_criterion(1, "flow correctness", ok, detail)
    assert ok, detail


# criterion 2 -------------------------------------------------------------


def _gradient_case(i, r):
    """One random trainable module and a scalar loss over a small batch."""
    kind = ("affine_flow", "sigmoid_flow", "dense_posterior", "recurrent_posterior", "atomic", "ratio")[i % 6]
    n, T, V = 8, int(r.integers(3, 7)), int(r.integers(1, 3))
    dim = int(r.integers(1, 4))
    x = r.standard_normal((n, T, V))
    prior = UniformBoxPrior(tuple(f"p{j}" for j in range(dim)), (-2.0,) * dim, (2.0,) * dim)
    theta = prior.sample(n, r)
    hidden = (int(r.integers(3, 9)),)
    if kind in ("affine_flow", "sigmoid_flow"):
        ctx = r.standard_normal((n, 2))
        if kind == "affine_flow":
            module = make_flow(dim, context_dim=2, n_layers=3, hidden=hidden)
        else:
            # each density evaluation bisects, so this stack is kept small
            module = make_flow(dim, context_dim=2, n_layers=1, kind="sigmoid_mixture", hidden=(3,), n_components=2)
        return module, lambda: -module.log_prob(torch.as_tensor(theta), torch.as_tensor(ctx)).mean()
    emb_kind = "recurrent" if kind in ("recurrent_posterior", "ratio") and i % 4 else "dense"
    emb = make_embedding(emb_kind, T, V, output_dim=3, hidden=hidden, hidden_size=4)
    if kind == "ratio":
        module = RatioClassifier(dim, emb, hidden=(6, 6))
        seed = int(r.integers(1 << 30))
        return module, lambda: contrastive_loss(module, theta, x, 3, np.random.default_rng(seed))
    module = NeuralPosterior(make_flow(dim, context_dim=3, n_layers=3, hidden=hidden), emb)
    if kind == "atomic":
        seed = int(r.integers(1 << 30))
        return module, lambda: atomic_round_loss(module, theta, x, 3, np.random.default_rng(seed), prior)
    return module, lambda: nll_loss(module, theta, x)


def kink_distance(module, loss):
    """Smallest |input| to any leaky-ReLU in one loss evaluation."""
    seen = []
    hooks = [m.register_forward_hook(lambda _m, inp, _o: seen.append(float(inp[0].abs().min())))
             for m in module.modules() if isinstance(m, Activation)]
    with torch.no_grad():
        loss()
    for h in hooks:
        h.remove()
    return min(seen, default=np.inf)


def test_criterion_02_gradient_oracle(record_criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(2)
    worst, worst_kind, redraws = 0.0, None, 0
    for i in range(100):
        torch.manual_seed(i)
        module, loss = _gradient_case(i, r)
        store = ParamStore(module)
        base = store.values()
        # central differences are meaningless across a kink, so keep the point clear of them
        while True:
            start = base + 0.2 * r.standard_normal(store.size)
            store.set_values(start)
            if kink_distance(module, loss) > 1e-4:
                break
            redraws += 1
        store.zero_grad()
        loss().backward()
        analytic = store.grads()

        def f(v):
            store.set_values(v)
            with torch.no_grad():
                return float(loss())

        numeric = finite_diff_grad(f, start, eps=1e-6)
        store.set_values(start)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        if rel > worst:
            worst, worst_kind = rel, type(module).__name__
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 120
    detail = (f"worst relative error {worst:.1e} ({worst_kind}) over 100 configurations, "
              f"{redraws} redrawn near a kink, {elapsed:.0f}s")
    record_criterion(2, "gradient oracle", ok, detail)
    assert ok, detail


# criteria 3 to 9 ---------------------------------------------------------


def test_criterion_03_kalman_oracle(study, record_criterion):
    res, timing = study("kalman-oracle")
    ok = res["max_abs_error"] < 1e-6 and res["n_params"] == 50 and res["T"] == 50 and timing["wall_s"] < 60
    detail = f"max |kalman - dense| {res['max_abs_error']:.1e} over {res['n_params']} draws, {timing['wall_s']:.0f}s"
    record_criterion(3, "Kalman oracle", ok, detail)
    assert ok, detail


def test_criterion_04_conjugate_recovery(study, record_criterion):
    res, timing = study("conjugate")
    ok = res["mean_error_in_sd"] < 0.1 and res["ks"] < 0.1 and timing["wall_s"] < 600
    detail = f"mean error {res['mean_error_in_sd']:.3f} sd, KS {res['ks']:.3f}, {timing['wall_s']:.0f}s"
    record_criterion(4, "conjugate recovery", ok, detail)
    assert ok, detail


def test_criterion_05_proposal_correction(study, record_criterion):
    res, timing = study("proposal-shift")
    ok = res["ks"] < 0.1 and res["round2_low"] == 0.0 and timing["wall_s"] < 900
    detail = f"round-2 proposal on [{res['round2_low']}, 3], KS {res['ks']:.3f}, {timing['wall_s']:.0f}s"
    record_criterion(5, "proposal correction", ok, detail)
    assert ok, detail


def test_criterion_06_snpe_vs_mh(study, record_criterion):
    res, timing = study("ar1")
    runtime = timing["mh_s"] + timing["snpe_s"]
    gap, w1, rhat = max(res["snpe_mean_gap_in_mh_sd"]), max(res["w1_snpe_mh"]), max(res["gelman_rubin"])
    ok = gap < 0.5 and w1 < 0.15 and rhat < 1.05 and runtime < 1800
    detail = f"mean gap {gap:.3f} MH-sd, W1 {w1:.3f}, R-hat {rhat:.4f}, {runtime:.0f}s"
    record_criterion(6, "SNPE vs MH", ok, detail)
    assert ok, detail


def test_criterion_07_snre_vs_snpe(study, record_criterion):
    res, timing = study("ar1")
    w1 = max(res["w1_snre_snpe"])
    ok = w1 < 0.15 and timing["snre_s"] < 1800
    detail = f"W1 {w1:.3f} prior widths, {timing['snre_s']:.0f}s"
    record_criterion(7, "SNRE vs SNPE", ok, detail)
    assert ok, detail


def test_criterion_08_rbc_end_to_end(study, record_criterion):
    res, timing = study("rbc")
    ok = (
        res["n_covered"] >= 3
        and res["log_posterior_at_truth"] > res["log_prior_at_truth"]
        and timing["wall_s"] <= 3600
    )
    detail = (f"{res['n_covered']}/4 covered, log posterior at truth {res['log_posterior_at_truth']:.2f} "
              f"vs log prior {res['log_prior_at_truth']:.2f}, {timing['wall_s']:.0f}s")
    record_criterion(8, "RBC end to end", ok, detail)
    assert ok, detail


def test_criterion_09_vfi_suite(study, record_criterion):
    res, timing = study("cashflow")
    ok = (
        res["bruteforce_max_error"] < 1e-12
        and res["max_contraction"] <= res["beta"] + 0.01
        and res["alpha_mode_error"] < 0.1
        and res["rho_mode_error"] < 0.1
        and timing["wall_s"] <= 2700
    )
    detail = (f"Bellman vs loops {res['bruteforce_max_error']:.1e}, contraction {res['max_contraction']:.5f} "
              f"(beta {res['beta']:.5f}), mode errors alpha {res['alpha_mode_error']:.3f} "
              f"rho {res['rho_mode_error']:.3f}, {timing['wall_s']:.0f}s")
    record_criterion(9, "VFI suite", ok, detail)
    assert ok, detail


# criterion 10 ------------------------------------------------------------


def test_criterion_10_determinism(study_manifest, record_criterion, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(tomli_w.dumps({
        "model": "lgssm-ar1", "method": "snpe", "rounds": 2, "sims": 300, "posterior_samples": 1000,
        "train": {"max_epochs": 5}, "embedding": {"kind": "recurrent", "hidden_size": 8, "output_dim": 4},
    }))
    assert cli.main(["estimate", "--config", str(cfg), "--out", str(tmp_path / "est")]) == 0
    replays = {
        "kalman-oracle": study_manifest("kalman-oracle"),
        "conjugate": study_manifest("conjugate"),
        "estimate": tmp_path / "est" / "manifest.toml",
    }
    codes = {name: cli.main(["reproduce", str(path)]) for name, path in replays.items()}
    ok = all(code == cli.EXIT_OK for code in codes.values())
    detail = ", ".join(f"{name} {'identical' if c == 0 else f'exit {c}'}" for name, c in codes.items())
    record_criterion(10, "determinism", ok, detail)
    assert ok, detail
