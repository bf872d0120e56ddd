"""``sbiflow`` command line: simulate, estimate, diagnose, experiment, reproduce.

Each command writes ``manifest.toml`` into its output directory. The
manifest holds the parsed arguments, the effective configuration and its
hash, library versions, the numeric results, SHA-256 digests of every
CSV written and (separately) wall-clock timing. ``reproduce`` replays a
manifest and compares everything except timing.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import platform
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import scipy
import torch

from . import seeding
from .config import RunConfig, config_from_dict, load_config
from .diagnostics import diagnose
from .errors import ContractError, NumericError, SimulationBudgetExceeded, UsageError
from .io import config_hash, read_csv, read_manifest, read_panel, write_manifest, write_panel, write_samples
from .mcmc import gelman_rubin, mh_posterior, pool
from .models import MODEL_VERSION, REGISTRY, get_model
from .snpe import UniformBoxPrior, run_snpe, save_posterior
from .snre import run_snre, save_ratio_posterior

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BUDGET = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5

log = logging.getLogger("sbiflow")


def versions():
    return {
        "sbiflow": __version__,
        "model_version": MODEL_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parse_theta(text, model):
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--theta must be comma-separated numbers, got {text!r}") from None
    if len(values) != model.dim:
        raise UsageError(f"{model.name} takes {model.dim} parameters {list(model.param_names)}, got {len(values)}")
    return np.asarray(values)


def check_in_box(theta, prior):
    for name, v, lo, hi in zip(prior.names, theta, prior.low, prior.high):
        if not math.isfinite(v):
            raise UsageError(f"{name}={v} is not finite")
        if v < lo:
            raise UsageError(f"{name}={v} is below its lower bound {lo}")
        if v > hi:
            raise UsageError(f"{name}={v} is above its upper bound {hi}")


def _model(name):
    try:
        return get_model(name)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None


def _prior(model, overrides=None):
    try:
        return UniformBoxPrior.from_model(model, overrides)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc.args[0])) from None


def _with_T(model, T):
    if T is None:
        return model
    if T < 1:
        raise UsageError("--T must be positive")
    return dataclasses.replace(model, T=int(T))


# commands ---------------------------------------------------------------


def cmd_simulate(args):
    model = _with_T(_model(args.model), args.T)
    prior = _prior(model)
    if args.theta is not None and args.prior_draw:
        raise UsageError("give either --theta or --prior-draw, not both")
    if args.prior_draw:
        theta = prior.sample(1, seeding.stream(args.seed, "prior", 0))[0]
    elif args.theta is not None:
        theta = parse_theta(args.theta, model)
    else:
        theta = np.asarray(model.default_theta)
    check_in_box(theta, prior)
    panel = model(theta, seeding.int_seed(args.seed, "shocks", 0, 0))
    out = Path(args.out)
    path = write_panel(out / "panel.csv", panel, model.observables)
    results = {
        "model": model.name,
        "theta": dict(zip(model.param_names, theta.tolist())),
        "T": model.T,
        "burn_in": model.burn_in,
        "rows": len(panel),
    }
    return out, results, {"panel.csv": file_digest(path)}, {}


def _run_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    data = cfg.to_dict()
    for key in ("model", "method", "seed", "out", "T", "rounds", "sims"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if getattr(args, "theta", None) is not None:
        data["theta"] = [float(v) for v in args.theta.split(",")]
    if getattr(args, "observed", None) is not None:
        data["observed"] = str(args.observed)
    return config_from_dict(data)


def cmd_estimate(args):
    cfg = _run_config(args) if not isinstance(args, RunConfig) else args
    model = _model(cfg.model)
    prior = _prior(model, cfg.prior)
    out = Path(cfg.out)
    digests = {}

    if cfg.observed:
        _, x_obs = read_panel(cfg.observed, expected=model.observables)
        model = _with_T(model, len(x_obs))
        theta_obs = None
    else:
        model = _with_T(model, cfg.T)
        theta_obs = np.asarray(cfg.theta if cfg.theta is not None else model.default_theta, dtype=float)
        if theta_obs.shape != (model.dim,):
            raise UsageError(f"theta needs {model.dim} values {list(model.param_names)}")
        check_in_box(theta_obs, prior)
        x_obs = model(theta_obs, seeding.int_seed(cfg.seed, "shocks", 0, 0))
        digests["observed.csv"] = file_digest(write_panel(out / "observed.csv", x_obs, model.observables))

    torch.set_num_threads(1)
    results = {"model": model.name, "method": cfg.method, "T": len(x_obs)}
    if theta_obs is not None:
        results["theta_observed"] = theta_obs.tolist()
    t0 = time.perf_counter()
    if cfg.method == "mh":
        if model.ssm_builder is None:
            raise UsageError(f"method=mh needs a linear-Gaussian model; {model.name} has no state-space form")
        chains = mh_posterior(model.ssm_builder, prior, x_obs, cfg=cfg.mh, rng=seeding.stream(cfg.seed, "mh"))
        samples = pool(chains)
        results["acceptance_rate"] = [c.acceptance_rate for c in chains]
        results["step_sizes"] = [c.step_sizes.tolist() for c in chains]
        if len(chains) > 1:
            results["gelman_rubin"] = gelman_rubin(chains).tolist()
    elif cfg.method == "snpe":
        post, man = run_snpe(model, prior, x_obs, R=cfg.rounds, S=cfg.sims, cfg=cfg.snpe_config(), seed=cfg.seed)
        samples = post.sample(cfg.posterior_samples, seeding.stream(cfg.seed, "posterior"))
        save_posterior(post, out / "posterior")
        results["rounds"] = man["rounds"]
        results["acceptance_rate"] = post.acceptance_rate
    else:
        post, man = run_snre(model, prior, x_obs, R=cfg.rounds, S=cfg.sims, cfg=cfg.snre_config(), seed=cfg.seed)
        samples = post.sample(cfg.posterior_samples, seeding.stream(cfg.seed, "posterior"))
        save_ratio_posterior(post, out / "posterior")
        results["rounds"] = man["rounds"]
        results["acceptance_rate"] = post.acceptance_rate
    elapsed = time.perf_counter() - t0

    digests["samples.csv"] = file_digest(write_samples(out / "samples.csv", samples, model.param_names))
    results["n_samples"] = len(samples)
    results["mean"] = samples.mean(0).tolist()
    results["sd"] = samples.std(0, ddof=1).tolist()
    return out, results, digests, {"estimate_s": elapsed}, cfg


def _read_samples(path):
    try:
        header, data = read_csv(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read samples from {path}: {exc}") from None
    return header, data


def cmd_diagnose(args):
    names, x = _read_samples(args.samples)
    other = None
    if args.other is not None:
        names2, other = _read_samples(args.other)
        if names2 != names:
            raise UsageError(f"column mismatch: {args.samples} has {names}, {args.other} has {names2}")
    low = high = None
    if args.model is not None:
        model = _model(args.model)
        if list(model.param_names) != names:
            raise UsageError(f"columns {names} do not match {model.name} parameters {list(model.param_names)}")
        prior = _prior(model)
        low, high = prior.low, prior.high
    truth = None
    if args.truth is not None:
        truth = [float(v) for v in args.truth.split(",")]
        if len(truth) != len(names):
            raise UsageError(f"--truth needs {len(names)} values for columns {names}")
    out = Path(args.out)
    res = diagnose(x, names, out, low, high, other, truth, bins=args.bins)
    results = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in res.items()}
    digests = {p.name: file_digest(p) for p in sorted(out.glob("*.csv"))}
    return out, results, digests, {}


def cmd_experiment(args):
    from .experiments import EXPERIMENTS

    if args.name not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {args.name!r}; available: {sorted(EXPERIMENTS)}")
    results, timing = EXPERIMENTS[args.name](args.seed)
    return Path(args.out), results, {}, timing


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "diagnose": cmd_diagnose,
    "experiment": cmd_experiment,
}


def _arg_dict(args):
    if isinstance(args, RunConfig):
        return args.to_dict()
    return {k: v for k, v in vars(args).items() if k not in ("func", "verbose") and v is not None}


def execute(command, args):
    """Run one command and write its manifest; returns the manifest dict."""
    out = COMMANDS[command](args)
    out_dir, results, digests, timing = out[:4]
    manifest = {"command": command, "args": _arg_dict(args)}
    if len(out) == 5:
        manifest["config"] = out[4].to_dict()
        manifest["config_hash"] = config_hash(manifest["config"])
    else:
        manifest["config_hash"] = config_hash(manifest["args"])
    manifest.update({"versions": versions(), "results": results, "outputs": digests, "timing": timing})
    write_manifest(Path(out_dir) / "manifest.toml", manifest)
    return manifest


def _strip_timing(value):
    if isinstance(value, dict):
        return {k: _strip_timing(v) for k, v in value.items() if k != "timing"}
    if isinstance(value, list):
        return [_strip_timing(v) for v in value]
    return value


def compare_manifests(old, new):
    """Paths (dotted) of every result or output digest that differs, ignoring timing."""
    diffs = []

    def walk(a, b, where):
        if isinstance(a, dict) and isinstance(b, dict):
            for k in sorted(set(a) | set(b)):
                walk(a.get(k), b.get(k), f"{where}.{k}" if where else k)
        elif isinstance(a, list) and isinstance(b, list) and len(a) == len(b):
            for i, (x, y) in enumerate(zip(a, b)):
                walk(x, y, f"{where}[{i}]")
        elif a != b and not (isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b)):
            diffs.append(where)

    # round-trip through the manifest encoding so both sides have the same types
    for key in ("results", "outputs"):
        walk(_strip_timing(old.get(key, {})), _strip_timing(new.get(key, {})), key)
    return diffs


def _replay_args(manifest, out):
    command = manifest["command"]
    if command == "estimate":
        cfg = dict(manifest["config"])
        cfg["out"] = str(out)
        return config_from_dict(cfg)
    ns = argparse.Namespace(**{**_defaults(command), **manifest["args"]})
    ns.out = str(out)
    return ns


def _defaults(command):
    parser = build_parser()
    return vars(parser.parse_args([command, *_required_stub(command)]))


def _required_stub(command):
    return {"simulate": ["--model", "rbc"], "diagnose": ["x.csv"], "experiment": ["kalman-oracle"]}.get(command, [])


def cmd_reproduce(args):
    path = Path(args.manifest)
    if path.is_dir():
        path = path / "manifest.toml"
    try:
        old = read_manifest(path)
    except FileNotFoundError:
        raise UsageError(f"manifest {path} not found") from None
    command = old.get("command")
    if command not in COMMANDS:
        raise UsageError(f"manifest names unknown command {command!r}")
    tmp = None
    out = Path(args.out) if args.out else Path(tmp := tempfile.mkdtemp(prefix="sbiflow-replay-"))
    try:
        execute(command, _replay_args(old, out))
        new = read_manifest(out / "manifest.toml")
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)
    diffs = compare_manifests(old, new)
    if diffs:
        print(f"MISMATCH in {len(diffs)} value(s):")
        for d in diffs:
            print(f"  {d}")
        return EXIT_MISMATCH
    print(f"reproduced {command} from {path}: all results and output digests identical")
    return EXIT_OK


# argument parsing -------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="sbiflow", description="Simulation-based inference for dynamic models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate one panel from a registered model")
    s.add_argument("--model", required=True, choices=sorted(REGISTRY))
    s.add_argument("--theta", help="comma-separated parameters in model order (default: documented values)")
    s.add_argument("--prior-draw", action="store_true", help="draw theta from the prior using --seed")
    s.add_argument("--T", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="simulate")

    e = sub.add_parser("estimate", help="estimate a posterior with snpe, snre or mh")
    e.add_argument("observed", nargs="?", help="observed panel CSV (default: simulate one at --theta)")
    e.add_argument("--config", help="TOML run configuration")
    e.add_argument("--model")
    e.add_argument("--method", choices=["snpe", "snre", "mh"])
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--theta")
    e.add_argument("--T", type=int)
    e.add_argument("--rounds", type=int)
    e.add_argument("--sims", type=int)

    d = sub.add_parser("diagnose", help="histogram, summary, coverage and comparison tables")
    d.add_argument("samples")
    d.add_argument("other", nargs="?")
    d.add_argument("--truth", help="comma-separated true parameter values")
    d.add_argument("--model", help="use this model's prior box for histogram ranges")
    d.add_argument("--bins", type=int, default=50)
    d.add_argument("--out", default="diagnostics")

    x = sub.add_parser("experiment", help="run a named validation study")
    x.add_argument("name")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", default="experiment")

    r = sub.add_parser("reproduce", help="replay a manifest and compare every reported number")
    r.add_argument("manifest", help="manifest.toml or the directory holding it")
    r.add_argument("--out", help="directory for the replay (default: a temporary directory)")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "reproduce":
            return cmd_reproduce(args)
        manifest = execute(args.command, args)
    except (UsageError, ContractError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationBudgetExceeded as exc:
        print(f"simulation failure budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    # per-epoch loss traces stay in the manifest only
    brief = {k: v for k, v in manifest["results"].items() if k != "rounds"}
    print(json.dumps(brief, indent=2, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
