"""Conditional normalizing flows over parameter vectors.

``layer.forward`` is the sampling direction (base draws towards
parameters).  Conditioners read the layer's output coordinates, so the
inverse used for log-densities is one parallel pass while the forward
pass is sequential over coordinates.
"""

import json
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .diff import DTYPE, Activation, ParamStore, TrainConfig, as_tensor, leaky_relu, train
from .errors import DimensionError, NumericError

LOG_SCALE_CLAMP = 7.0
BISECT_LO, BISECT_HI, BISECT_ITERS = -40.0, 40.0, 80
_LOG_2PI = math.log(2.0 * math.pi)


class MaskedLinear(nn.Linear):
    def __init__(self, in_features, out_features, mask):
        super().__init__(in_features, out_features, dtype=DTYPE)
        self.register_buffer("mask", torch.as_tensor(mask, dtype=DTYPE))

    def forward(self, x):
        return F.linear(x, self.weight * self.mask, self.bias)


class MaskedConditioner(nn.Module):
    """Masked feed-forward network emitting ``n_params`` pseudo-parameters per coordinate.

    Output for coordinate ``i`` (0-based) sees inputs ``< i`` and the context
    only.  Outputs are returned with shape ``(N, n_params, dim)``.
    """

    def __init__(self, dim, context_dim, n_params, hidden=(50, 50), slope=0.01):
        super().__init__()
        self.dim, self.context_dim, self.n_params = dim, context_dim, n_params
        hidden = tuple(hidden)
        if not hidden:
            raise ValueError("conditioner needs at least one hidden layer")
        in_deg = np.arange(1, dim + 1)
        layers = []
        prev_deg = in_deg
        for i, width in enumerate(hidden):
            deg = np.arange(width) % dim  # degrees 0..dim-1
            mask = (deg[:, None] >= prev_deg[None, :]).astype(float)
            layers.append(MaskedLinear(len(prev_deg), width, mask))
            prev_deg = deg
        self.hidden = nn.ModuleList(layers)
        out_deg = np.tile(np.arange(1, dim + 1), n_params)
        self.out = MaskedLinear(len(prev_deg), n_params * dim, (out_deg[:, None] > prev_deg[None, :]).astype(float))
        self.context = nn.Linear(context_dim, hidden[0], bias=False, dtype=DTYPE) if context_dim else None
        self.act = Activation("leaky_relu", slope)
        with torch.no_grad():
            # start close to the identity map
            self.out.weight.mul_(1e-2)
            self.out.bias.zero_()

    def forward(self, y, ctx=None):
        h = self.hidden[0](y)
        if self.context is not None:
            h = h + self.context(ctx)
        h = self.act(h)
        for layer in self.hidden[1:]:
            h = self.act(layer(h))
        return self.out(h).reshape(-1, self.n_params, self.dim)

    def set_constant_output(self, values):
        """Force the output to ``values`` (shape ``(n_params, dim)``) for every input."""
        values = as_tensor(values).reshape(-1)
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.copy_(values)


class AffineARLayer(nn.Module):
    """``z_i = shift_i(z_<i, ctx) + exp(s_i(z_<i, ctx)) * y_i``, optionally followed by a leaky-ReLU link.

    The conditioner reads the already-produced outputs, so the inverse
    (density direction) is a single parallel pass and the forward
    (sampling direction) is sequential over coordinates.
    """

    kind = "affine_ar"

    def __init__(self, dim, context_dim=0, hidden=(50, 50), slope=0.01, link_slope=None):
        super().__init__()
        if link_slope is not None and not 0.0 < link_slope < 1.0:
            raise ValueError("link slope must lie in (0, 1)")
        self.dim, self.context_dim = dim, context_dim
        self.hidden_sizes, self.slope, self.link_slope = tuple(hidden), slope, link_slope
        self.conditioner = MaskedConditioner(dim, context_dim, 2, hidden, slope)

    def _params(self, z, ctx):
        out = self.conditioner(z, ctx)
        shift = out[:, 0]
        log_scale = torch.clamp(out[:, 1], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        return shift, log_scale

    def _link_logdet(self, u):
        if self.link_slope is None:
            return 0.0
        return torch.where(u >= 0, 0.0, math.log(self.link_slope)).sum(-1)

    def forward(self, y, ctx=None):
        z = torch.zeros_like(y)
        for i in range(self.dim):
            shift, log_scale = self._params(z, ctx)
            u = shift[:, i] + torch.exp(log_scale[:, i]) * y[:, i]
            z = z.clone()
            z[:, i] = u if self.link_slope is None else leaky_relu(u, self.link_slope)
        shift, log_scale = self._params(z, ctx)
        u = shift + torch.exp(log_scale) * y
        z = u if self.link_slope is None else leaky_relu(u, self.link_slope)
        return z, log_scale.sum(-1) + self._link_logdet(u)

    def inverse(self, z, ctx=None):
        u = z if self.link_slope is None else torch.where(z >= 0, z, z / self.link_slope)
        shift, log_scale = self._params(z, ctx)
        y = (u - shift) * torch.exp(-log_scale)
        return y, -log_scale.sum(-1) - self._link_logdet(u)

    def descriptor(self):
        return {
            "kind": self.kind,
            "hidden": list(self.hidden_sizes),
            "slope": self.slope,
            "link_slope": self.link_slope,
        }


class SigmoidMixtureLayer(nn.Module):
    """``z_i = logit(sum_k w_k sigmoid(alpha_k y_i + beta_k))`` with ``w, alpha, beta`` conditioned on ``z_<i``.

    Weights come from a softmax and slopes from a softplus, so each
    coordinate map is strictly increasing.  There is no closed-form
    inverse: it is found by bisection, and gradients of the inverse are
    recovered with the implicit-function identity ``dy = -(dg/dp) / (dg/dy)``.
    """

    kind = "sigmoid_mixture"

    def __init__(self, dim, context_dim=0, n_components=8, hidden=(50, 50), slope=0.01):
        super().__init__()
        self.dim, self.context_dim, self.n_components = dim, context_dim, n_components
        self.hidden_sizes, self.slope = tuple(hidden), slope
        self.conditioner = MaskedConditioner(dim, context_dim, 3 * n_components, hidden, slope)
        with torch.no_grad():
            # spread initial centres so the components are not interchangeable
            K = n_components
            centres = torch.linspace(-2.0, 2.0, K, dtype=DTYPE)
            bias = torch.zeros(3 * K, dim, dtype=DTYPE)
            bias[2 * K :] = -centres[:, None]
            self.conditioner.out.bias.copy_(bias.reshape(-1))

    def _params(self, z, ctx):
        out = self.conditioner(z, ctx)
        K = self.n_components
        log_w = torch.log_softmax(out[:, :K], dim=1)
        alpha = F.softplus(out[:, K : 2 * K]) + 1e-4
        beta = out[:, 2 * K :]
        return log_w, alpha, beta  # each (N, K, dim)

    @staticmethod
    def _transform(y, log_w, alpha, beta):
        """Returns ``(z, log dz/dy)`` elementwise, evaluated in the log domain."""
        a = alpha * y.unsqueeze(1) + beta
        log_s = torch.logsumexp(log_w + F.logsigmoid(a), dim=1)
        log_1ms = torch.logsumexp(log_w + F.logsigmoid(-a), dim=1)
        log_dz = (
            torch.logsumexp(log_w + torch.log(alpha) + F.logsigmoid(a) + F.logsigmoid(-a), dim=1)
            - log_s
            - log_1ms
        )
        return log_s - log_1ms, log_dz

    def forward(self, y, ctx=None):
        z = torch.zeros_like(y)
        for i in range(self.dim):
            params = self._params(z, ctx)
            z = z.clone()
            z[:, i] = self._transform(y, *params)[0][:, i]
        z, log_dz = self._transform(y, *self._params(z, ctx))
        return z, log_dz.sum(-1)

    def inverse(self, z, ctx=None):
        log_w, alpha, beta = self._params(z, ctx)
        with torch.no_grad():
            lw, al, be = log_w.detach(), alpha.detach(), beta.detach()

            def fwd(v):
                a = al * v.unsqueeze(1) + be
                ls = F.logsigmoid(a)
                # log sigmoid(-a) = log sigmoid(a) - a
                return torch.logsumexp(lw + ls, dim=1) - torch.logsumexp(lw + ls - a, dim=1)

            lo = torch.full_like(z, BISECT_LO)
            hi = torch.full_like(z, BISECT_HI)
            outside = (fwd(lo) > z) | (fwd(hi) < z)
            if torch.any(outside):
                coords = sorted(set(torch.nonzero(outside)[:, 1].tolist()))
                raise NumericError(f"bisection failed to bracket coordinates {coords}")
            for it in range(BISECT_ITERS):
                mid = 0.5 * (lo + hi)
                below = fwd(mid) < z
                lo = torch.where(below, mid, lo)
                hi = torch.where(below, hi, mid)
                # brackets stop shrinking once they reach float spacing
                if it % 8 == 7 and torch.all(hi - lo <= 1e-14 * torch.clamp(hi.abs(), min=1.0)):
                    break
            root = 0.5 * (lo + hi)
        g, log_dz = self._transform(root, log_w, alpha, beta)
        # value stays at the root; derivatives follow the implicit function theorem
        y = root - (g - z) * torch.exp(-log_dz.detach())
        _, log_dz = self._transform(y, log_w, alpha, beta)
        return y, -log_dz.sum(-1)

    def descriptor(self):
        return {
            "kind": self.kind,
            "hidden": list(self.hidden_sizes),
            "slope": self.slope,
            "n_components": self.n_components,
        }


class PermutationLayer(nn.Module):
    kind = "permutation"

    def __init__(self, permutation):
        super().__init__()
        perm = np.asarray(permutation, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise ValueError(f"not a permutation: {perm.tolist()}")
        self.dim = len(perm)
        self.register_buffer("perm", torch.as_tensor(perm), persistent=False)
        self.register_buffer("inv", torch.as_tensor(np.argsort(perm)), persistent=False)

    def forward(self, y, ctx=None):
        return y[:, self.perm], torch.zeros(y.shape[0], dtype=DTYPE)

    def inverse(self, z, ctx=None):
        return z[:, self.inv], torch.zeros(z.shape[0], dtype=DTYPE)

    def descriptor(self):
        return {"kind": self.kind, "permutation": self.perm.tolist()}


class StandardizeLayer(nn.Module):
    """Fixed elementwise ``mean + std * y`` placing standardized draws on the parameter scale."""

    kind = "standardize"

    def __init__(self, mean, std):
        super().__init__()
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        if np.any(std <= 0):
            raise ValueError("standardization scale must be positive")
        self.dim = len(mean)
        self.register_buffer("mean", torch.as_tensor(mean))
        self.register_buffer("std", torch.as_tensor(std))

    def _logdet(self, n):
        return torch.full((n,), float(torch.log(self.std).sum()), dtype=DTYPE)

    def forward(self, y, ctx=None):
        return y * self.std + self.mean, self._logdet(y.shape[0])

    def inverse(self, z, ctx=None):
        return (z - self.mean) / self.std, -self._logdet(z.shape[0])

    def descriptor(self):
        return {"kind": self.kind, "mean": self.mean.tolist(), "std": self.std.tolist()}


class NormalizingFlow(nn.Module):
    """Ordered stack of layers applied base-to-parameters, with a standard-normal base.

    ``layers[0]`` acts on base draws and ``layers[-1]`` emits parameters.
    Densities run the stack backwards through each layer's inverse.
    """

    def __init__(self, dim, context_dim, layers):
        super().__init__()
        self.dim, self.context_dim = dim, context_dim
        for i, layer in enumerate(layers):
            if layer.dim != dim:
                raise DimensionError(f"layer {i} has dim {layer.dim}, flow has {dim}")
        self.layers = nn.ModuleList(layers)

    def _rows(self, v):
        v = as_tensor(v)
        if v.ndim == 1:
            v = v.unsqueeze(0)
        if v.shape[-1] != self.dim:
            raise DimensionError(f"input has length {v.shape[-1]}, flow dim is {self.dim}")
        return v

    def _context(self, ctx, n):
        if not self.context_dim:
            return None
        if ctx is None:
            raise DimensionError("this flow needs a context vector")
        ctx = as_tensor(ctx)
        if ctx.ndim == 1:
            ctx = ctx.unsqueeze(0)
        if ctx.shape[-1] != self.context_dim:
            raise DimensionError(f"context has length {ctx.shape[-1]}, expected {self.context_dim}")
        if ctx.shape[0] == 1 and n > 1:
            ctx = ctx.expand(n, -1)
        return ctx

    def to_base(self, theta, ctx=None):
        """Map parameters to base draws; returns ``(z, summed inverse log-dets)``."""
        x = self._rows(theta)
        ctx = self._context(ctx, x.shape[0])
        total = torch.zeros(x.shape[0], dtype=DTYPE)
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            x, ld = layer.inverse(x, ctx)
            total = total + ld
            if not (torch.all(torch.isfinite(x)) and torch.all(torch.isfinite(ld))):
                raise NumericError(f"non-finite output in flow layer {i} ({layer.kind})")
        return x, total

    def from_base(self, z, ctx=None):
        """Map base draws to parameters; returns ``(theta, summed forward log-dets)``."""
        x = self._rows(z)
        ctx = self._context(ctx, x.shape[0])
        total = torch.zeros(x.shape[0], dtype=DTYPE)
        for i, layer in enumerate(self.layers):
            x, ld = layer(x, ctx)
            total = total + ld
            if not torch.all(torch.isfinite(x)):
                raise NumericError(f"non-finite output in flow layer {i} ({layer.kind})")
        return x, total

    def log_prob(self, theta, ctx=None):
        z, logdet = self.to_base(theta, ctx)
        return -0.5 * (z**2).sum(-1) - 0.5 * self.dim * _LOG_2PI + logdet

    def sample(self, n, ctx=None, rng=None):
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = rng if rng is not None else np.random.default_rng()
        z = torch.as_tensor(rng.standard_normal((n, self.dim)), dtype=DTYPE)
        with torch.no_grad():
            return self.from_base(z, ctx)[0]

    def descriptor(self):
        return {
            "dim": self.dim,
            "context_dim": self.context_dim,
            "layers": [layer.descriptor() for layer in self.layers],
        }


def build_layer(desc, dim, context_dim):
    kind = desc["kind"]
    if kind == "affine_ar":
        return AffineARLayer(dim, context_dim, desc["hidden"], desc["slope"], desc.get("link_slope"))
    if kind == "sigmoid_mixture":
        return SigmoidMixtureLayer(dim, context_dim, desc["n_components"], desc["hidden"], desc["slope"])
    if kind == "permutation":
        return PermutationLayer(desc["permutation"])
    if kind == "standardize":
        return StandardizeLayer(desc["mean"], desc["std"])
    raise ValueError(f"unknown layer kind {kind!r}")


def build_flow(desc):
    dim, context_dim = desc["dim"], desc["context_dim"]
    return NormalizingFlow(dim, context_dim, [build_layer(d, dim, context_dim) for d in desc["layers"]])


def make_flow(
    dim,
    context_dim=0,
    n_layers=5,
    kind="affine",
    hidden=(50, 50),
    slope=0.01,
    n_components=8,
    link_slope=None,
    mean=None,
    std=None,
):
    """Default stack: transforms alternating with reversal permutations.

    ``n_layers`` counts transform and permutation layers alike, so the
    default 5 holds three transforms.  Given ``mean``/``std``, a fixed
    rescaling to the parameter scale is appended as the last layer.
    """
    layers = []
    reverse = list(range(dim))[::-1]
    for i in range(n_layers):
        if i % 2 == 1:
            layers.append(PermutationLayer(reverse))
        elif kind == "affine":
            layers.append(AffineARLayer(dim, context_dim, hidden, slope, link_slope))
        elif kind == "sigmoid_mixture":
            layers.append(SigmoidMixtureLayer(dim, context_dim, n_components, hidden, slope))
        else:
            raise ValueError(f"unknown flow kind {kind!r}")
    if mean is not None:
        layers.append(StandardizeLayer(mean, np.ones(dim) if std is None else std))
    return NormalizingFlow(dim, context_dim, layers)


def _batched(v, ctx, dim):
    v = as_tensor(v)
    single = v.ndim == 1
    if single:
        v = v.unsqueeze(0)
    if v.shape[-1] != dim:
        raise DimensionError(f"input has length {v.shape[-1]}, layer dim is {dim}")
    if ctx is not None:
        ctx = as_tensor(ctx)
        if ctx.ndim == 1:
            ctx = ctx.unsqueeze(0).expand(v.shape[0], -1)
    return v, ctx, single


def layer_forward(layer, y, ctx=None):
    """Apply one layer in the sampling direction; returns ``(z, logdet)``.

    A vector input gives a vector and a scalar back; a matrix works row-wise.
    """
    y, ctx, single = _batched(y, ctx, layer.dim)
    z, logdet = layer(y, ctx)
    if not (torch.all(torch.isfinite(z)) and torch.all(torch.isfinite(logdet))):
        raise NumericError(f"non-finite output in layer {layer.kind}")
    return (z[0], logdet[0]) if single else (z, logdet)


def layer_inverse(layer, z, ctx=None):
    z, ctx, single = _batched(z, ctx, layer.dim)
    if not torch.all(torch.isfinite(z)):
        raise NumericError("layer_inverse needs finite input")
    with torch.no_grad():
        y, _ = layer.inverse(z, ctx)
    return y[0] if single else y


def flow_log_prob(flow, theta, ctx=None):
    out = flow.log_prob(theta, ctx)
    return out[0] if as_tensor(theta).ndim == 1 else out


def flow_sample(flow, n, ctx=None, rng=None):
    return flow.sample(n, ctx, rng)


def fit_mle(flow, theta, ctx=None, weights=None, cfg=None, rng=None, log=None):
    """Weighted maximum likelihood: minimize ``-mean(w_i log q(theta_i | ctx_i))``.

    Returns ``(flow, trace)``; the flow is trained in place and left at the
    parameters with the best held-out loss.
    """
    cfg = cfg or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    theta = as_tensor(theta)
    if theta.ndim == 1:
        theta = theta.unsqueeze(1)
    n = theta.shape[0]
    ctx = None if ctx is None else as_tensor(ctx)
    if weights is None:
        w = torch.ones(n, dtype=DTYPE)
    else:
        w = as_tensor(weights)
        if w.shape != (n,) or torch.any(w < 0):
            raise ValueError("weights must be a nonnegative vector, one per sample")

    def batch_loss(idx, train=True):
        c = None if ctx is None else ctx[idx]
        return -(w[idx] * flow.log_prob(theta[idx], c)).mean()

    trace = train(flow, batch_loss, n, cfg, rng, log=log)
    return flow, trace


def save_flow(flow, directory, extra=None):
    """Write ``architecture.json`` and ``params.npz`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    desc = {"flow": flow.descriptor(), **(extra or {})}
    (directory / "architecture.json").write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
    ParamStore(flow).save(directory / "params.npz")


def load_flow(directory):
    directory = Path(directory)
    desc = json.loads((directory / "architecture.json").read_text())
    flow = build_flow(desc["flow"])
    ParamStore(flow).load(directory / "params.npz")
    return flow
