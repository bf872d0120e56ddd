"""Summary networks turning a ``(T, V)`` panel into a fixed-length context vector."""

import numpy as np
import torch
from torch import nn

from .diff import DTYPE, Activation, as_tensor
from .errors import DimensionError, NumericError


def _panels(panel):
    x = as_tensor(panel)
    if x.ndim == 2:
        return x.unsqueeze(0), True
    if x.ndim != 3:
        raise DimensionError(f"expected a (T, V) panel or an (N, T, V) stack, got shape {tuple(x.shape)}")
    return x, False


class Standardizer(nn.Module):
    """Per-variable affine rescaling, with an optional log transform per variable.

    Statistics are pooled over simulations and time and are fixed after
    ``fit``; observed data go through the same map as simulated data.
    """

    def __init__(self, n_vars, log_vars=()):
        super().__init__()
        mask = torch.zeros(n_vars, dtype=torch.bool)
        for j in log_vars:
            mask[j] = True
        self.register_buffer("log_mask", mask)
        self.register_buffer("mean", torch.zeros(n_vars, dtype=DTYPE))
        self.register_buffer("std", torch.ones(n_vars, dtype=DTYPE))

    def _transform(self, x):
        if not torch.any(self.log_mask):
            return x
        if torch.any((x <= 0) & self.log_mask):
            raise NumericError("log-scaled variable has a nonpositive value")
        return torch.where(self.log_mask, torch.log(torch.where(self.log_mask, x, 1.0)), x)

    def fit(self, panels):
        x = self._transform(_panels(panels)[0])
        flat = x.reshape(-1, x.shape[-1])
        with torch.no_grad():
            self.mean.copy_(flat.mean(0))
            sd = flat.std(0)
            # constant variables (e.g. a degenerate simulator) keep unit scale
            self.std.copy_(torch.where(sd > 1e-12, sd, torch.ones_like(sd)))
        return self

    def forward(self, x):
        return (self._transform(x) - self.mean) / self.std


class DenseEmbedding(nn.Module):
    """Row-major flatten followed by a feed-forward network."""

    kind = "dense"

    def __init__(self, T, V, hidden=(64,), output_dim=32, slope=0.01, log_vars=()):
        super().__init__()
        self.T, self.V, self.hidden_sizes = T, V, tuple(hidden)
        self.output_dim, self.slope, self.log_vars = output_dim, slope, tuple(log_vars)
        self.standardizer = Standardizer(V, log_vars)
        sizes = (T * V, *self.hidden_sizes, output_dim)
        self.linears = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:]))
        self.act = Activation("leaky_relu", slope)

    @classmethod
    def identity(cls, T, V):
        """Single linear layer initialized to the identity: output is the flattened panel."""
        net = cls(T, V, hidden=(), output_dim=T * V)
        with torch.no_grad():
            net.linears[0].weight.copy_(torch.eye(T * V, dtype=DTYPE))
            net.linears[0].bias.zero_()
        return net

    def forward(self, panel):
        x, single = _panels(panel)
        if tuple(x.shape[1:]) != (self.T, self.V):
            raise DimensionError(f"panel shape {tuple(x.shape[1:])} does not match ({self.T}, {self.V})")
        h = self.standardizer(x).reshape(x.shape[0], -1)
        for i, layer in enumerate(self.linears):
            h = layer(h)
            if i < len(self.linears) - 1:
                h = self.act(h)
        return h[0] if single else h

    def descriptor(self):
        return {
            "kind": self.kind,
            "T": self.T,
            "V": self.V,
            "hidden": list(self.hidden_sizes),
            "output_dim": self.output_dim,
            "slope": self.slope,
            "log_vars": list(self.log_vars),
        }


class RecurrentEmbedding(nn.Module):
    """Single-layer GRU scanned over time; the final hidden state is projected linearly.

    Accepts any number of time steps, so panels longer or shorter than the
    training panels still embed.
    """

    kind = "recurrent"

    def __init__(self, V, hidden_size=64, output_dim=32, log_vars=(), T=None):
        super().__init__()
        self.V, self.hidden_size, self.output_dim = V, hidden_size, output_dim
        self.log_vars, self.T = tuple(log_vars), T
        self.standardizer = Standardizer(V, log_vars)
        self.gru = nn.GRU(V, hidden_size, batch_first=True, dtype=DTYPE)
        self.proj = nn.Linear(hidden_size, output_dim, dtype=DTYPE)

    def forward(self, panel):
        x, single = _panels(panel)
        if x.shape[-1] != self.V:
            raise DimensionError(f"panel has {x.shape[-1]} variables, expected {self.V}")
        _, h = self.gru(self.standardizer(x))
        out = self.proj(h[-1])
        return out[0] if single else out

    def descriptor(self):
        return {
            "kind": self.kind,
            "V": self.V,
            "T": self.T,
            "hidden_size": self.hidden_size,
            "output_dim": self.output_dim,
            "log_vars": list(self.log_vars),
        }


def dense_embed(net, panel):
    return net(panel)


def recurrent_embed(net, panel):
    return net(panel)


def make_embedding(kind, T, V, output_dim=32, hidden=(64,), log_vars=(), slope=0.01, hidden_size=64):
    if kind == "dense":
        return DenseEmbedding(T, V, hidden, output_dim, slope, log_vars)
    if kind == "recurrent":
        return RecurrentEmbedding(V, hidden_size, output_dim, log_vars, T=T)
    raise ValueError(f"unknown embedding kind {kind!r}; expected 'dense' or 'recurrent'")


def build_embedding(desc):
    desc = dict(desc)
    kind = desc.pop("kind")
    if kind == "dense":
        return DenseEmbedding(**desc)
    if kind == "recurrent":
        return RecurrentEmbedding(**desc)
    raise ValueError(f"unknown embedding kind {kind!r}")


def embed_numpy(net, panels, chunk=2048):
    """Embed a stack of panels without tracking gradients; returns a numpy array."""
    panels = np.asarray(panels, dtype=np.float64)
    with torch.no_grad():
        parts = [net(torch.as_tensor(panels[i : i + chunk])) for i in range(0, len(panels), chunk)]
    return torch.cat(parts).numpy()
