"""Dense primitives, gradients and the optimizer shared by all trainable parts.

Reverse-mode gradients come from torch's dynamic autograd tape in float64.
``finite_diff_grad`` is an independent central-difference oracle that only
ever sees plain numpy arrays.
"""

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError, DimensionError, NumericError

DTYPE = torch.float64

ACTIVATIONS = ("leaky_relu", "sigmoid", "softplus", "tanh")


def as_tensor(x, requires_grad=False):
    if isinstance(x, torch.Tensor):
        t = x.to(DTYPE)
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def affine(W, b, x):
    """``W x + b`` for a vector ``x`` or row-wise for a batch ``x`` of shape (N, in)."""
    W, b, x = as_tensor(W), as_tensor(b), as_tensor(x)
    if W.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"W must be a matrix and b a vector, got {tuple(W.shape)}, {tuple(b.shape)}")
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"W has {W.shape[1]} columns but x has length {x.shape[-1]}")
    if b.shape[0] != W.shape[0]:
        raise DimensionError(f"b has length {b.shape[0]} but W has {W.shape[0]} rows")
    return x @ W.T + b


def leaky_relu(x, slope=0.01):
    # derivative at exactly 0 is the positive-side slope 1
    return torch.where(x >= 0, x, slope * x)


def activation(kind, x, slope=0.01):
    x = as_tensor(x)
    if kind == "leaky_relu":
        if not 0.0 < slope < 1.0:
            raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    if kind == "softplus":
        return torch.nn.functional.softplus(x)
    if kind == "tanh":
        return torch.tanh(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


class Activation(torch.nn.Module):
    def __init__(self, kind="leaky_relu", slope=0.01):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self.slope = slope

    def forward(self, x):
        return activation(self.kind, x, self.slope)


def backward(output):
    """Populate ``.grad`` of every leaf that ``output`` depends on."""
    if not isinstance(output, torch.Tensor) or output.numel() != 1:
        shape = tuple(output.shape) if isinstance(output, torch.Tensor) else type(output).__name__
        raise ContractError(f"backward needs a scalar output, got {shape}")
    output.reshape(()).backward()


def finite_diff_grad(f, params, eps=1e-5):
    """Central-difference gradient of a scalar function of a flat float64 array."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.array(params, dtype=np.float64).ravel()
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + eps
        up = float(f(p.copy()))
        p[i] = orig - eps
        down = float(f(p.copy()))
        p[i] = orig
        grad[i] = (up - down) / (2.0 * eps)
    return grad


class ParamStore:
    """Named flat blocks of a module's state plus a mirrored gradient layout.

    Trainable blocks are the module's parameters; buffers (masks,
    standardization constants) are carried as non-trainable blocks so a
    checkpoint restores the module exactly.
    """

    def __init__(self, module):
        self.module = module

    def _entries(self):
        params = dict(self.module.named_parameters())
        for name, t in self.module.state_dict(keep_vars=True).items():
            yield name, t, name in params

    def layout(self):
        return [
            {"name": name, "shape": list(t.shape), "trainable": trainable}
            for name, t, trainable in self._entries()
        ]

    def parameters(self):
        return [t for _, t, trainable in self._entries() if trainable]

    @property
    def size(self):
        return sum(p.numel() for p in self.parameters())

    def values(self, include_buffers=False):
        ts = [t for _, t, tr in self._entries() if tr or include_buffers]
        if not ts:
            return np.zeros(0)
        return torch.cat([t.detach().reshape(-1).to(DTYPE) for t in ts]).numpy().copy()

    def grads(self):
        out = []
        for p in self.parameters():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            out.append(g.detach().reshape(-1))
        return torch.cat(out).numpy().copy() if out else np.zeros(0)

    def set_values(self, flat, include_buffers=False):
        flat = np.asarray(flat, dtype=np.float64).ravel()
        targets = [t for _, t, tr in self._entries() if tr or include_buffers]
        expected = sum(t.numel() for t in targets)
        if expected != flat.size:
            raise DimensionError(f"expected {expected} values, got {flat.size}")
        offset = 0
        with torch.no_grad():
            for t in targets:
                n = t.numel()
                t.copy_(torch.as_tensor(flat[offset : offset + n]).reshape(t.shape).to(t.dtype))
                offset += n

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def snapshot(self):
        return copy.deepcopy(self.module.state_dict())

    def restore(self, snap):
        self.module.load_state_dict(snap)

    def save(self, path):
        """Write ``(layout descriptor, flat float64 array)`` to an ``.npz`` file."""
        layout = self.layout()
        values = self.values(include_buffers=True)
        np.savez(path, layout=np.array(json.dumps(layout)), values=values)

    def load(self, path):
        with np.load(path, allow_pickle=False) as data:
            layout = json.loads(str(data["layout"]))
            values = data["values"]
        if layout != self.layout():
            raise DimensionError("checkpoint layout does not match the module")
        self.set_values(values, include_buffers=True)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(store, state):
    """Bias-corrected Adam update of every trainable block, in place."""
    params = store.parameters()
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    bad = [
        name
        for name, p, trainable in store._entries()
        if trainable and p.grad is not None and not torch.all(torch.isfinite(p.grad))
    ]
    if bad:
        raise NumericError(f"non-finite gradient in blocks {bad} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for p, m, v in zip(params, state.m, state.v):
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)
    return state


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 20
    val_fraction: float = 0.1
    min_delta: float = 0.0
    # multiply the step size by lr_decay after every decay_patience epochs without improvement
    lr_decay: float = 0.5
    decay_patience: int = 5


def train(module, batch_loss, n, cfg, rng, val_loss=None, log=None):
    """Minibatch Adam with early stopping on a held-out split.

    ``batch_loss(idx, train=True)`` returns a scalar tensor for the rows
    ``idx``; ``val_loss(idx)`` (default: ``batch_loss`` under ``no_grad``)
    scores the held-out rows.  The best held-out parameters are restored on
    exit.  Returns a trace dict of per-epoch train and validation losses.
    """
    if n < 2:
        raise ContractError("need at least two samples to train")
    store = ParamStore(module)
    state = AdamState(lr=cfg.lr)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n))) if cfg.val_fraction > 0 else 0
    val_idx = np.sort(perm[:n_val])
    train_idx = perm[n_val:] if n_val else perm
    if val_loss is None:
        def val_loss(idx):
            return batch_loss(idx, train=False)

    def evaluate(idx):
        with torch.no_grad():
            total, count = 0.0, 0
            for start in range(0, len(idx), 4096):
                chunk = idx[start : start + 4096]
                total += float(val_loss(chunk)) * len(chunk)
                count += len(chunk)
        return total / count

    best = math.inf
    best_state = store.snapshot()
    stale = 0
    trace = {"train": [], "val": [], "best_epoch": 0}
    bs = min(cfg.batch_size, len(train_idx))
    for epoch in range(cfg.max_epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        running, batches = 0.0, 0
        for start in range(0, len(order) - bs + 1, bs):
            idx = order[start : start + bs]
            store.zero_grad()
            loss = batch_loss(idx, train=True)
            if not torch.isfinite(loss):
                store.restore(best_state)
                raise NumericError(f"non-finite training loss at epoch {epoch}; restored best checkpoint")
            backward(loss)
            adam_step(store, state)
            running += float(loss.detach())
            batches += 1
        trace["train"].append(running / max(batches, 1))
        score = evaluate(val_idx) if n_val else trace["train"][-1]
        trace["val"].append(score)
        if log is not None:
            log(epoch, trace["train"][-1], score)
        if not math.isfinite(score):
            store.restore(best_state)
            raise NumericError(f"non-finite validation loss at epoch {epoch}; restored best checkpoint")
        if score < best - cfg.min_delta:
            best = score
            best_state = store.snapshot()
            trace["best_epoch"] = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
            if cfg.lr_decay < 1.0 and stale % cfg.decay_patience == 0:
                state.lr *= cfg.lr_decay
    store.restore(best_state)
    store.zero_grad()
    trace["best_val"] = best
    trace["epochs"] = len(trace["train"])
    return trace
