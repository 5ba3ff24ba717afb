"""Differentiable tensor primitives, initialization, Adam and a gradient checker.

Autograd comes from torch; everything here runs on CPU and defaults to
float64 so that finite-difference checks are meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument

DTYPE = torch.float64


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return gen


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[0]:
        raise InvalidArgument(f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None):
    """``x @ weight (+ bias)`` with weight stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else out + bias


def relu(x):
    return torch.relu(x)


def softplus(x):
    # log1p(exp(-|x|)) + max(x, 0) never overflows
    return torch.nn.functional.softplus(x)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    if eps <= 0:
        raise InvalidArgument("eps must be positive")
    return torch.nn.functional.layer_norm(x, x.shape[-1:], gain, bias, eps)


def dropout(x, p: float, generator: torch.Generator | None, training: bool):
    """Inverted dropout: survivors are scaled by 1/(1-p), so eval is the identity."""
    if not 0 <= p < 1:
        raise InvalidArgument(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


ACTIVATIONS = {"relu": relu, "tanh": torch.tanh, "identity": lambda x: x}


def softmax_cross_entropy(logits, labels, mask=None):
    """Mean negative log-likelihood over the rows selected by ``mask``.

    ``mask`` may be a boolean vector or an index array; ``None`` selects all rows.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if mask is not None:
        mask = torch.as_tensor(mask)
        logits, labels = logits[mask], labels[mask]
    if logits.shape[0] == 0:
        raise InvalidArgument("cross-entropy over an empty mask")
    logp = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return -logp.gather(1, labels[:, None]).mean()


def glorot_uniform(fan_in: int, fan_out: int, generator, dtype=DTYPE) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(fan_in, fan_out, generator=generator, dtype=dtype) * 2 - 1) * bound


class Dense(nn.Module):
    """Affine map with Glorot-initialized weight of shape (in, out)."""

    def __init__(self, in_dim, out_dim, generator, bias=True, dtype=DTYPE):
        super().__init__()
        self.weight = nn.Parameter(glorot_uniform(in_dim, out_dim, generator, dtype))
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Adam:
    """Bias-corrected Adam with decoupled weight decay.

    Moments are zero-initialized per parameter; ``step`` reads ``p.grad``.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            if self.weight_decay:
                p.mul_(1 - self.lr * self.weight_decay)
            p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))


def adam_step(opt: Adam):
    opt.step()


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: tuple | None = None


def grad_check(loss_fn, params, h=1e-5, samples=None, seed=0, floor=1e-6,
               kink_tol=1e-5, max_attempts=None) -> GradCheckResult:
    """Compare autograd against central finite differences.

    ``loss_fn()`` must be deterministic and return a scalar tensor. Each
    coordinate is probed with steps h and h/10; when the two central
    differences disagree by more than ``kink_tol`` (relative), the step
    straddles a ReLU kink and the coordinate is skipped. Relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(coords))
    want = len(coords) if samples is None else min(samples, len(coords))
    budget = len(coords) if max_attempts is None else max_attempts

    def central(p, j, step):
        flat = p.data.view(-1)
        old = flat[j].item()
        flat[j] = old + step
        up = loss_fn().item()
        flat[j] = old - step
        down = loss_fn().item()
        flat[j] = old
        return (up - down) / (2 * step)

    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    with torch.no_grad():
        for idx in order[:budget]:
            if checked >= want:
                break
            i, j = coords[idx]
            p = params[i]
            num = central(p, j, h)
            fine = central(p, j, h / 10)
            if abs(num - fine) > kink_tol * max(abs(num), abs(fine), floor):
                skipped += 1
                continue
            ana = analytic[i].view(-1)[j].item()
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            if err > worst:
                worst, worst_at = err, (i, j, ana, num)
    return GradCheckResult(worst, checked, skipped, worst_at)
