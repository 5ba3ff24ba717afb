"""Selective state-space block over the hop axis with context-gated outputs."""

from __future__ import annotations

import torch
from torch import nn

from . import kernels as K
from .cross_batch import BatchPlan, CrossBatch, gnn_hop_layer
from .errors import InvalidArgument, NonFiniteError


def state_decay(logit: torch.Tensor) -> torch.Tensor:
    """Continuous diagonal state value, strictly negative: ``-softplus(logit)``."""
    return -K.softplus(logit)


def zoh_discretize(delta, a, b):
    """Zero-order hold for a diagonal system.

    Returns ``(exp(delta*a), expm1(delta*a)/a * b)``, the elementwise form of
    ``(dA)^-1 (exp(dA) - I) dB``. Arguments broadcast against each other.
    """
    delta, a, b = (torch.as_tensor(v, dtype=K.DTYPE) for v in (delta, a, b))
    for name, v in (("delta", delta), ("a", a), ("b", b)):
        if not torch.isfinite(v).all():
            raise NonFiniteError(f"non-finite {name} passed to zoh_discretize")
    da = delta * a
    a_bar = torch.exp(da)
    # a == 0 only when softplus underflows; its limit is delta * b
    zero = a == 0
    a_safe = torch.where(zero, torch.ones_like(a), a)
    b_bar = torch.where(zero, delta * b, torch.expm1(da) / a_safe * b)
    return a_bar, b_bar


def context_windows(tokens: torch.Tensor, window: int) -> torch.Tensor:
    """Flattened windows of 2w+1 tokens around every position, edge-replicated.

    tokens: (n, T, d) -> (n, T, (2w+1)*d)
    """
    n, t, d = tokens.shape
    offsets = torch.arange(-window, window + 1)
    idx = (torch.arange(t)[:, None] + offsets[None, :]).clamp(0, t - 1)
    return tokens[:, idx].reshape(n, t, (2 * window + 1) * d)


def context_output_matrix(tokens, phi: K.Dense, window: int, state_size: int):
    """Output projection C_k for every hop from its token window."""
    n, t, d = tokens.shape
    return phi(context_windows(tokens, window)).view(n, t, d, state_size)


def token_output_matrix(tokens, phi: K.Dense, state_size: int):
    """Output projection from the current token only (no context window)."""
    n, t, d = tokens.shape
    return phi(tokens).view(n, t, d, state_size)


def selective_scan(x, a_bar, b_bar, c):
    """Run ``h_k = a_bar_k * h_{k-1} + b_bar_k * x_k``, ``y_k = sum_s c_k * h_k``.

    x: (n, T, d); a_bar, b_bar, c: (n, T, d, S). Returns y: (n, T, d).
    The state starts at zero.
    """
    n, t, d = x.shape
    if t == 0:
        raise InvalidArgument("selective_scan needs at least one token")
    h = torch.zeros(n, d, a_bar.shape[-1], dtype=x.dtype)
    ys = []
    for k in range(t):
        h = a_bar[:, k] * h + b_bar[:, k] * x[:, k, :, None]
        ys.append((c[:, k] * h).sum(-1))
    return torch.stack(ys, dim=1)


def reference_scan(x, a_bar, b_bar, c):
    """Scalar-loop version of :func:`selective_scan`, used as a test oracle."""
    x, a_bar, b_bar, c = (v.tolist() for v in (x, a_bar, b_bar, c))
    out = []
    for xn, an, bn, cn in zip(x, a_bar, b_bar, c):
        rows = []
        h = [[0.0] * len(an[0][0]) for _ in xn[0]]
        for xk, ak, bk, ck in zip(xn, an, bn, cn):
            row = []
            for ch in range(len(xk)):
                acc = 0.0
                for s in range(len(h[ch])):
                    h[ch][s] = ak[ch][s] * h[ch][s] + bk[ch][s] * xk[ch]
                    acc += ck[ch][s] * h[ch][s]
                row.append(acc)
            rows.append(row)
        out.append(rows)
    return torch.tensor(out, dtype=K.DTYPE)


class CombaBlock(nn.Module):
    """Norm, selective scan with context-gated C, residual norm, hop pooling.

    When ``rebuild`` is set the pooled embedding is pushed back through one
    hop GNN per hop to form the next block's token sequence.
    """

    def __init__(self, dim, max_hop, generator, state_size=4, window=1,
                 context_gating=True, rebuild=True, per_hop_rebuild=False, dtype=K.DTYPE):
        super().__init__()
        if window < 0:
            raise InvalidArgument("window must be >= 0")
        self.dim, self.state_size, self.max_hop = dim, state_size, max_hop
        self.context_gating = context_gating
        self.window = window if context_gating else 0
        self.norm_in_gain = nn.Parameter(torch.ones(dim, dtype=dtype))
        self.norm_in_bias = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.lin_a = K.Dense(dim, dim * state_size, generator, dtype=dtype)
        self.lin_b = K.Dense(dim, dim * state_size, generator, dtype=dtype)
        phi_in = (2 * self.window + 1) * dim if context_gating else dim
        self.lin_c = K.Dense(phi_in, dim * state_size, generator, dtype=dtype)
        self.lin_delta = K.Dense(dim, dim, generator, dtype=dtype)
        self.norm_out_gain = nn.Parameter(torch.ones(dim, dtype=dtype))
        self.norm_out_bias = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.rebuild = rebuild
        if rebuild:
            count = max_hop if per_hop_rebuild else 1
            self.rebuild_weights = nn.ParameterList(
                nn.Parameter(K.glorot_uniform(dim, dim, generator, dtype)) for _ in range(count))

    def ssm(self, z):
        """Scan outputs for tokens z of shape (n, T, d), before the residual."""
        n, t, d = z.shape
        s = self.state_size
        u = K.layer_norm(z, self.norm_in_gain, self.norm_in_bias)
        a = state_decay(self.lin_a(u)).view(n, t, d, s)
        b = self.lin_b(u).view(n, t, d, s)
        delta = K.softplus(self.lin_delta(z))
        if self.context_gating:
            c = context_output_matrix(u, self.lin_c, self.window, s)
        else:
            c = token_output_matrix(u, self.lin_c, s)
        a_bar, b_bar = zoh_discretize(delta[..., None], a, b)
        return selective_scan(u, a_bar, b_bar, c)

    def pool(self, z, y):
        out = K.layer_norm(y + z, self.norm_out_gain, self.norm_out_bias)
        return out.mean(dim=1)

    def rebuild_sequence(self, pooled, plan: BatchPlan):
        hops = []
        for k in range(1, plan.max_hop + 1):
            w = self.rebuild_weights[(k - 1) % len(self.rebuild_weights)]
            seeds, rows = [], []
            for b in plan.batches:
                local = gnn_hop_layer(b.hops[k - 1], pooled[b.members], w)
                seeds.append(b.seeds)
                rows.append(local[b.seed_local])
            out = torch.zeros_like(pooled)
            hops.append(out.index_copy(0, torch.cat(seeds), torch.cat(rows)))
        return torch.stack([pooled, *hops], dim=1)

    def forward(self, z, plan: BatchPlan):
        """Return ``(pooled (n, d), next token sequence or None)``."""
        if z.shape[1] != plan.max_hop + 1:
            raise InvalidArgument(f"expected {plan.max_hop + 1} tokens, got {z.shape[1]}")
        pooled = self.pool(z, self.ssm(z))
        nxt = self.rebuild_sequence(pooled, plan) if self.rebuild else None
        return pooled, nxt


def comba_block_forward(z, plan: BatchPlan, block: CombaBlock):
    return block(z, plan)


class CombaModel(nn.Module):
    """Cross-batch token builder, a stack of COMBA blocks, and a linear head."""

    def __init__(self, in_dim, num_classes, generator, hidden_dim=64, max_hop=2,
                 num_layers=2, num_blocks=1, state_size=4, window=1, dropout=0.0,
                 cross_batch=True, context_gating=True, per_hop_rebuild=False,
                 activation="relu", dtype=K.DTYPE):
        super().__init__()
        self.max_hop = max_hop
        self.cross = CrossBatch(in_dim, hidden_dim, num_layers, generator, dropout,
                                cross_batch, activation, dtype)
        self.blocks = nn.ModuleList(
            CombaBlock(hidden_dim, max_hop, generator, state_size, window, context_gating,
                       rebuild=i < num_blocks - 1, per_hop_rebuild=per_hop_rebuild, dtype=dtype)
            for i in range(num_blocks))
        self.head = K.Dense(hidden_dim, num_classes, generator, dtype=dtype)

    def embed(self, x, plan: BatchPlan, generator=None):
        z = self.cross(x, plan, generator)
        pooled = None
        for block in self.blocks:
            pooled, z = block(z, plan)
        return pooled

    def forward(self, x, plan: BatchPlan, generator=None):
        return self.head(self.embed(x, plan, generator))


def comba_forward(x, plan: BatchPlan, model: CombaModel, generator=None):
    return model(x, plan, generator)
