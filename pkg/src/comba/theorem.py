"""Empirical check that cross-batch updates sit closer to the ideal update.

For one layer ``l -> l+1`` and a shared GNN layer ``f``, three per-batch
updates are compared:

* ideal: ``f(A_i, X_i)`` on every row of batch i
* cross: own seeds take ``f(A_i, X_i)``; seeds of batch j found in batch i
  are imported from ``f(A_j, X_j)``; any other row is carried over
* no_cross: only own seeds are updated, every other row is carried over

The error of a variant is ``(1/d) sum_i (1/|B_i|) sum_n ||X_i[n] - ideal_i[n]||^2``
with d the number of batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from .cross_batch import BatchPlan, gnn_hop_layer
from .errors import InvalidArgument
from .graph import BatchSet, Graph, split_into_batches


class Variant(str, Enum):
    IDEAL = "ideal"
    CROSS = "cross"
    NO_CROSS = "no_cross"


def _local_f(plan: BatchPlan, xs, weight):
    return [gnn_hop_layer(b.hops[0], x, weight) for b, x in zip(plan.batches, xs)]


def layer_update(variant, bs: BatchSet, plan: BatchPlan, xs, weight) -> list:
    """Per-batch ``X^{l+1}`` for one variant.

    ``xs[i]`` holds the layer-l rows of batch i in member order; ``plan``
    supplies the hop-1 operators ``f`` aggregates over.
    """
    variant = Variant(variant)
    if len(xs) != len(bs) or len(plan.batches) != len(bs):
        raise InvalidArgument("one feature block per batch is required")
    for b, x in zip(bs, xs):
        if x.shape[0] != len(b.members):
            raise InvalidArgument("feature rows do not match batch members")
    fs = _local_f(plan, xs, weight)
    if variant is Variant.IDEAL:
        return fs
    out = []
    for i, (b, x, f) in enumerate(zip(bs, xs, fs)):
        x_next = x.clone()
        own = torch.from_numpy(b.seed_local)
        x_next[own] = f[own]
        if variant is Variant.CROSS:
            for j, pos in b.cross_occurrences.items():
                home = bs[j]
                at_home = [home.local_index[int(v)] for v in b.members[pos]]
                x_next[torch.from_numpy(pos)] = fs[j][torch.tensor(at_home, dtype=torch.long)]
        out.append(x_next)
    return out


def gate_support(variant, batch) -> np.ndarray:
    """Local positions whose rows the variant replaces."""
    variant = Variant(variant)
    if variant is Variant.IDEAL:
        return np.arange(len(batch.members))
    parts = [batch.seed_local]
    if variant is Variant.CROSS:
        parts += list(batch.cross_occurrences.values())
    return np.sort(np.concatenate(parts))


def approximation_error(xs_variant, xs_ideal) -> float:
    if len(xs_variant) != len(xs_ideal) or not xs_ideal:
        raise InvalidArgument("variant and ideal must cover the same batches")
    total = 0.0
    for a, b in zip(xs_variant, xs_ideal):
        total += float(((a - b) ** 2).sum(dim=1).mean())
    return total / len(xs_ideal)


@dataclass
class TrialResult:
    trial: int
    n: int
    edges: int
    batches: int
    max_hop: int
    e_cross: float
    e_nocross: float
    gap: float
    own_seed_exact: bool
    carry_exact: bool
    holds: bool
    # rows where the cross row is individually farther from ideal than no_cross
    node_reversals: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ErrorReport:
    trials: list = field(default_factory=list)
    tol: float = 1e-9

    @property
    def passed(self) -> bool:
        return all(t.holds for t in self.trials)

    @property
    def cases_exact(self) -> bool:
        return all(t.own_seed_exact and t.carry_exact for t in self.trials)

    @property
    def min_gap(self) -> float:
        return min(t.gap for t in self.trials)

    def summary(self) -> dict:
        return {
            "trials": len(self.trials),
            "satisfied": sum(t.holds for t in self.trials),
            "passed": self.passed,
            "cases_exact": self.cases_exact,
            "min_gap": self.min_gap,
            "max_gap": max(t.gap for t in self.trials),
            "node_reversals": sum(t.node_reversals for t in self.trials),
            "tol": self.tol,
        }


def compare_variants(bs: BatchSet, xs, weight, normalize=True):
    """Errors of both variants against the ideal, plus the exact-case checks."""
    plan = BatchPlan.build(bs, normalize=normalize)
    ideal = layer_update(Variant.IDEAL, bs, plan, xs, weight)
    cross = layer_update(Variant.CROSS, bs, plan, xs, weight)
    nocross = layer_update(Variant.NO_CROSS, bs, plan, xs, weight)
    own_exact, carry_exact, reversals = True, True, 0
    for b, x, xi, xc, xn in zip(bs, xs, ideal, cross, nocross):
        reversals += int((((xc - xi) ** 2).sum(1) > ((xn - xi) ** 2).sum(1) + 1e-12).sum())
        own = torch.from_numpy(b.seed_local)
        own_exact &= bool(torch.equal(xc[own], xi[own]))
        for variant, out in ((Variant.CROSS, xc), (Variant.NO_CROSS, xn)):
            keep = np.setdiff1d(np.arange(len(b.members)), gate_support(variant, b))
            carry_exact &= bool(torch.equal(out[torch.from_numpy(keep)],
                                            x[torch.from_numpy(keep)]))
    e_cross = approximation_error(cross, ideal)
    e_nocross = approximation_error(nocross, ideal)
    return e_cross, e_nocross, own_exact, carry_exact, reversals


def random_trial(rng: np.random.Generator):
    """Random ER graph, features, shared weight and partition for one trial."""
    n = int(rng.integers(10, 61))
    p = float(rng.uniform(0.03, 0.3))
    upper = np.triu(rng.random((n, n)) < p, k=1)
    edges = np.argwhere(upper)
    dim = int(rng.integers(2, 9))
    feats = rng.standard_normal((n, dim))
    g = Graph.from_edges(n, edges, feats, np.zeros(n, dtype=np.int64), 1)
    num_batches = int(rng.integers(2, 7))
    max_hop = int(rng.integers(1, 3))
    bs = split_into_batches(g, num_batches, max_hop, rng)
    weight = torch.from_numpy(rng.standard_normal((dim, dim)) / math.sqrt(dim))
    x = torch.from_numpy(feats)
    xs = [x[torch.from_numpy(b.members)] for b in bs]
    return g, bs, xs, weight


def verify_inequality(trials: int, seed: int = 0, tol: float = 1e-9) -> ErrorReport:
    """Check ``E_cross <= E_nocross + tol`` over independent random trials."""
    if trials < 1:
        raise InvalidArgument("trials must be >= 1")
    report = ErrorReport(tol=tol)
    children = np.random.SeedSequence(seed).spawn(trials)
    for t, child in enumerate(children):
        g, bs, xs, weight = random_trial(np.random.default_rng(child))
        e_cross, e_nocross, own_exact, carry_exact, reversals = compare_variants(bs, xs, weight)
        report.trials.append(TrialResult(
            trial=t, n=g.n, edges=g.num_edges, batches=len(bs), max_hop=bs.max_hop,
            e_cross=e_cross, e_nocross=e_nocross, gap=e_nocross - e_cross,
            own_seed_exact=own_exact, carry_exact=carry_exact,
            holds=e_cross <= e_nocross + tol, node_reversals=reversals))
    return report
