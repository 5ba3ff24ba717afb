"""Hop-aware per-batch message passing with cross-batch publication of seed rows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
from torch import nn

from . import kernels as K
from .errors import InvalidArgument
from .graph import BatchSet


def hop_operator(mat: sp.spmatrix, normalize=True, dtype=K.DTYPE) -> torch.Tensor:
    """Sparse torch operator for one hop matrix.

    With ``normalize`` each row is divided by its hop-degree; rows with no
    hop-k neighbours stay empty and aggregate to zero.
    """
    coo = sp.coo_matrix(mat)
    vals = np.ones(coo.nnz, dtype=np.float64)
    if normalize and coo.nnz:
        deg = np.bincount(coo.row, minlength=coo.shape[0]).astype(np.float64)
        vals = vals / deg[coo.row]
    idx = torch.from_numpy(np.stack([coo.row, coo.col]).astype(np.int64))
    op = torch.sparse_coo_tensor(idx, torch.from_numpy(vals).to(dtype), coo.shape,
                                 check_invariants=False)
    return op.coalesce()


@dataclass(frozen=True, eq=False)
class BatchOps:
    members: torch.Tensor
    seeds: torch.Tensor
    seed_local: torch.Tensor
    hops: list


@dataclass(frozen=True, eq=False)
class BatchPlan:
    """Torch-side view of a :class:`BatchSet`: index tensors and hop operators."""

    num_nodes: int
    max_hop: int
    batches: list

    @classmethod
    def build(cls, bs: BatchSet, normalize=True, dtype=K.DTYPE) -> "BatchPlan":
        ops = []
        for b in bs:
            ops.append(BatchOps(
                members=torch.from_numpy(b.members),
                seeds=torch.from_numpy(b.members[b.seed_local]),
                seed_local=torch.from_numpy(b.seed_local),
                hops=[hop_operator(m, normalize, dtype) for m in b.sub_hops.mats],
            ))
        return cls(bs.num_nodes, bs.max_hop, ops)


def gnn_hop_layer(adj: torch.Tensor, z: torch.Tensor, weight: torch.Tensor, activation=K.relu):
    """``activation(adj @ z @ weight)`` over batch-local rows."""
    if adj.shape[0] != adj.shape[1] or adj.shape[1] != z.shape[0]:
        raise InvalidArgument(
            f"hop operator {tuple(adj.shape)} does not match {z.shape[0]} rows")
    if z.shape[1] != weight.shape[0]:
        raise InvalidArgument(f"weight {tuple(weight.shape)} does not match width {z.shape[1]}")
    return activation(torch.sparse.mm(adj, z) @ weight)


class EmbeddingStore:
    """Global per-hop embedding tables shared by all batches.

    ``initial`` is the hop-agnostic projection; ``hops[k-1]`` starts as a
    copy of it. Publishing replaces rows out of place so autograd can see
    every version.
    """

    def __init__(self, initial: torch.Tensor, max_hop: int):
        self.initial = initial
        self.hops = [initial for _ in range(max_hop)]

    def read(self, k: int, rows: torch.Tensor) -> torch.Tensor:
        return self.hops[k - 1][rows]

    def publish(self, k: int, rows: torch.Tensor, values: torch.Tensor):
        self.hops[k - 1] = self.hops[k - 1].index_copy(0, rows, values)


def publish_seed_rows(store: EmbeddingStore, batch: BatchOps, k: int, z_out: torch.Tensor):
    """Overwrite the hop-k rows of the batch's seed nodes with its fresh output."""
    store.publish(k, batch.seeds, z_out[batch.seed_local])


class CrossBatch(nn.Module):
    """Input projection plus ``num_layers`` shared GNN weights."""

    def __init__(self, in_dim, hidden_dim, num_layers, generator, dropout=0.0,
                 cross_batch=True, activation="relu", dtype=K.DTYPE):
        super().__init__()
        if num_layers < 1:
            raise InvalidArgument("num_layers must be >= 1")
        self.proj = nn.Parameter(K.glorot_uniform(in_dim, hidden_dim, generator, dtype))
        self.layers = nn.ParameterList(
            nn.Parameter(K.glorot_uniform(hidden_dim, hidden_dim, generator, dtype))
            for _ in range(num_layers))
        self.p = dropout
        self.cross_batch = cross_batch
        self.act = K.ACTIVATIONS[activation]

    def init_embeddings(self, x: torch.Tensor, generator=None) -> torch.Tensor:
        if x.shape[1] != self.proj.shape[0]:
            raise InvalidArgument(
                f"feature width {x.shape[1]} does not match projection {tuple(self.proj.shape)}")
        x = K.dropout(x, self.p, generator, self.training)
        return self.act(x @ self.proj)

    def forward(self, x, plan: BatchPlan, generator=None, store_hook=None):
        """Return the token sequence of shape (n, max_hop + 1, hidden).

        Batches run in ascending order, hops ascending inside each batch,
        and every layer reads the latest published rows. With
        ``cross_batch`` off, each batch only reads its own previous layer
        and publishes seed rows once, after the last layer.
        """
        z0 = self.init_embeddings(x, generator)
        store = EmbeddingStore(z0, plan.max_hop)
        for b in plan.batches:
            for k in range(1, plan.max_hop + 1):
                adj = b.hops[k - 1]
                z = gnn_hop_layer(adj, z0[b.members], self.layers[0], self.act)
                for w in self.layers[1:]:
                    if self.cross_batch:
                        publish_seed_rows(store, b, k, z)
                        z_in = store.read(k, b.members)
                    else:
                        z_in = z
                    z = gnn_hop_layer(adj, z_in, w, self.act)
                publish_seed_rows(store, b, k, z)
                if store_hook is not None:
                    store_hook(store, b, k)
        return torch.stack([z0, *store.hops], dim=1)


def cross_batch_forward(x, plan: BatchPlan, module: CrossBatch, generator=None):
    return module(x, plan, generator)
