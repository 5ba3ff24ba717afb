import numpy as np
import pytest
import torch

from comba import kernels as K
from comba.cross_batch import (BatchPlan, CrossBatch, EmbeddingStore, gnn_hop_layer,
                               hop_operator, publish_seed_rows)
from comba.errors import InvalidArgument
from comba.graph import bfs_distance_oracle, build_batchset, split_into_batches

from conftest import er_graph, make_graph, path_graph


def dense_rownorm(mat):
    a = np.asarray(mat.todense(), dtype=np.float64)
    deg = a.sum(1, keepdims=True)
    return np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)


def reference_forward(g, bs, proj, weights, cross=True):
    """Dense numpy replay of the publish protocol, written independently."""
    relu = lambda v: np.maximum(v, 0)
    z0 = relu(g.features @ proj)
    store = {k: z0.copy() for k in range(1, bs.max_hop + 1)}
    for b in bs:
        seeds_pos = [i for i, v in enumerate(b.members) if v in set(b.seeds.tolist())]
        for k in range(1, bs.max_hop + 1):
            a = dense_rownorm(b.sub_hops[k])
            z = relu(a @ z0[b.members] @ weights[0])
            for w in weights[1:]:
                if cross:
                    for p in seeds_pos:
                        store[k][b.members[p]] = z[p]
                    z_in = store[k][b.members]
                else:
                    z_in = z
                z = relu(a @ z_in @ w)
            for p in seeds_pos:
                store[k][b.members[p]] = z[p]
    return np.stack([z0] + [store[k] for k in range(1, bs.max_hop + 1)], axis=1)


def make_module(in_dim, hidden, layers, seed=0, **kw):
    return CrossBatch(in_dim, hidden, layers, K.make_generator(seed), **kw)


class TestHopLayer:
    def test_zero_matrix(self):
        adj = hop_operator(np.zeros((3, 3)))
        z = torch.randn(3, 2, dtype=torch.float64)
        out = gnn_hop_layer(adj, z, torch.eye(2, dtype=torch.float64))
        assert torch.equal(out, torch.zeros(3, 2, dtype=torch.float64))

    def test_two_node_swap(self):
        adj = hop_operator(np.array([[0, 1], [1, 0]]))
        z = torch.eye(2, dtype=torch.float64)
        out = gnn_hop_layer(adj, z, torch.eye(2, dtype=torch.float64), activation=lambda v: v)
        assert out.tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_row_normalization(self):
        adj = hop_operator(np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]]))
        z = torch.tensor([[0.0], [2.0], [4.0]], dtype=torch.float64)
        out = gnn_hop_layer(adj, z, torch.ones(1, 1, dtype=torch.float64))
        assert out.flatten().tolist() == [3.0, 0.0, 0.0]
        raw = hop_operator(np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]]), normalize=False)
        assert gnn_hop_layer(raw, z, torch.ones(1, 1, dtype=torch.float64))[0, 0] == 6.0

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        a = np.triu(rng.random((8, 8)) < 0.4, 1)
        a = (a | a.T).astype(float)
        z = torch.from_numpy(rng.standard_normal((8, 3)))
        w = torch.from_numpy(rng.standard_normal((3, 3)))
        perm = rng.permutation(8)
        out = gnn_hop_layer(hop_operator(a), z, w)
        out_p = gnn_hop_layer(hop_operator(a[perm][:, perm]), z[perm], w)
        torch.testing.assert_close(out_p, out[perm], rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        adj = hop_operator(np.zeros((3, 3)))
        with pytest.raises(InvalidArgument):
            gnn_hop_layer(adj, torch.zeros(2, 2, dtype=torch.float64),
                          torch.eye(2, dtype=torch.float64))
        with pytest.raises(InvalidArgument):
            gnn_hop_layer(adj, torch.zeros(3, 2, dtype=torch.float64),
                          torch.eye(3, dtype=torch.float64))


class TestInitEmbeddings:
    def test_identity_projection(self):
        g = make_graph(4, [(0, 1)], dim=3)
        mod = make_module(3, 3, 1)
        with torch.no_grad():
            mod.proj.copy_(torch.eye(3, dtype=torch.float64))
        x = torch.from_numpy(np.abs(g.features))
        assert torch.equal(mod.init_embeddings(x), x)

    def test_eval_ignores_rng(self):
        mod = make_module(3, 5, 1, dropout=0.5)
        mod.eval()
        x = torch.randn(6, 3, dtype=torch.float64)
        a = mod.init_embeddings(x, K.make_generator(1))
        b = mod.init_embeddings(x, K.make_generator(2))
        assert torch.equal(a, b) and a.shape == (6, 5)

    def test_width_mismatch(self):
        with pytest.raises(InvalidArgument):
            make_module(3, 5, 1).init_embeddings(torch.zeros(2, 4, dtype=torch.float64))


class TestPublish:
    def test_single_batch_overwrites_everything(self):
        g = path_graph(5)
        bs = build_batchset(g, [range(5)], 1)
        plan = BatchPlan.build(bs)
        store = EmbeddingStore(torch.zeros(5, 2, dtype=torch.float64), 1)
        publish_seed_rows(store, plan.batches[0], 1, torch.ones(5, 2, dtype=torch.float64))
        assert torch.equal(store.hops[0], torch.ones(5, 2, dtype=torch.float64))

    def test_foreign_seed_fresh_row_is_read(self, p4):
        # batch 1 seeds {0, 1}, batch 2 seeds {2, 3}; node 2 is a member of batch 1
        bs = build_batchset(p4, [[0, 1], [2, 3]], 1)
        plan = BatchPlan.build(bs)
        store = EmbeddingStore(torch.zeros(4, 2, dtype=torch.float64), 1)
        b1, b2 = plan.batches
        fresh = torch.arange(6, dtype=torch.float64).view(3, 2) + 1
        publish_seed_rows(store, b2, 1, fresh)
        seen = store.read(1, b1.members)
        # batch 2 members are [1, 2, 3]; node 2 sits at local row 1 there
        assert seen[2].tolist() == fresh[1].tolist()
        assert seen[1].tolist() == [0.0, 0.0]  # node 1 is batch 1's seed: untouched

    def test_non_seed_rows_untouched(self):
        rng = np.random.default_rng(3)
        g = er_graph(rng, 25, 0.15)
        bs = split_into_batches(g, 4, 2, rng)
        plan = BatchPlan.build(bs)
        init = torch.randn(25, 3, dtype=torch.float64)
        store = EmbeddingStore(init, 2)
        for b in plan.batches:
            for k in (1, 2):
                before = store.hops[k - 1].clone()
                publish_seed_rows(store, b, k, torch.randn(len(b.members), 3,
                                                           dtype=torch.float64))
                mask = torch.ones(25, dtype=torch.bool)
                mask[b.seeds] = False
                assert torch.equal(store.hops[k - 1][mask], before[mask])


class TestCrossBatchForward:
    @pytest.mark.parametrize("cross", [True, False])
    @pytest.mark.parametrize("layers", [1, 2, 3])
    def test_matches_reference(self, cross, layers):
        rng = np.random.default_rng(layers)
        g = er_graph(rng, 30, 0.12, dim=4)
        bs = split_into_batches(g, 3, 2, rng)
        mod = make_module(4, 5, layers, seed=1, cross_batch=cross)
        out = mod(torch.from_numpy(g.features), BatchPlan.build(bs))
        ref = reference_forward(g, bs, mod.proj.detach().numpy(),
                                [w.detach().numpy() for w in mod.layers], cross)
        np.testing.assert_allclose(out.detach().numpy(), ref, rtol=0, atol=1e-12)

    def test_single_batch_one_hop_is_plain_gcn(self):
        rng = np.random.default_rng(7)
        g = er_graph(rng, 20, 0.2, dim=3)
        bs = build_batchset(g, [range(20)], 1)
        mod = make_module(3, 4, 1)
        out = mod(torch.from_numpy(g.features), BatchPlan.build(bs)).detach().numpy()
        z0 = np.maximum(g.features @ mod.proj.detach().numpy(), 0)
        gcn = np.maximum(dense_rownorm(g.adjacency) @ z0 @ mod.layers[0].detach().numpy(), 0)
        np.testing.assert_allclose(out[:, 0], z0, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out[:, 1], gcn, rtol=0, atol=1e-12)

    def test_single_batch_equals_hop_stacked_gnn(self):
        rng = np.random.default_rng(8)
        g = er_graph(rng, 25, 0.15, dim=3)
        bs = build_batchset(g, [range(25)], 3)
        mod = make_module(3, 4, 3)
        out = mod(torch.from_numpy(g.features), BatchPlan.build(bs)).detach().numpy()
        hops = bfs_distance_oracle(g, 3)
        z0 = np.maximum(g.features @ mod.proj.detach().numpy(), 0)
        for k in range(1, 4):
            a = dense_rownorm(hops[k])
            z = z0
            for w in mod.layers:
                z = np.maximum(a @ z @ w.detach().numpy(), 0)
            np.testing.assert_allclose(out[:, k], z, rtol=0, atol=1e-12)

    def test_later_batch_reads_earlier_final_rows(self, p4):
        # seeds {2,3} run first; batch with seeds {0,1} then reads node 2's published row
        bs = build_batchset(p4, [[2, 3], [0, 1]], 1)
        mod = make_module(2, 3, 2)
        seen = {}

        def hook(store, b, k):
            seen[int(b.seeds[0])] = store.hops[0].detach().clone()

        out = mod(torch.from_numpy(p4.features), BatchPlan.build(bs), store_hook=hook)
        first = seen[2]
        np.testing.assert_array_equal(out[2, 1].detach().numpy(), first[2].numpy())

    def test_gate_invariant_across_sweep(self):
        # a row changes only once its home batch has published it
        rng = np.random.default_rng(12)
        for _ in range(5):
            g = er_graph(rng, 35, 0.1, dim=3)
            bs = split_into_batches(g, 4, 2, rng)
            mod = make_module(3, 4, 2, seed=int(rng.integers(100)))
            z0 = mod.init_embeddings(torch.from_numpy(g.features)).detach()
            published = np.zeros((bs.max_hop, g.n), dtype=bool)

            def hook(store, b, k):
                published[k - 1, b.seeds.numpy()] = True
                for kk in range(bs.max_hop):
                    pending = torch.from_numpy(~published[kk])
                    assert torch.equal(store.hops[kk].detach()[pending], z0[pending])

            mod(torch.from_numpy(g.features), BatchPlan.build(bs), store_hook=hook)
            assert published.all()

    def test_token_count(self):
        g = er_graph(np.random.default_rng(0), 30, 0.1, dim=3)
        for k in (2, 3, 5, 10):
            bs = split_into_batches(g, 3, k, np.random.default_rng(k))
            out = make_module(3, 4, 2)(torch.from_numpy(g.features), BatchPlan.build(bs))
            assert out.shape == (30, k + 1, 4)

    def test_deterministic_with_dropout(self):
        g = er_graph(np.random.default_rng(1), 20, 0.2, dim=3)
        plan = BatchPlan.build(split_into_batches(g, 2, 2, np.random.default_rng(0)))
        mod = make_module(3, 4, 2, dropout=0.5)
        x = torch.from_numpy(g.features)
        a = mod(x, plan, K.make_generator(4))
        b = mod(x, plan, K.make_generator(4))
        assert torch.equal(a, b)

    def test_publishing_changes_output(self):
        rng = np.random.default_rng(5)
        g = er_graph(rng, 40, 0.08, dim=3)
        plan = BatchPlan.build(split_into_batches(g, 4, 2, rng))
        x = torch.from_numpy(g.features)
        on = make_module(3, 4, 2, cross_batch=True)(x, plan)
        off = make_module(3, 4, 2, cross_batch=False)(x, plan)
        assert torch.equal(on[:, 0], off[:, 0])
        assert not torch.equal(on, off)
