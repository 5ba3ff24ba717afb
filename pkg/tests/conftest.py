import numpy as np
import pytest

from comba.graph import Graph

ACCEPTANCE = []


def make_graph(n, edges, dim=2, labels=None, num_classes=None, seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((n, dim))
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels)
    return Graph.from_edges(n, edges, feats, labels, num_classes)


def path_graph(n, **kw):
    return make_graph(n, [(i, i + 1) for i in range(n - 1)], **kw)


def er_graph(rng, n, p, dim=3, classes=2):
    upper = np.triu(rng.random((n, n)) < p, k=1)
    return Graph.from_edges(n, np.argwhere(upper), rng.standard_normal((n, dim)),
                            rng.integers(0, classes, n), classes)


def pairs(mat):
    coo = mat.tocoo()
    return set(zip(coo.row.tolist(), coo.col.tolist()))


@pytest.fixture
def triangle():
    return make_graph(3, [(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def p4():
    return path_graph(4)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def model_loss(num_blocks=1, seed=0, n=30, hop_len=2, window=1, hidden=6):
    """Loss closure and parameters of a small full model on an SBM graph."""
    import torch

    from comba import kernels as K
    from comba.data import SyntheticSpec, generate_synthetic
    from comba.training import TrainConfig, build_model, build_plan

    bundle = generate_synthetic(SyntheticSpec(kind="sbm", n=n, seed=seed, p_in=0.3,
                                              p_out=0.05, feature_dim=4))
    g = bundle.graph
    cfg = TrainConfig(hidden_dim=hidden, hop_len=hop_len, window=window,
                      num_blocks=num_blocks, num_batches=3, state_size=3, seed=seed)
    model = build_model(g, cfg)
    plan = build_plan(g, cfg)
    x = torch.from_numpy(g.features)
    y = torch.from_numpy(g.labels)
    train_idx = torch.from_numpy(bundle.splits.train)

    def loss():
        return K.softmax_cross_entropy(model(x, plan), y, train_idx)

    return loss, list(model.parameters())
