"""Training loop, evaluation metrics, ablation runs and the runtime benchmark."""

from __future__ import annotations

import copy
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from scipy.stats import rankdata

from . import kernels as K
from .block import CombaModel
from .cross_batch import BatchPlan
from .data import Splits, SyntheticSpec, generate_synthetic
from .errors import InvalidArgument, NonFiniteError, TrainingDiverged, UndefinedMetricError
from .graph import Graph, split_into_batches

log = logging.getLogger(__name__)

GRID = {
    "hidden_dim": [64, 128],
    "num_layers": [2, 3],
    "dropout": [0.0, 0.3, 0.5],
    "hop_len": [2, 3, 5, 10],
    "num_batches": [5, 10, 50, 100],
}


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one run.

    ``num_batches`` is the number of seed batches the nodes are split into.
    """

    hidden_dim: int = 64
    num_layers: int = 2
    num_blocks: int = 1
    dropout: float = 0.0
    hop_len: int = 2
    num_batches: int = 5
    window: int = 1
    state_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 5e-4
    max_epochs: int = 500
    patience: int = 50
    seed: int = 0
    no_cross_batch: bool = False
    no_context_gating: bool = False
    normalize: bool = True
    resample_batches: bool = False
    per_hop_rebuild: bool = False
    activation: str = "relu"

    def __post_init__(self):
        for name in ("hidden_dim", "num_layers", "num_blocks", "hop_len", "num_batches",
                     "state_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if self.window < 0:
            raise InvalidArgument("window must be >= 0")
        if not 0 <= self.dropout < 1:
            raise InvalidArgument("dropout must lie in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0:
            raise InvalidArgument("lr and weight_decay must be non-negative")
        if self.activation not in K.ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val: float
    test: float
    ms: float

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss, "val": self.val,
                "test": self.test, "ms": self.ms}


@dataclass
class TrainResult:
    model: CombaModel
    plan: BatchPlan
    history: list
    metric: str
    best_epoch: int
    best_val: float
    best_test: float


def default_metric(graph: Graph) -> str:
    return "roc_auc" if graph.num_classes == 2 else "accuracy"


def build_model(graph: Graph, cfg: TrainConfig) -> CombaModel:
    return CombaModel(
        graph.feature_dim, graph.num_classes, K.make_generator(cfg.seed),
        hidden_dim=cfg.hidden_dim, max_hop=cfg.hop_len, num_layers=cfg.num_layers,
        num_blocks=cfg.num_blocks, state_size=cfg.state_size, window=cfg.window,
        dropout=cfg.dropout, cross_batch=not cfg.no_cross_batch,
        context_gating=not cfg.no_context_gating, per_hop_rebuild=cfg.per_hop_rebuild,
        activation=cfg.activation)


def build_plan(graph: Graph, cfg: TrainConfig, rng=None) -> BatchPlan:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    num_batches = min(cfg.num_batches, graph.n)
    bs = split_into_batches(graph, num_batches, cfg.hop_len, rng)
    return BatchPlan.build(bs, normalize=cfg.normalize)


# ---------------------------------------------------------------- metrics

def accuracy(logits, labels) -> float:
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels)
    if len(labels) == 0:
        raise UndefinedMetricError("accuracy of an empty split")
    return float((logits.argmax(dim=-1) == labels).double().mean())


def roc_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def score(logits, labels, metric: str) -> float:
    if metric == "accuracy":
        return accuracy(logits, labels)
    if metric == "roc_auc":
        if logits.shape[-1] != 2:
            raise UndefinedMetricError("roc_auc needs a binary task")
        prob = torch.softmax(torch.as_tensor(logits), dim=-1)[:, 1]
        return roc_auc(prob.numpy(), np.asarray(labels))
    raise InvalidArgument(f"unknown metric {metric!r}")


@torch.no_grad()
def predict(model: CombaModel, graph: Graph, plan: BatchPlan) -> torch.Tensor:
    was = model.training
    model.eval()
    try:
        return model(torch.from_numpy(graph.features), plan)
    finally:
        model.train(was)


def evaluate(model, graph: Graph, plan: BatchPlan, split, metric: str, logits=None) -> float:
    split = np.asarray(split, dtype=np.int64)
    logits = predict(model, graph, plan) if logits is None else logits
    return score(logits[split], graph.labels[split], metric)


# ---------------------------------------------------------------- training

def train(graph: Graph, splits: Splits, cfg: TrainConfig, metric: str | None = None,
          on_epoch=None) -> TrainResult:
    """Full-graph Adam training with early stopping on the validation metric.

    One optimizer step per epoch. The best-validation parameters are
    restored before returning. ``on_epoch(record)`` is called after every epoch.
    """
    if len(splits.train) == 0:
        raise InvalidArgument("empty training split")
    splits.validate(graph.n)
    metric = metric or default_metric(graph)
    rng = np.random.default_rng(cfg.seed)
    plan = build_plan(graph, cfg, rng)
    model = build_model(graph, cfg)
    opt = K.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    dropout_gen = K.make_generator(cfg.seed + 1_000_003)

    x = torch.from_numpy(graph.features)
    y = torch.from_numpy(graph.labels)
    train_idx = torch.from_numpy(splits.train)

    history = []
    best_val, best_test, best_epoch, best_state = -math.inf, math.nan, 0, None
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.resample_batches and epoch > 1:
            plan = build_plan(graph, cfg, rng)
        start = time.perf_counter()
        model.train()
        opt.zero_grad()
        try:
            loss = K.softmax_cross_entropy(model(x, plan, dropout_gen), y, train_idx)
            if not torch.isfinite(loss):
                raise NonFiniteError("training loss")
            loss.backward()
            opt.step()
            ms = (time.perf_counter() - start) * 1000
            eval_logits = predict(model, graph, plan)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite values at epoch {epoch}: {exc}") from exc
        val = score(eval_logits[splits.val], graph.labels[splits.val], metric)
        test = score(eval_logits[splits.test], graph.labels[splits.test], metric)
        record = MetricsRecord(epoch, loss.item(), val, test, ms)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)

        if val > best_val:
            best_val, best_test, best_epoch = val, test, epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, plan, history, metric, best_epoch, best_val, best_test)


# ---------------------------------------------------------------- ablation

ABLATIONS = {
    "full": {},
    "no_cross_batch": {"no_cross_batch": True},
    "no_context_gating": {"no_context_gating": True},
}


def run_ablation(graph: Graph, splits: Splits, cfg: TrainConfig, seeds=(0, 1, 2, 3, 4),
                 metric: str | None = None) -> dict:
    """Train every variant on each seed; report test scores and mean/std."""
    table = {}
    for name, flags in ABLATIONS.items():
        scores = []
        for seed in seeds:
            res = train(graph, splits, replace(cfg, seed=seed, **flags), metric)
            scores.append(res.best_test)
        table[name] = {
            "scores": scores,
            "mean": statistics.fmean(scores),
            "std": statistics.pstdev(scores),
        }
    return table


# ---------------------------------------------------------------- benchmark

def bench_graph(size: int, seed=0, mean_degree=4.0, feature_dim=16) -> Graph:
    """ER graph with nodes + edges ~= size at the given mean degree."""
    n = max(2, round(size / (1 + mean_degree / 2)))
    spec = SyntheticSpec(kind="er", n=n, num_edges=size - n, seed=seed,
                         feature_dim=feature_dim, num_classes=2)
    return generate_synthetic(spec).graph


def time_epochs(graph: Graph, cfg: TrainConfig, epochs=3, warmup=1) -> list:
    plan = build_plan(graph, cfg)
    model = build_model(graph, cfg)
    opt = K.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = K.make_generator(cfg.seed)
    x = torch.from_numpy(graph.features)
    y = torch.from_numpy(graph.labels)
    times = []
    for i in range(warmup + epochs):
        start = time.perf_counter()
        opt.zero_grad()
        loss = K.softmax_cross_entropy(model(x, plan, gen), y)
        loss.backward()
        opt.step()
        if i >= warmup:
            times.append((time.perf_counter() - start) * 1000)
    return times


def fit_loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def bench_scaling(sizes, cfg: TrainConfig, epochs=3, seed=0) -> dict:
    """Median ms/epoch per graph size and the fitted log-log slope.

    Graph and batch construction are excluded from the timings.
    """
    if len(sizes) < 2:
        raise InvalidArgument("need at least two sizes to fit a slope")
    if epochs < 3:
        raise InvalidArgument("time at least 3 epochs per size")
    rows = []
    for size in sorted(sizes):
        g = bench_graph(size, seed)
        times = time_epochs(g, cfg, epochs)
        rows.append({"size": size, "nodes": g.n, "edges": g.num_edges,
                     "ms_per_epoch": statistics.median(times)})
    slope = fit_loglog_slope([r["nodes"] + r["edges"] for r in rows],
                             [r["ms_per_epoch"] for r in rows])
    return {"rows": rows, "slope": slope}
