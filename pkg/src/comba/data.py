"""Dataset directories, synthetic graph generators and checkpoint files.

A dataset directory holds five files:

``edges.txt``
    two whitespace-separated 0-based node ids per line
``features.csv``
    headerless comma-separated floats, one row per node
``labels.txt``
    one integer label per line
``splits.json``
    ``{"train": [...], "val": [...], "test": [...]}``
``meta.json``
    ``{"name": str, "metric": "accuracy" | "roc_auc"}``
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, DataFormatError, InvalidArgument, ValidationError
from .graph import Graph

log = logging.getLogger(__name__)

METRICS = ("accuracy", "roc_auc")
CHECKPOINT_FORMAT = "comba-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def validate(self, n: int):
        parts = {"train": self.train, "val": self.val, "test": self.test}
        seen = np.zeros(n, dtype=bool)
        for name, idx in parts.items():
            if len(idx) and (idx.min() < 0 or idx.max() >= n):
                raise ValidationError(f"{name} split has ids outside [0, {n})")
            if len(np.unique(idx)) != len(idx):
                raise ValidationError(f"{name} split has duplicate ids")
            if seen[idx].any():
                raise ValidationError(f"{name} split overlaps another split")
            seen[idx] = True

    def to_json(self) -> dict:
        return {k: [int(i) for i in getattr(self, k)] for k in ("train", "val", "test")}

    @classmethod
    def from_json(cls, obj) -> "Splits":
        try:
            return cls(*(np.asarray(obj[k], dtype=np.int64) for k in ("train", "val", "test")))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad splits object: {exc}") from exc


def random_splits(n: int, rng, fractions=(0.5, 0.25)) -> Splits:
    """50/25/25 train/val/test split of a random permutation."""
    perm = np.asarray(rng.permutation(n), dtype=np.int64)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    return Splits(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                  np.sort(perm[n_train + n_val:]))


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    graph: Graph
    splits: Splits
    name: str
    metric: str = "accuracy"
    directed_source: bool = False

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValidationError(f"metric must be one of {METRICS}, got {self.metric!r}")
        self.splits.validate(self.graph.n)


# ---------------------------------------------------------------- loading

def _lines(path: Path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line:
                yield lineno, line


def _read_edges(path: Path) -> np.ndarray:
    edges = []
    for lineno, line in _lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise DataFormatError(path, lineno, f"expected 2 node ids, got {len(parts)} fields")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataFormatError(path, lineno, f"non-integer node id in {line!r}") from None
        edges.append((u, v))
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def _read_features(path: Path) -> np.ndarray:
    rows, width = [], None
    for lineno, line in _lines(path):
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError:
            raise DataFormatError(path, lineno, "non-numeric feature value") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DataFormatError(path, lineno, f"expected {width} values, got {len(row)}")
        if not all(math.isfinite(v) for v in row):
            raise DataFormatError(path, lineno, "non-finite feature value")
        rows.append(row)
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), width or 0)


def _read_labels(path: Path) -> np.ndarray:
    labels = []
    for lineno, line in _lines(path):
        try:
            labels.append(int(line))
        except ValueError:
            raise DataFormatError(path, lineno, f"non-integer label {line!r}") from None
    return np.asarray(labels, dtype=np.int64)


def _read_json(path: Path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(path, exc.lineno, exc.msg) from None


def load_dataset(directory) -> DatasetBundle:
    root = Path(directory)
    for name in ("edges.txt", "features.csv", "labels.txt", "splits.json", "meta.json"):
        if not (root / name).is_file():
            raise ValidationError(f"{root}: missing {name}")
    edges = _read_edges(root / "edges.txt")
    features = _read_features(root / "features.csv")
    labels = _read_labels(root / "labels.txt")
    meta = _read_json(root / "meta.json")
    splits = Splits.from_json(_read_json(root / "splits.json"))

    n = len(labels)
    if features.shape[0] != n:
        raise ValidationError(f"{features.shape[0]} feature rows but {n} labels")
    if len(edges) and (edges.min() < 0 or edges.max() >= n):
        raise ValidationError(f"edge endpoint outside [0, {n})")
    if len(labels) and labels.min() < 0:
        raise ValidationError("labels must be non-negative")
    if not isinstance(meta, dict) or "name" not in meta or "metric" not in meta:
        raise ValidationError("meta.json needs 'name' and 'metric'")

    directed = bool(meta.get("directed", False))
    pairs = {(int(u), int(v)) for u, v in edges if u != v}
    one_way = sum(1 for u, v in pairs if (v, u) not in pairs)
    if directed and one_way:
        log.info("symmetrized %d directed edges", one_way)
    loops = int((edges[:, 0] == edges[:, 1]).sum()) if len(edges) else 0
    dupes = len(edges) - loops - len(pairs)
    if dupes:
        log.info("dropped %d duplicate edges", dupes)
    num_classes = meta.get("num_classes", int(labels.max()) + 1 if n else 1)
    graph = Graph.from_edges(n, edges, features, labels, num_classes)
    return DatasetBundle(graph, splits, str(meta["name"]), meta["metric"], directed)


def save_dataset(bundle: DatasetBundle, directory):
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    g = bundle.graph
    with open(root / "edges.txt", "w") as fh:
        for u, v in g.edge_list():
            fh.write(f"{u} {v}\n")
    with open(root / "features.csv", "w") as fh:
        for row in g.features:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(root / "labels.txt", "w") as fh:
        fh.writelines(f"{int(y)}\n" for y in g.labels)
    with open(root / "splits.json", "w") as fh:
        json.dump(bundle.splits.to_json(), fh)
    with open(root / "meta.json", "w") as fh:
        json.dump({"name": bundle.name, "metric": bundle.metric,
                   "num_classes": g.num_classes}, fh)


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "sbm"
    n: int = 400
    seed: int = 0
    # er
    p: float = 0.1
    num_edges: int | None = None
    num_classes: int = 2
    # sbm
    blocks: int = 2
    p_in: float = 0.05
    p_out: float = 0.005
    snr: float = 1.0
    feature_dim: int = 8
    # grid
    rows: int = 10
    cols: int = 10
    mine_prob: float = 0.2
    hidden_prob: float = 0.5

    def __post_init__(self):
        if self.kind not in ("er", "sbm", "grid"):
            raise InvalidArgument(f"unknown synthetic kind {self.kind!r}")
        for name in ("p", "p_in", "p_out", "mine_prob", "hidden_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidArgument(f"{name} must lie in [0, 1]")
        if self.kind == "sbm" and self.feature_dim < self.blocks:
            raise InvalidArgument("feature_dim must be at least the block count")
        if self.snr <= 0:
            raise InvalidArgument("snr must be positive")

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticSpec":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown synthetic keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


def _distinct_pairs(rng, count, draw) -> np.ndarray:
    """Rejection-sample ``count`` distinct unordered pairs from ``draw(k)``."""
    found = np.empty((0, 2), dtype=np.int64)
    while len(found) < count:
        need = count - len(found)
        cand = draw(2 * need + 16)
        cand = cand[cand[:, 0] != cand[:, 1]]
        cand = np.sort(cand, axis=1)
        found = np.unique(np.concatenate([found, cand]), axis=0)
    keep = rng.permutation(len(found))[:count]
    return found[np.sort(keep)]


def _er_edges(rng, nodes: np.ndarray, p: float, count=None) -> np.ndarray:
    k = len(nodes)
    total = k * (k - 1) // 2
    if count is None:
        count = rng.binomial(total, p) if total else 0
    if count > total:
        raise InvalidArgument(f"cannot place {count} edges on {k} nodes")
    if count == 0:
        return np.empty((0, 2), dtype=np.int64)
    return _distinct_pairs(rng, count, lambda m: nodes[rng.integers(0, k, size=(m, 2))])


def _bipartite_edges(rng, left, right, p) -> np.ndarray:
    count = rng.binomial(len(left) * len(right), p)
    if count == 0:
        return np.empty((0, 2), dtype=np.int64)
    def draw(m):
        return np.stack([left[rng.integers(0, len(left), m)],
                         right[rng.integers(0, len(right), m)]], axis=1)
    return _distinct_pairs(rng, count, draw)


def generate_synthetic(spec: SyntheticSpec) -> DatasetBundle:
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "er":
        n = spec.n
        edges = _er_edges(rng, np.arange(n), spec.p, spec.num_edges)
        features = rng.standard_normal((n, spec.feature_dim))
        labels = rng.integers(0, spec.num_classes, n)
        graph = Graph.from_edges(n, edges, features, labels, spec.num_classes)
        metric, name = "accuracy", f"er-{n}"
    elif spec.kind == "sbm":
        n = spec.n
        labels = rng.permutation(np.arange(n) % spec.blocks)
        members = [np.flatnonzero(labels == b) for b in range(spec.blocks)]
        parts = []
        for a in range(spec.blocks):
            parts.append(_er_edges(rng, members[a], spec.p_in))
            for b in range(a + 1, spec.blocks):
                parts.append(_bipartite_edges(rng, members[a], members[b], spec.p_out))
        edges = np.concatenate(parts) if parts else np.empty((0, 2), dtype=np.int64)
        features = np.zeros((n, spec.feature_dim))
        features[np.arange(n), labels] = 1.0
        if math.isfinite(spec.snr):
            features += rng.standard_normal(features.shape) / spec.snr
        graph = Graph.from_edges(n, edges, features, labels, spec.blocks)
        metric, name = "accuracy", f"sbm-{n}"
    else:
        graph = _minesweeper(rng, spec)
        metric, name = "roc_auc", f"grid-{spec.rows}x{spec.cols}"
    return DatasetBundle(graph, random_splits(graph.n, rng), name, metric)


def _minesweeper(rng, spec: SyntheticSpec) -> Graph:
    """Lattice with 8-neighbourhood; label = mine, features = revealed neighbour count."""
    r, c = spec.rows, spec.cols
    ids = np.arange(r * c).reshape(r, c)
    edges = []
    for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):
        src = ids[max(0, -dr):r - max(0, dr), max(0, -dc):c - max(0, dc)]
        dst = ids[max(0, dr):r + min(0, dr) or None, max(0, dc):c + min(0, dc) or None]
        edges.append(np.stack([src.ravel(), dst.ravel()], axis=1))
    edges = np.concatenate(edges)
    n = r * c
    mines = (rng.random(n) < spec.mine_prob).astype(np.int64)
    count = np.zeros(n, dtype=np.int64)
    np.add.at(count, edges[:, 0], mines[edges[:, 1]])
    np.add.at(count, edges[:, 1], mines[edges[:, 0]])
    features = np.zeros((n, 10))
    hidden = rng.random(n) < spec.hidden_prob
    features[np.flatnonzero(~hidden), count[~hidden]] = 1.0
    features[hidden, 9] = 1.0
    return Graph.from_edges(n, edges, features, mines, 2)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: torch.nn.Module, path, config: dict | None = None):
    """Write named parameter tensors (with shapes) as a versioned JSON blob.

    Floats are written with ``repr`` precision, so float64 round-trips exactly.
    """
    params = {}
    for name, tensor in model.state_dict().items():
        t = tensor.detach().to(torch.float64).cpu()
        params[name] = {"shape": list(t.shape), "data": t.reshape(-1).tolist()}
    blob = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "config": config or {}, "params": params}
    Path(path).write_text(json.dumps(blob, sort_keys=True))


def load_checkpoint(path, model: torch.nn.Module | None = None):
    """Read a checkpoint; returns ``(state_dict, config)``.

    If ``model`` is given, names and shapes are checked against it and the
    values are loaded in place.
    """
    try:
        blob = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    state = {}
    for name, entry in blob["params"].items():
        data = torch.tensor(entry["data"], dtype=torch.float64)
        shape = tuple(entry["shape"])
        if data.numel() != math.prod(shape):
            raise CheckpointError(f"{name}: {data.numel()} values for shape {shape}")
        state[name] = data.reshape(shape)
    if model is not None:
        expected = model.state_dict()
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise CheckpointError(
                f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, tensor in expected.items():
            if tuple(tensor.shape) != tuple(state[name].shape):
                raise CheckpointError(
                    f"{name}: checkpoint shape {tuple(state[name].shape)} "
                    f"!= model shape {tuple(tensor.shape)}")
        model.load_state_dict({k: v.to(expected[k].dtype) for k, v in state.items()})
    return state, blob.get("config", {})
