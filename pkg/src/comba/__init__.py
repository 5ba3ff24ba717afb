"""State-space node classification with cross-batch aggregation and context gating."""

from .block import CombaBlock, CombaModel, selective_scan, zoh_discretize
from .cross_batch import BatchPlan, CrossBatch, EmbeddingStore, gnn_hop_layer
from .data import DatasetBundle, Splits, SyntheticSpec, generate_synthetic, load_dataset
from .graph import (BatchSet, Graph, HopAdjacency, bfs_distance_oracle, hop_adjacency,
                    induce_subgraph, partition_batches)
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"
