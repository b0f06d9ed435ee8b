"""Bisection models and refiners that plug into the agglomeration engine."""

from __future__ import annotations

import numpy as np

from . import gnn, rl
from .baselines import KMeansConfig, classic_bisect, fm_refine, kmeans_cluster
from .engine import BisectionModel, Refiner, recursive_kway
from .graph import Graph


class KMeansModel(BisectionModel):
    """k-means on cell centroids."""

    name = "kmeans"

    def __init__(self, seed: int = 0, max_iters: int = 100):
        self.seed, self.max_iters = seed, max_iters

    def bisect_graph(self, graph: Graph) -> np.ndarray:
        return self.kway(graph, 2)

    def kway(self, graph: Graph, k: int) -> np.ndarray:
        if graph.n < 2:
            return np.zeros(graph.n, dtype=np.int64)
        lab = kmeans_cluster(graph.centroids, KMeansConfig(k, self.max_iters, self.seed))
        _, lab = np.unique(lab, return_inverse=True)
        return lab.ravel()


class ClassicModel(BisectionModel):
    """Multilevel greedy-growth + FM bisection with cell measures as node weights."""

    name = "classic"

    def __init__(self, fm_passes: int = 8):
        self.fm_passes = fm_passes

    def bisect_graph(self, graph: Graph) -> np.ndarray:
        return classic_bisect(graph, fm_passes=self.fm_passes)

    def kway(self, graph: Graph, k: int) -> np.ndarray:
        return recursive_kway(graph, lambda g, f: classic_bisect(g, f, fm_passes=self.fm_passes), k)


class SageModel(BisectionModel):
    name = "sage"

    def __init__(self, net: gnn.SageBaseNet):
        self.net = net

    def bisect_graph(self, graph: Graph) -> np.ndarray:
        if graph.n < 2:
            return np.zeros(graph.n, dtype=np.int64)
        return gnn.gnn_bisect(self.net, graph)


class SageHeteroModel(SageModel):
    """Heterogeneous SAGE; parts holding a single physical group go to k-means."""

    name = "sage-hetero"

    def __init__(self, net: gnn.SageHeteroNet, seed: int = 0):
        super().__init__(net)
        self.fallback = KMeansModel(seed)

    def bisect_graph(self, graph: Graph) -> np.ndarray:
        if graph.tags is None:
            raise ValueError("heterogeneous model needs physical tags")
        if np.ptp(graph.tags) == 0:
            return self.fallback.bisect_graph(graph)
        return super().bisect_graph(graph)


class RLPartitionerModel(BisectionModel):
    name = "rl"

    def __init__(self, net: rl.ActorCriticNet):
        self.net = net

    def bisect_graph(self, graph: Graph) -> np.ndarray:
        if graph.n < 2:
            return np.zeros(graph.n, dtype=np.int64)
        return rl.rl_bisect(self.net, graph)


def refine_objective(graph: Graph, labels, b: float) -> float:
    return rl.refine_objective(graph, labels, b)


class FMRefiner(Refiner):
    """FM passes, kept only when ``NC + b * imbalance`` does not grow."""

    def __init__(self, max_passes: int = 8, b: float = 0.35):
        self.max_passes, self.b = max_passes, b

    def refine(self, graph: Graph, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if graph.n < 2 or labels.min() == labels.max():
            return labels.copy()
        out = fm_refine(graph, labels, self.max_passes)
        if refine_objective(graph, out, self.b) <= refine_objective(graph, labels, self.b):
            return out
        return labels.copy()


class RLRefinerModel(Refiner):
    def __init__(self, net: rl.RefinerNet, config: rl.A2CConfig = rl.REFINER_CONFIG):
        self.net, self.config = net, config

    def refine(self, graph: Graph, labels) -> np.ndarray:
        return rl.refine(self.net, graph, labels, self.config)
